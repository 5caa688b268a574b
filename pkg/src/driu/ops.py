"""Forward/backward pairs for the layer primitives of the network.

Every forward returns ``(output, cache)``; the matching backward consumes that
cache. Inputs are single images in (C, H, W) layout, no batch axis. All
functions preserve the dtype of their inputs.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UnsupportedError


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int = 3

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ShapeError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.out_channels < 1:
            raise ShapeError("out_channels must be >= 1")

    @property
    def pad(self):
        return (self.kernel - 1) // 2


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _check_conv(x, weights, bias, spec):
    if x.ndim != 3:
        raise ShapeError(f"conv input must be (C,H,W), got {x.shape}")
    o, c, kh, kw = weights.shape
    if c != x.shape[0]:
        raise ShapeError(f"weights expect {c} input channels, input has {x.shape[0]}")
    if spec is not None and (kh != spec.kernel or kw != spec.kernel or o != spec.out_channels):
        raise ShapeError(f"weights {weights.shape} do not match {spec}")
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"unsupported kernel {kh}x{kw}")
    if bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match {o} outputs")


def conv2d_forward(x, weights, bias, spec=None, method="shift"):
    """Same-padded, stride-1 cross-correlation.

    ``method="shift"`` accumulates one matrix product per kernel tap;
    ``method="im2col"`` unfolds the padded input into columns and does a single
    product. Both give the same result up to float rounding.
    """
    _check_conv(x, weights, bias, spec)
    o, c, k, _ = weights.shape
    p = (k - 1) // 2
    _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x

    if method == "im2col":
        cols = _im2col(xp, k, h, w)
        out = weights.reshape(o, c * k * k) @ cols
    elif method == "shift":
        out = np.zeros((o, h * w), dtype=np.result_type(x, weights))
        for dy in range(k):
            for dx in range(k):
                patch = xp[:, dy:dy + h, dx:dx + w].reshape(c, h * w)
                out += weights[:, :, dy, dx] @ patch
    else:
        raise ValueError(f"unknown conv method {method!r}")

    out = out.reshape(o, h, w) + bias[:, None, None]
    return out, {"xp": xp, "weights": weights, "shape": x.shape}


def _im2col(xp, k, h, w):
    c = xp.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # win: (C, H, W, k, k) -> (C, k, k, H, W)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * k * k, h * w)


def conv2d_backward(grad_out, cache):
    xp, weights = cache["xp"], cache["weights"]
    c, h, w = cache["shape"]
    o, _, k, _ = weights.shape
    if grad_out.shape != (o, h, w):
        raise ShapeError(f"grad_out {grad_out.shape} != forward output {(o, h, w)}")
    p = (k - 1) // 2
    g = grad_out.reshape(o, h * w)

    grad_w = np.empty_like(weights)
    grad_xp = np.zeros_like(xp)
    for dy in range(k):
        for dx in range(k):
            patch = xp[:, dy:dy + h, dx:dx + w].reshape(c, h * w)
            grad_w[:, :, dy, dx] = g @ patch.T
            grad_xp[:, dy:dy + h, dx:dx + w] += (weights[:, :, dy, dx].T @ g).reshape(c, h, w)
    grad_b = g.sum(axis=1)
    grad_x = grad_xp[:, p:p + h, p:p + w] if p else grad_xp
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x):
    """max(x, 0); NaN propagates so a diverging run is detected downstream."""
    mask = x > 0
    return np.maximum(x, 0).astype(x.dtype, copy=False), mask


def relu_backward(grad_out, mask):
    if grad_out.shape != mask.shape:
        raise ShapeError(f"grad_out {grad_out.shape} != relu input {mask.shape}")
    return np.where(mask, grad_out, 0).astype(grad_out.dtype, copy=False)


def sigmoid(a):
    """Logistic function; ``exp`` is only ever taken of non-positive values."""
    a = np.asarray(a)
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)


def log_sigmoid(a):
    """log(sigmoid(a)) without overflow or log(0)."""
    a = np.asarray(a, dtype=np.float64)
    return np.minimum(a, 0.0) - np.log1p(np.exp(-np.abs(a)))


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool2x2(x):
    """2x2/stride-2 max pooling in ceil mode.

    Border windows are truncated (padded with -inf). Ties go to the first
    element in row-major window order.
    """
    c, h, w = x.shape
    ho, wo = -(-h // 2), -(-w // 2)
    xp = np.full((c, 2 * ho, 2 * wo), -np.inf, dtype=x.dtype)
    xp[:, :h, :w] = x
    win = xp.reshape(c, ho, 2, wo, 2).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, {"arg": arg, "shape": x.shape}


def maxpool2x2_backward(grad_out, cache):
    arg = cache["arg"]
    c, h, w = cache["shape"]
    if grad_out.shape != arg.shape:
        raise ShapeError(f"grad_out {grad_out.shape} != pooled shape {arg.shape}")
    _, ho, wo = arg.shape
    win = np.zeros((c, ho, wo, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, arg[..., None], grad_out[..., None], axis=-1)
    full = win.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * ho, 2 * wo)
    return np.ascontiguousarray(full[:, :h, :w])


# ---------------------------------------------------------------------------
# bilinear resize (align corners)
# ---------------------------------------------------------------------------

def interp_matrix(n_out, n_in, dtype=np.float64):
    """Row i holds the weights mapping an ``n_in`` signal to output sample i.

    Uses src = i * (n_in - 1) / (n_out - 1), so both end samples are copied
    exactly.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - i0
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - frac
    m[rows, i0 + 1] += frac
    return m.astype(dtype)


def bilinear_resize(x, target):
    c, h, w = x.shape
    H, W = target
    if H < h or W < w:
        raise UnsupportedError(f"downscaling {(h, w)} -> {(H, W)} is not supported")
    rh = interp_matrix(H, h, x.dtype)
    rw = interp_matrix(W, w, x.dtype)
    if (H, W) == (h, w):
        out = x.copy()
    else:
        out = np.matmul(np.matmul(rh, x), rw.T)
    return out, {"rh": rh, "rw": rw, "shape": x.shape}


def bilinear_resize_backward(grad_out, cache):
    rh, rw = cache["rh"], cache["rw"]
    c, h, w = cache["shape"]
    if grad_out.shape != (c, rh.shape[0], rw.shape[0]):
        raise ShapeError(f"grad_out {grad_out.shape} does not match resized output")
    if grad_out.shape[1:] == (h, w):
        return grad_out.copy()
    return np.matmul(np.matmul(rh.T, grad_out), rw)


# ---------------------------------------------------------------------------
# concatenation
# ---------------------------------------------------------------------------

def concat_channels(tensors):
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    spatial = tensors[0].shape[1:]
    for t in tensors:
        if t.shape[1:] != spatial:
            raise ShapeError(f"spatial mismatch: {t.shape[1:]} vs {spatial}")
    offsets = np.cumsum([0] + [t.shape[0] for t in tensors])
    return np.concatenate(tensors, axis=0), offsets


def concat_backward(grad_out, offsets):
    if grad_out.shape[0] != offsets[-1]:
        raise ShapeError(f"grad has {grad_out.shape[0]} channels, expected {offsets[-1]}")
    return [grad_out[a:b] for a, b in zip(offsets[:-1], offsets[1:])]
