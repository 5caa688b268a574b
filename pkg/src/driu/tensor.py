"""Dense tensor helpers.

Tensors are plain ``numpy.ndarray`` values in channel-first (C, H, W) layout.
Storage is float32; every op is dtype-generic so gradient checks can run the
same code in float64.
"""
import hashlib
import operator

import numpy as np

from .errors import InvalidArgumentError, ShapeError

DTYPE = np.float32


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: extents must be >= 1")
    return shape


def zeros(shape, dtype=DTYPE):
    return np.zeros(_check_shape(shape), dtype=dtype)


def rng_for(seed, name=""):
    """Counter-based generator keyed by ``(seed, name)``.

    The key is a digest, so the stream for one tensor does not depend on how
    many other tensors were drawn before it.
    """
    digest = hashlib.blake2b(f"{int(seed)}:{name}".encode(), digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def he_normal_init(shape, fan_in, rng_seed, name="", dtype=DTYPE):
    """Normal(0, sqrt(2 / fan_in)) draws, reproducible for a given seed/name."""
    shape = _check_shape(shape)
    if fan_in < 1:
        raise InvalidArgumentError(f"fan_in must be >= 1, got {fan_in}")
    rng = rng_for(rng_seed, name)
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


_OPS = {
    "add": operator.add,
    "sub": operator.sub,
    "mul": operator.mul,
}


def elementwise(op, a, b):
    """Apply ``add``/``sub``/``mul``/``scale`` elementwise.

    ``scale`` takes a scalar as ``b``; every other op requires identical
    shapes (no broadcasting).
    """
    a = np.asarray(a)
    if op == "scale":
        if np.ndim(b) != 0:
            raise ShapeError("scale expects a scalar factor")
        return (a * np.asarray(b, dtype=a.dtype)).astype(a.dtype, copy=False)
    try:
        fn = _OPS[op]
    except KeyError:
        raise InvalidArgumentError(f"unknown elementwise op {op!r}") from None
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return fn(a, b)


def reshape(t, shape):
    shape = _check_shape(shape)
    if int(np.prod(shape)) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} into {shape}")
    return np.reshape(t, shape)
