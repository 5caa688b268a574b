"""Class-balanced binary cross entropy on the fused output."""
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .ops import log_sigmoid, sigmoid


@dataclass
class LossTerms:
    beta: float
    total: float
    per_pixel: np.ndarray


def _as_mask(mask):
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("ground-truth mask must be strictly binary")
    return mask.astype(bool)


def class_balance_beta(mask):
    """Fraction of background pixels, |Y-| / |Y|."""
    mask = _as_mask(mask)
    n = mask.size
    return (n - int(np.count_nonzero(mask))) / n


def balanced_bce_loss(prob, mask, activation=None, beta=None):
    """Summed (not averaged) class-balanced cross entropy.

    If ``activation`` is given the log terms are computed as log-sigmoid of the
    activations in float64; otherwise ``prob`` is promoted to float64 and
    logged directly. ``beta`` overrides the mask-derived weight.
    """
    fg = _as_mask(mask)
    if beta is None:
        beta = class_balance_beta(fg)
    if activation is not None:
        a = np.asarray(activation, dtype=np.float64)
        if a.shape != fg.shape:
            raise ShapeError(f"activation {a.shape} vs mask {fg.shape}")
        log_p, log_q = log_sigmoid(a), log_sigmoid(-a)
    else:
        p = np.asarray(prob, dtype=np.float64)
        if p.shape != fg.shape:
            raise ShapeError(f"prob {p.shape} vs mask {fg.shape}")
        log_p, log_q = np.log(p), np.log1p(-p)
    per_pixel = np.where(fg, -beta * log_p, -(1.0 - beta) * log_q)
    return LossTerms(beta=beta, total=float(per_pixel.sum()), per_pixel=per_pixel)


def balanced_bce_grad(activation, mask, beta=None):
    """d(loss)/d(activation): -beta*(1-p) on foreground, (1-beta)*p on background."""
    fg = _as_mask(mask)
    a = np.asarray(activation)
    if a.shape != fg.shape:
        raise ShapeError(f"activation {a.shape} vs mask {fg.shape}")
    if beta is None:
        beta = class_balance_beta(fg)
    a64 = a.astype(np.float64)
    # 1 - sigmoid(a) == sigmoid(-a), without cancellation for large a
    g = np.where(fg, -beta * sigmoid(-a64), (1.0 - beta) * sigmoid(a64))
    return g.astype(a.dtype if np.issubdtype(a.dtype, np.floating) else np.float64)
