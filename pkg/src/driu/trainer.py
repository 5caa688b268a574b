"""SGD-with-momentum training on one image per iteration."""
import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import net
from .dataio.atomic import atomic_write
from .dataio.datasets import Sample
from .errors import ConfigError, ConsistencyError, EmptyDatasetError, TrainingDiverged
from .loss import balanced_bce_grad, balanced_bce_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 5e-5
    momentum: float = 0.95
    iterations: int = 500
    decay_factor: float = 0.1
    # fixed-interval decay when set; otherwise decay at the milestone fractions
    decay_interval: int | None = None
    decay_milestones: tuple = (0.6, 0.85)
    augment: bool = True
    rotations: tuple = (0.0, 90.0, 180.0, 270.0)
    rotation_jitter: float = 30.0
    scales: tuple = (0.75, 1.0, 1.25)
    seed: int = 0
    log_every: int = 50
    # rescale the whole gradient to this global L2 norm when it is larger (None = off)
    clip_norm: float | None = 1000.0

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must lie in (0, 1]")
        if self.decay_interval is not None and self.decay_interval < 1:
            raise ConfigError("decay_interval must be >= 1")
        if any(s <= 0 for s in self.scales) or not self.scales:
            raise ConfigError("scale factors must be > 0")
        if not self.rotations:
            raise ConfigError("at least one rotation angle is required")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be > 0 or None")


FINETUNE_CONFIG = TrainConfig(base_lr=1e-8, iterations=20000, clip_norm=None)


def lr_at(iteration, config):
    """Step-decayed learning rate at ``iteration``."""
    if config.decay_interval is not None:
        steps = iteration // config.decay_interval
    else:
        steps = sum(iteration >= int(round(m * config.iterations)) for m in config.decay_milestones)
    return config.base_lr * config.decay_factor ** steps


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def compute_channel_means(samples):
    """Pixel-weighted per-channel mean over all training images."""
    samples = list(samples)
    if not samples:
        raise EmptyDatasetError("cannot compute channel means of an empty training set")
    total = np.zeros(3, dtype=np.float64)
    count = 0
    for s in samples:
        img = s.image if isinstance(s, Sample) else np.asarray(s)
        total += img.astype(np.float64).sum(axis=(1, 2))
        count += img.shape[1] * img.shape[2]
    return tuple(total / count)


def preprocess(image, means):
    m = np.asarray(means, dtype=image.dtype)[:, None, None]
    return image - m


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _affine(arr, angle_deg, scale, shift, order):
    """Rotate by ``angle_deg`` and zoom by ``scale`` about the centre, same shape out."""
    h, w = arr.shape[-2:]
    th = np.deg2rad(angle_deg)
    # output -> input coordinate map
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]) / scale
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - rot @ (centre + np.asarray(shift))
    if arr.ndim == 2:
        return ndimage.affine_transform(arr, rot, offset=offset, order=order, mode="constant", cval=0)
    return np.stack([ndimage.affine_transform(ch, rot, offset=offset, order=order,
                                              mode="constant", cval=0) for ch in arr])


def augment(sample, rng, config):
    """Apply one random rotation+scale draw to the image and all its masks."""
    base = float(rng.choice(np.asarray(config.rotations, dtype=float)))
    jitter = rng.uniform(-config.rotation_jitter, config.rotation_jitter) if config.rotation_jitter else 0.0
    scale = float(rng.choice(np.asarray(config.scales, dtype=float)))
    return transform_sample(sample, base + jitter, scale, rng)


def transform_sample(sample, angle_deg, scale, rng=None):
    quarter, rest = divmod(angle_deg, 90.0)
    quarter = int(quarter) % 4
    if rest > 45.0:
        quarter, rest = (quarter + 1) % 4, rest - 90.0

    def _rot90(a):
        return np.ascontiguousarray(np.rot90(a, quarter, axes=(-2, -1))) if quarter else a

    image = _rot90(sample.image)
    masks = {k: _rot90(getattr(sample, k)) for k in ("gold", "second", "fov")
             if getattr(sample, k) is not None}
    if rest == 0.0 and scale == 1.0:
        return replace(sample, image=image, **masks)

    h, w = image.shape[1:]
    slack = abs(scale - 1.0) / 2.0
    if rng is not None and slack:
        shift = (rng.uniform(-slack, slack) * h, rng.uniform(-slack, slack) * w)
    else:
        shift = (0.0, 0.0)
    image = _affine(image.astype(np.float64), rest, scale, shift, order=1).astype(sample.image.dtype)
    masks = {k: _affine(m, rest, scale, shift, order=0).astype(m.dtype) for k, m in masks.items()}
    return replace(sample, image=image, **masks)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    velocity: dict
    iteration: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(v) for k, v in params.items()})


def global_norm(grads):
    return math.sqrt(sum(float(np.square(g, dtype=np.float64).sum()) for g in grads.values()))


def clip_by_global_norm(grads, max_norm):
    """Scale every gradient by ``max_norm / norm`` when the global norm exceeds it."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm


def sgd_momentum_step(params, grads, state, lr, momentum):
    """v <- momentum*v + g;  w <- w - lr*v.  Updates ``params`` and ``state`` in place."""
    if set(params) != set(grads) or set(params) != set(state.velocity):
        raise ConsistencyError("params, grads and momentum buffers must share names")
    for name, w in params.items():
        g, v = grads[name], state.velocity[name]
        if g.shape != w.shape or v.shape != w.shape:
            raise ConsistencyError(f"shape mismatch for {name}: {w.shape}, {g.shape}, {v.shape}")
        v *= momentum
        v += g
        w -= (lr * v).astype(w.dtype)
    state.iteration += 1
    return params, state


@dataclass
class TrainResult:
    params: net.NetworkParams
    log: list = field(default_factory=list)     # (iteration, lr, loss)
    means: tuple = (0.0, 0.0, 0.0)


def sample_order(n, iterations, seed):
    """Cyclic visiting order: a fresh seeded shuffle of range(n) per epoch."""
    order = []
    epoch = 0
    while len(order) < iterations:
        rng = np.random.default_rng([seed, 0x0E90C, epoch])
        order.extend(rng.permutation(n).tolist())
        epoch += 1
    return order[:iterations]


def train(params, train_samples, config, task="vessel", means=None, callback=None):
    """Fine-tune every parameter on ``train_samples`` for ``config.iterations`` steps.

    ``params`` is updated in place. The random stream of iteration ``i`` is
    derived from ``(seed, i)`` alone, so runs are reproducible bit for bit.
    """
    train_samples = list(train_samples)
    if not train_samples:
        raise EmptyDatasetError("training split is empty")
    net.TaskHead.named(task)
    if means is None:
        means = compute_channel_means(train_samples)
    state = OptimState.zeros_like(params)
    result = TrainResult(params=params, means=tuple(means))
    order = sample_order(len(train_samples), config.iterations, config.seed)

    for it, idx in enumerate(order):
        rng = np.random.default_rng([config.seed, 0xA06, it])
        sample = train_samples[idx]
        if config.augment:
            sample = augment(sample, rng, config)
        x = preprocess(sample.image, means)
        _, trace = net.forward(params, x, (task,))
        act = trace.activations[task]
        mask = sample.gold[None]
        terms = balanced_bce_loss(None, mask, activation=act)
        lr = lr_at(it, config)
        if not math.isfinite(terms.total):
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}",
                diagnostics={"iteration": it, "lr": lr, "sample": sample.id,
                             "activation_range": (float(np.min(act)), float(np.max(act))),
                             "log_tail": result.log[-10:]})
        grad = balanced_bce_grad(act, mask)
        grads = net.backward(params, trace, {task: grad})
        grads, norm = clip_by_global_norm(grads, config.clip_norm)
        if not math.isfinite(norm):
            raise TrainingDiverged(
                f"non-finite gradient at iteration {it}",
                diagnostics={"iteration": it, "lr": lr, "sample": sample.id, "loss": terms.total,
                             "log_tail": result.log[-10:]})
        sgd_momentum_step(params, grads, state, lr, config.momentum)
        result.log.append((it, lr, terms.total))
        if callback is not None:
            callback(it, terms)
        if config.log_every and (it % config.log_every == 0 or it == config.iterations - 1):
            log.info("iter %d lr %.3g loss %.6g (%.4g per pixel)",
                     it, lr, terms.total, terms.total / mask.size)
    return result


def write_loss_log(path, rows):
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "lr", "loss"])
        for it, lr, loss in rows:
            writer.writerow([it, repr(float(lr)), repr(float(loss))])
