"""Deterministic synthetic fundus images with exact vessel and disc masks."""
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgumentError
from ..tensor import rng_for
from .datasets import Sample

MIN_SIZE = 32
VESSEL_FRACTION = (0.03, 0.18)   # accepted range of vessel pixels within the FOV


@dataclass
class SynthFundus:
    id: str
    image: np.ndarray
    fov: np.ndarray
    vessel: np.ndarray
    disc: np.ndarray
    vessel2: np.ndarray
    disc2: np.ndarray

    def sample(self, task):
        gold, second = {"vessel": (self.vessel, self.vessel2),
                        "disc": (self.disc, self.disc2)}[task]
        return Sample(self.id, self.image, gold, second, self.fov)


def _segment_mask(yy, xx, p0, p1, half_width):
    """Pixels whose centre lies within ``half_width`` of segment p0-p1."""
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    length2 = dy * dy + dx * dx
    if length2 == 0:
        t = np.zeros_like(yy)
    else:
        t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / length2, 0.0, 1.0)
    return (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2 <= half_width ** 2


def _grow_tree(rng, start, angle, width, step, depth, inside, segments):
    pos = np.asarray(start, dtype=float)
    n_steps = int(rng.integers(4, 8))
    for _ in range(n_steps):
        angle += rng.normal(0.0, 0.25)
        nxt = pos + step * np.array([np.sin(angle), np.cos(angle)])
        if not inside(nxt):
            break
        segments.append((tuple(pos), tuple(nxt), width))
        pos = nxt
        if depth > 0 and rng.random() < 0.35:
            side = rng.choice([-1.0, 1.0])
            _grow_tree(rng, pos, angle + side * rng.uniform(0.5, 1.1),
                       max(1, width - 1), step * 0.8, depth - 1, inside, segments)
    if depth > 0:
        _grow_tree(rng, pos, angle - rng.uniform(0.3, 0.7), max(1, width - 1),
                   step * 0.8, depth - 1, inside, segments)
        _grow_tree(rng, pos, angle + rng.uniform(0.3, 0.7), max(1, width - 1),
                   step * 0.8, depth - 1, inside, segments)


def _perturb(mask, rng, rate=0.3):
    """A plausible second annotation: flip a fraction of boundary pixels."""
    padded = np.pad(mask, 1)
    neigh = padded[:-2, 1:-1] | padded[2:, 1:-1] | padded[1:-1, :-2] | padded[1:-1, 2:]
    inner = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    edge = (mask & ~inner) | (~mask & neigh)
    flip = edge & (rng.random(mask.shape) < rate)
    return mask ^ flip


def synth_geometry(seed, size):
    if size < MIN_SIZE:
        raise InvalidArgumentError(f"size must be >= {MIN_SIZE}, got {size}")
    rng = rng_for(seed, "synth-fundus")
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    c = (size - 1) / 2.0
    fov_r = 0.47 * size
    r2 = (yy - c) ** 2 + (xx - c) ** 2
    fov = r2 <= fov_r ** 2

    disc_r = rng.uniform(0.08, 0.12) * size
    theta = rng.uniform(0, 2 * np.pi)
    rho = rng.uniform(0.2, 0.5) * fov_r
    dc = (c + rho * np.sin(theta), c + rho * np.cos(theta))
    disc = ((yy - dc[0]) ** 2 + (xx - dc[1]) ** 2 <= disc_r ** 2) & fov

    def inside(p):
        return (p[0] - c) ** 2 + (p[1] - c) ** 2 <= (fov_r - 1) ** 2

    n_fov = int(fov.sum())
    lo, hi = VESSEL_FRACTION
    step = size / 10.0
    # thinner roots on small canvases keep the vessel density in range
    root_width = 3 if size >= 48 else 2
    best, best_gap = None, np.inf
    for _ in range(50):
        segments = []
        base = rng.uniform(0, 2 * np.pi)
        for k in range(4):
            _grow_tree(rng, dc, base + k * np.pi / 2 + rng.normal(0, 0.3), root_width, step, 2,
                       inside, segments)
        vessel = np.zeros((size, size), dtype=bool)
        for p0, p1, width in segments:
            vessel |= _segment_mask(yy, xx, p0, p1, width / 2.0)
        vessel &= fov
        frac = vessel.sum() / n_fov
        gap = max(lo - frac, frac - hi, 0.0)
        if gap < best_gap:
            best, best_gap = vessel, gap
        if gap == 0.0:
            break
    # otherwise keep the attempt closest to the accepted window
    vessel = best

    # background: reddish retina with radial falloff, black outside the FOV
    falloff = 1.0 - 0.35 * r2 / fov_r ** 2
    img = np.stack([0.78 * falloff, 0.38 * falloff, 0.16 * falloff])
    disc_soft = np.exp(-((yy - dc[0]) ** 2 + (xx - dc[1]) ** 2) / (2 * (1.6 * disc_r) ** 2))
    img += 0.12 * disc_soft * np.array([1.0, 1.0, 0.8])[:, None, None]
    img[:, disc] = np.array([0.97, 0.86, 0.58])[:, None]
    img[:, vessel] *= np.array([0.55, 0.35, 0.45])[:, None]
    img += rng.normal(0.0, 0.01, img.shape)
    img[:, ~fov] = 0.02
    # snap to the 8-bit grid so a written-and-reloaded image is identical
    img = (np.floor(np.clip(img, 0.0, 1.0) * 255 + 0.5) / 255).astype(np.float32)

    rng2 = rng_for(seed, "synth-second-annotator")
    return SynthFundus(
        id=f"synth{seed:04d}",
        image=img,
        fov=fov.astype(np.uint8),
        vessel=vessel.astype(np.uint8),
        disc=disc.astype(np.uint8),
        vessel2=(_perturb(vessel, rng2) & fov).astype(np.uint8),
        disc2=(_perturb(disc, rng2) & fov).astype(np.uint8),
    )


def synth_fundus(seed, size=64, task="vessel"):
    """Synthetic sample for ``task``; geometry depends only on (seed, size)."""
    return synth_geometry(seed, size).sample(task)
