"""Region precision-recall, ODS F-measure, human points and boundary error."""
import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .dataio.atomic import atomic_write
from .errors import EmptyDatasetError, ShapeError, UndefinedBoundaryError

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = np.arange(1, 256) / 256.0


def precision_recall_f(tp, fp, fn):
    """P, R, F from counts, with P=1 / R=1 on empty denominators and F=0 when P+R=0."""
    tp, fp, fn = (np.asarray(v, dtype=np.int64) for v in (tp, fp, fn))
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 1.0)
        r = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 1.0)
        f = np.where(p + r > 0, 2 * p * r / np.where(p + r > 0, p + r, 1.0), 0.0)
    if p.ndim == 0:
        return float(p), float(r), float(f)
    return p, r, f


def _f_measure(p, r):
    p, r = np.asarray(p, dtype=float), np.asarray(r, dtype=float)
    denom = p + r
    return np.where(denom > 0, 2 * p * r / np.where(denom > 0, denom, 1.0), 0.0)


@dataclass
class PRCurve:
    """Pooled counts per threshold.

    ``precision``/``recall`` derive from the pooled counts unless given
    explicitly (the per-image averaged curve); ``f`` always follows from them.
    """
    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    precision: np.ndarray = None
    recall: np.ndarray = None
    f: np.ndarray = field(init=False)

    def __post_init__(self):
        p, r, _ = precision_recall_f(self.tp, self.fp, self.fn)
        self.precision = p if self.precision is None else np.asarray(self.precision, dtype=float)
        self.recall = r if self.recall is None else np.asarray(self.recall, dtype=float)
        self.f = _f_measure(self.precision, self.recall)

    def rows(self):
        for i, t in enumerate(self.thresholds):
            yield (float(t), int(self.tp[i]), int(self.fp[i]), int(self.fn[i]),
                   float(self.precision[i]), float(self.recall[i]), float(self.f[i]))


def binarize(probmap, t):
    return np.asarray(probmap) > t


def _valid_region(gold, fov, use_fov):
    if fov is not None and use_fov:
        if fov.shape != gold.shape:
            raise ShapeError(f"fov {fov.shape} vs gold {gold.shape}")
        return np.asarray(fov).astype(bool)
    return np.ones(gold.shape, dtype=bool)


def _squeeze(a):
    a = np.asarray(a)
    return a[0] if a.ndim == 3 and a.shape[0] == 1 else a


def image_counts(prob, gold, thresholds, fov=None, use_fov=True):
    """Per-threshold (tp, fp, fn) for one image; exact integer counts."""
    prob, gold = _squeeze(prob), _squeeze(gold).astype(bool)
    if prob.shape != gold.shape:
        raise ShapeError(f"probability map {prob.shape} vs gold {gold.shape}")
    valid = _valid_region(gold, None if fov is None else _squeeze(fov), use_fov)
    fg = np.sort(prob[gold & valid], kind="stable")
    bg = np.sort(prob[~gold & valid], kind="stable")
    t = np.asarray(thresholds, dtype=np.float64)
    # count of values strictly above t
    tp = fg.size - np.searchsorted(fg, t, side="right")
    fp = bg.size - np.searchsorted(bg, t, side="right")
    fn = fg.size - tp
    return tp.astype(np.int64), fp.astype(np.int64), fn.astype(np.int64)


def pr_curve(probmaps, golds, fovs=None, thresholds=DEFAULT_THRESHOLDS, use_fov=True,
             average="pooled"):
    """Precision/recall at each threshold.

    ``average="pooled"`` sums pixel counts over the test set before dividing;
    ``average="image"`` takes the mean of the per-image precision and recall.
    The counts stored on the curve are pooled in both cases.
    """
    if average not in ("pooled", "image"):
        raise ValueError(f"average must be 'pooled' or 'image', got {average!r}")
    probmaps, golds = list(probmaps), list(golds)
    if len(probmaps) != len(golds):
        raise ShapeError(f"{len(probmaps)} probability maps vs {len(golds)} gold masks")
    fovs = [None] * len(golds) if fovs is None else list(fovs)
    if len(fovs) != len(golds):
        raise ShapeError("fov list length does not match")
    thresholds = np.sort(np.asarray(thresholds, dtype=np.float64))
    tp = np.zeros(thresholds.size, dtype=np.int64)
    fp = np.zeros_like(tp)
    fn = np.zeros_like(tp)
    per_p, per_r = [], []
    for prob, gold, fov in zip(probmaps, golds, fovs):
        a, b, c = image_counts(prob, gold, thresholds, fov, use_fov)
        tp += a
        fp += b
        fn += c
        if average == "image":
            p, r, _ = precision_recall_f(a, b, c)
            per_p.append(p)
            per_r.append(r)
    if average == "image" and per_p:
        return PRCurve(thresholds, tp, fp, fn, np.mean(per_p, axis=0), np.mean(per_r, axis=0))
    return PRCurve(thresholds, tp, fp, fn)


def dice(mask_a, mask_b):
    """2|A & B| / (|A| + |B|); 1.0 when both are empty."""
    a, b = np.asarray(mask_a).astype(bool), np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def ods(curve):
    """Threshold with the best pooled F; ties resolve to the lowest threshold."""
    t = np.asarray(curve.thresholds)
    if t.size == 0:
        raise EmptyDatasetError("empty PR curve")
    order = np.argsort(t, kind="stable")
    f = np.asarray(curve.f)[order]
    best = int(np.argmax(f))     # first maximum in ascending-threshold order
    return float(t[order][best]), float(f[best])


@dataclass
class HumanPoints:
    points: list           # (image_id, precision, recall, f)
    pooled: tuple          # (precision, recall, f) from summed counts
    skipped: list


def human_points(seconds, golds, fovs=None, ids=None, use_fov=True):
    """Score each second annotation against the gold standard, one point per image."""
    golds = list(golds)
    seconds = list(seconds)
    if len(seconds) != len(golds):
        raise ShapeError("second-annotator and gold lists differ in length")
    fovs = [None] * len(golds) if fovs is None else list(fovs)
    ids = [str(i) for i in range(len(golds))] if ids is None else list(ids)
    points, skipped = [], []
    totals = np.zeros(3, dtype=np.int64)
    for sid, second, gold, fov in zip(ids, seconds, golds, fovs):
        if second is None:
            log.warning("no second annotation for %s; skipped", sid)
            skipped.append(sid)
            continue
        second, gold = _squeeze(second).astype(bool), _squeeze(gold).astype(bool)
        if second.shape != gold.shape:
            raise ShapeError(f"{sid}: second annotation {second.shape} vs gold {gold.shape}")
        valid = _valid_region(gold, None if fov is None else _squeeze(fov), use_fov)
        tp = int((second & gold & valid).sum())
        fp = int((second & ~gold & valid).sum())
        fn = int((~second & gold & valid).sum())
        totals += (tp, fp, fn)
        points.append((sid, *precision_recall_f(tp, fp, fn)))
    return HumanPoints(points, precision_recall_f(*totals), skipped)


def boundary_extract(mask):
    """Foreground pixels with a 4-neighbour that is background or off-image."""
    m = _squeeze(mask).astype(bool)
    padded = np.pad(m, 1)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def _directed_mean(src_boundary, dst_boundary):
    # exact Euclidean distance to the nearest dst-boundary pixel
    dist = ndimage.distance_transform_edt(~dst_boundary)
    return float(dist[src_boundary].mean())


def boundary_error(pred_mask, gold_mask):
    """Symmetric mean boundary distance in pixels."""
    pb, gb = boundary_extract(pred_mask), boundary_extract(gold_mask)
    if pb.shape != gb.shape:
        raise ShapeError(f"mask shapes differ: {pb.shape} vs {gb.shape}")
    if not pb.any() or not gb.any():
        raise UndefinedBoundaryError("boundary error is undefined for an empty mask")
    return (_directed_mean(pb, gb) + _directed_mean(gb, pb)) / 2.0


@dataclass
class BoundaryStats:
    per_image: list        # (image_id, distance)
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    undefined: list = field(default_factory=list)

    @property
    def five_numbers(self):
        return (self.minimum, self.q1, self.median, self.q3, self.maximum)


def quartiles(values):
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise EmptyDatasetError("quartiles of an empty list")
    return tuple(float(q) for q in np.percentile(v, [0, 25, 50, 75, 100], method="linear"))


def boundary_stats(pred_masks, gold_masks, ids):
    per_image, undefined = [], []
    for sid, pred, gold in zip(ids, pred_masks, gold_masks):
        try:
            per_image.append((sid, boundary_error(pred, gold)))
        except UndefinedBoundaryError:
            undefined.append(sid)
    if not per_image:
        raise EmptyDatasetError(f"boundary error undefined for all {len(undefined)} images")
    return BoundaryStats(per_image, *quartiles(d for _, d in per_image), undefined=undefined)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _write_csv(path, header, rows):
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_pr_csv(path, curve):
    _write_csv(path, ["threshold", "tp", "fp", "fn", "precision", "recall", "f"],
               ([f"{t:.8g}", tp, fp, fn, f"{p:.10g}", f"{r:.10g}", f"{f:.10g}"]
                for t, tp, fp, fn, p, r, f in curve.rows()))


def write_human_csv(path, points):
    _write_csv(path, ["image_id", "precision", "recall", "f"],
               ([sid, f"{p:.10g}", f"{r:.10g}", f"{f:.10g}"] for sid, p, r, f in points.points))


def write_boundary_csv(path, stats):
    _write_csv(path, ["image_id", "mean_boundary_error_px"],
               ([sid, f"{d:.10g}"] for sid, d in stats.per_image))


def summary_text(curve, stats=None, humans=None):
    t, f = ods(curve)
    lines = [f"ods_threshold = {t:.8g}", f"ods_f = {f:.6f}"]
    if humans is not None and humans.points:
        p, r, hf = humans.pooled
        lines.append(f"human_pooled = P {p:.6f} R {r:.6f} F {hf:.6f} ({len(humans.points)} images)")
        if humans.skipped:
            lines.append(f"human_skipped = {', '.join(humans.skipped)}")
    if stats is not None:
        q = stats.five_numbers
        lines.append("boundary_quartiles = min {:.4f} q1 {:.4f} median {:.4f} q3 {:.4f} max {:.4f}".format(*q))
        if stats.undefined:
            lines.append(f"boundary_undefined = {len(stats.undefined)} ({', '.join(stats.undefined)})")
    return "\n".join(lines) + "\n"
