"""Evaluation metric (Matthews correlation) and the model-based NDVI baseline."""

import math
from dataclasses import dataclass

import numpy as np

from . import ops, serial
from .errors import SelectionError, ValidationError
from .tensor import Tensor

NDVI_EPS = 1e-8


@dataclass
class ConfusionCounts:
    """Pixel-level confusion counts; additive over disjoint pixel sets."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValidationError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _as_binary(arr, what):
    a = np.asarray(arr)
    if not np.all((a == 0) | (a == 1)):
        raise ValidationError(f"{what} must contain only 0 and 1")
    return a != 0


def confusion(pred, gt) -> ConfusionCounts:
    """Exact pixel counts of prediction vs. ground truth (both binary maps)."""
    p = _as_binary(pred, "prediction")
    g = _as_binary(gt, "ground truth")
    if p.shape != g.shape:
        raise ValidationError(f"shape mismatch: prediction {p.shape} vs ground truth {g.shape}")
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        tn=int(np.count_nonzero(~p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
    )


def mcc(c: ConfusionCounts) -> float:
    """Matthews correlation coefficient.

    (tp*tn - fp*fn) / sqrt((tp+fp)(tp+fn)(tn+fp)(tn+fn)), computed exactly in
    integer arithmetic and rounded once at the final division. If any factor
    of the denominator is zero the result is 0 by convention. Counts too
    large for float64 fall back to a log-domain evaluation.
    """
    tp, fp, tn, fn = int(c.tp), int(c.fp), int(c.tn), int(c.fn)
    num = tp * tn - fp * fn
    factors = (tp + fp, tp + fn, tn + fp, tn + fn)
    if any(f == 0 for f in factors):
        return 0.0
    prod = factors[0] * factors[1] * factors[2] * factors[3]
    try:
        return float(num) / math.sqrt(float(prod))
    except OverflowError:
        log_den = 0.5 * sum(math.log(f) for f in factors)
        if num == 0:
            return 0.0
        sign = 1.0 if num > 0 else -1.0
        return sign * math.exp(math.log(abs(num)) - log_den)


def ndvi(frame: np.ndarray, band_roles) -> np.ndarray:
    """(nir - red) / (nir + red + eps) for one [C,H,W] frame, clamped to [-1,1]."""
    roles = list(band_roles)
    if roles.count("nir") != 1 or roles.count("red") != 1:
        raise ValidationError(f"need exactly one nir and one red band, got roles {roles}")
    nir = np.asarray(frame[roles.index("nir")], dtype=np.float64)
    red = np.asarray(frame[roles.index("red")], dtype=np.float64)
    return np.clip((nir - red) / (nir + red + NDVI_EPS), -1.0, 1.0)


def mean_ndvi_upsampled(sample) -> np.ndarray:
    """Temporal mean of per-frame NDVI, bicubically upsampled to label size."""
    if sample.frames < 1:
        raise SelectionError("baseline needs at least one frame")
    acc = np.zeros(sample.lr_stack.shape[2:], dtype=np.float64)
    for t in range(sample.frames):
        acc += ndvi(sample.lr_stack[t], sample.band_roles)
    acc /= sample.frames
    up = ops.bicubic_resample(Tensor(acc[None, None], dtype=np.float64), sample.upscale)
    return up.data[0, 0]


def ndvi_baseline(sample, threshold: float) -> np.ndarray:
    """Model-based segmentation: temporally averaged NDVI, bicubic x upscale,
    thresholded (>= threshold -> positive). Frames are assumed pre-filtered."""
    if not (-1.0 < threshold < 1.0):
        raise ValidationError(f"NDVI threshold must be in (-1,1), got {threshold}")
    return (mean_ndvi_upsampled(sample) >= threshold).astype(np.uint8)


def threshold_sweep(samples, grid):
    """Evaluate the baseline on every sample at every threshold.

    Returns (best_threshold, mcc_per_threshold) where the score of a
    threshold is the unweighted mean of per-sample MCCs; ties prefer the
    lowest threshold.
    """
    samples = list(samples)
    grid = [float(g) for g in grid]
    if not samples:
        raise ValidationError("threshold_sweep needs at least one sample")
    if not grid:
        raise ValidationError("threshold_sweep needs a non-empty grid")
    for g in grid:
        if not (-1.0 < g < 1.0):
            raise ValidationError(f"grid values must be in (-1,1), got {g}")
    fields = [mean_ndvi_upsampled(s) for s in samples]
    scores = []
    for thr in grid:
        per = [mcc(confusion((f >= thr).astype(np.uint8), s.label)) for f, s in zip(fields, samples)]
        scores.append(float(np.mean(per)))
    best_i = 0
    for i in range(1, len(grid)):
        if scores[i] > scores[best_i]:
            best_i = i
    return grid[best_i], scores


DEFAULT_SWEEP_GRID = [round(-0.5 + 0.05 * i, 2) for i in range(29)]  # -0.5 .. 0.9


# -- report ----------------------------------------------------------------------------


REPORT_TITLE = "Cultivated land detection - MCC"


def format_report(scene_names, methods, title=REPORT_TITLE) -> str:
    """Fixed-layout text table: one row per scene, one column per method,
    closing with the unweighted 'Avg. MCC' row."""
    methods = list(methods)
    for name, values in methods:
        if len(values) != len(scene_names):
            raise ValidationError(f"method {name!r} has {len(values)} values for {len(scene_names)} scenes")
    label_w = max([len(s) for s in scene_names] + [len("Avg. MCC")]) + 2
    col_ws = [max(len(name), 8) + 2 for name, _ in methods]
    lines = [title, ""]
    header = "scene".ljust(label_w) + "".join(name.rjust(w) for (name, _), w in zip(methods, col_ws))
    lines.append(header)
    for i, scene in enumerate(scene_names):
        row = scene.ljust(label_w)
        row += "".join(f"{values[i]:.3f}".rjust(w) for (_, values), w in zip(methods, col_ws))
        lines.append(row)
    avg_row = "Avg. MCC".ljust(label_w)
    avg_row += "".join(
        f"{float(np.mean(values)):.3f}".rjust(w) if values else "n/a".rjust(w)
        for (_, values), w in zip(methods, col_ws)
    )
    lines.append(avg_row)
    return "\n".join(lines) + "\n"


def report_json(scene_names, methods, title=REPORT_TITLE) -> str:
    """The same report as canonical JSON."""
    payload = {
        "title": title,
        "scenes": list(scene_names),
        "methods": {
            name: {"per_scene": [float(v) for v in values], "avg_mcc": float(np.mean(values)) if values else None}
            for name, values in methods
        },
    }
    return serial.canonical_json(payload)
