"""Training loss and per-image evaluation metrics.

Loss functions take ``torch`` tensors so they can be differentiated; the
mask metrics take anything ``np.asarray`` accepts. Probability maps hold
the lumen-channel probability per pixel.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .errors import DimensionError, UndefinedDistanceError

DICE_EPS = 1e-6
PROB_CLAMP = 1e-7
LOSS_LAMBDA = 0.05


def _same_shape(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _per_image(x: torch.Tensor) -> torch.Tensor:
    """View as (images, pixels); a 2-D map is a single image."""
    return x.reshape(1, -1) if x.dim() <= 2 else x.reshape(x.shape[0], -1)


def soft_dice(p, y, eps: float = DICE_EPS) -> torch.Tensor:
    """``(2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)``, averaged over a batch."""
    p = _as_tensor(p)
    y = _as_tensor(y, p).to(p.dtype)
    _same_shape(p, y)
    p, y = _per_image(p), _per_image(y)
    dice = (2.0 * (p * y).sum(dim=1) + eps) / (p.sum(dim=1) + y.sum(dim=1) + eps)
    return dice.mean()


def bce(p, y, clamp: float = PROB_CLAMP) -> torch.Tensor:
    """Mean pixel binary cross entropy with ``p`` clamped to ``[clamp, 1 - clamp]``."""
    p = _as_tensor(p)
    y = _as_tensor(y, p).to(p.dtype)
    _same_shape(p, y)
    pc = p.clamp(clamp, 1.0 - clamp)
    per_pixel = -(y * torch.log(pc) + (1.0 - y) * torch.log(1.0 - pc))
    return _per_image(per_pixel).mean(dim=1).mean()


def combined_loss(p, y, lam: float = LOSS_LAMBDA) -> torch.Tensor:
    """``bce(p, y) + lam * (1 - soft_dice(p, y))``.

    The Dice term enters as ``1 - SDS`` so that better overlap lowers the
    loss.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    loss = bce(p, y)
    if lam:
        loss = loss + lam * (1.0 - soft_dice(p, y))
    return loss


def sensitivity_specificity(pred, truth) -> tuple[float, float]:
    """Pixel sensitivity and specificity; a metric with no truth pixels of its class is 1.0."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    _same_shape(pred, truth)
    tp = int(np.count_nonzero(pred & truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(np.count_nonzero(~pred & ~truth))
    fp = int(np.count_nonzero(pred & ~truth))
    sens = tp / (tp + fn) if tp + fn else 1.0
    spec = tn / (tn + fp) if tn + fp else 1.0
    return sens, spec


def boundary(mask) -> np.ndarray:
    """Mask pixels with a background 4-neighbour or touching the image border."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def hausdorff(pred, truth) -> float:
    """Symmetric Hausdorff distance in pixels between the two boundary sets."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    _same_shape(pred, truth)
    a = np.argwhere(boundary(pred)).astype(np.float64)
    b = np.argwhere(boundary(truth)).astype(np.float64)
    if len(a) == 0 or len(b) == 0:
        raise UndefinedDistanceError("Hausdorff distance is undefined for an empty mask")
    d_ab = cKDTree(b).query(a)[0].max()
    d_ba = cKDTree(a).query(b)[0].max()
    return float(max(d_ab, d_ba))


def lumen_area(mask, pixel_spacing_um: float) -> tuple[int, float]:
    if not pixel_spacing_um > 0:
        raise ValueError(f"pixel spacing must be positive, got {pixel_spacing_um}")
    px = int(np.count_nonzero(np.asarray(mask)))
    return px, px * (pixel_spacing_um / 1000.0) ** 2


@dataclass
class MetricsRecord:
    pullback_id: str
    frame_index: int
    sds: float
    sensitivity: float
    specificity: float
    hausdorff_px: float   # NaN when either mask is empty
    area_px: int
    area_mm2: float


METRIC_FIELDS = ("sds", "sensitivity", "specificity", "hausdorff_px", "area_px", "area_mm2")


def score_mask(pred, truth, pixel_spacing_um: float, pullback_id: str = "",
               frame_index: int = 0) -> MetricsRecord:
    """All per-image metrics of a binary prediction against its ground truth."""
    pred = np.asarray(pred).astype(np.uint8)
    truth = np.asarray(truth).astype(np.uint8)
    sds = float(soft_dice(pred.astype(np.float64), truth.astype(np.float64)))
    sens, spec = sensitivity_specificity(pred, truth)
    try:
        hd = hausdorff(pred, truth)
    except UndefinedDistanceError:
        hd = math.nan
    area_px, area_mm2 = lumen_area(pred, pixel_spacing_um)
    return MetricsRecord(pullback_id, int(frame_index), sds, sens, spec, hd, area_px, area_mm2)


@dataclass
class MetricSummary:
    mean: float
    std: float
    median: float
    min: float
    max: float
    count: int


def summarize(records: list[MetricsRecord]) -> dict[str, MetricSummary]:
    """Mean, std, median, min and max of every metric; NaN entries are skipped."""
    out = {}
    for name in METRIC_FIELDS:
        values = np.array([getattr(r, name) for r in records], dtype=np.float64)
        values = values[~np.isnan(values)]
        if len(values) == 0:
            out[name] = MetricSummary(*(math.nan,) * 5, 0)
            continue
        out[name] = MetricSummary(float(values.mean()), float(values.std()), float(np.median(values)),
                                  float(values.min()), float(values.max()), len(values))
    return out


def format_summary(summary: dict[str, MetricSummary], title: str = "") -> str:
    """Table-style block: ``metric  mean +- std  median  min - max``."""
    lines = [title] if title else []
    lines.append(f"{'metric':<14}{'mean +- std':>24}{'median':>12}{'min - max':>26}")
    for name, s in summary.items():
        lines.append(f"{name:<14}{s.mean:>12.4f} +- {s.std:<8.4f}{s.median:>12.4f}"
                     f"{s.min:>12.4f} - {s.max:<12.4f}")
    return "\n".join(lines)


def record_row(record: MetricsRecord) -> dict:
    return asdict(record)
