"""Tracking quality metrics: overlap, intensity fidelity and field regularity."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial.distance import directed_hausdorff
from skimage.metrics import structural_similarity

from .tensor_engine import ShapeError
from .warp import JacobianStats, jacobian_stats, sample

INF_PSNR = math.inf


def _np(x) -> np.ndarray:
    if torch.is_tensor(x):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def dice(a, b, label: int) -> float:
    a, b = _np(a), _np(b)
    _same_shape(a, b, "dice")
    A, B = a == label, b == label
    denom = A.sum() + B.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(A, B).sum() / denom)


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _np(a).astype(np.float64), _np(b).astype(np.float64)
    _same_shape(a, b, "psnr")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return INF_PSNR
    return float(10.0 * np.log10(peak**2 / mse))


def ssim(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> float:
    """Mean local SSIM with a Gaussian window (sigma 1.5) and the usual constants."""
    a, b = _np(a).astype(np.float64), _np(b).astype(np.float64)
    _same_shape(a, b, "ssim")
    if min(a.shape) < window:
        raise ShapeError(f"ssim needs every extent >= {window}, got {a.shape}")
    # truncate chosen so the Gaussian support is exactly `window` wide
    truncate = ((window - 1) / 2 - 0.5) / 1.5
    return float(
        structural_similarity(
            a,
            b,
            data_range=peak,
            gaussian_weights=True,
            sigma=1.5,
            truncate=truncate,
            use_sample_covariance=False,
            K1=k1,
            K2=k2,
        )
    )


def _boundary(mask: np.ndarray) -> np.ndarray:
    inner = ndimage.binary_erosion(mask, border_value=0)
    return np.argwhere(mask & ~inner)


def hausdorff(a, b, label: int) -> float:
    """Symmetric Hausdorff distance between label boundaries, in grid cells."""
    a, b = _np(a), _np(b)
    _same_shape(a, b, "hausdorff")
    A, B = a == label, b == label
    if not A.any() or not B.any():
        raise ValueError(f"label {label} is empty in at least one mask")
    pa, pb = _boundary(A), _boundary(B)
    return float(max(directed_hausdorff(pa, pb)[0], directed_hausdorff(pb, pa)[0]))


@dataclass
class MetricReport:
    dice: dict[int, float]
    hausdorff: dict[int, float]
    psnr: float
    ssim: float
    jacobian: JacobianStats
    frames: list[dict] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values()))) if self.dice else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_dice"] = self.mean_dice
        return d


def frame_metrics(pred_img, gt_img, pred_mask, gt_mask, labels) -> dict:
    rec = {"psnr": psnr(pred_img, gt_img), "ssim": ssim(pred_img, gt_img), "dice": {}, "hausdorff": {}}
    for lab in labels:
        rec["dice"][lab] = dice(pred_mask, gt_mask, lab)
        try:
            rec["hausdorff"][lab] = hausdorff(pred_mask, gt_mask, lab)
        except ValueError:
            rec["hausdorff"][lab] = float("nan")
    return rec


def evaluate_tracking(seq, fields, indices=None, labels=None) -> MetricReport:
    """Warp frame 0 (linear) and its mask (nearest) by each Lagrangian field.

    ``fields[t]`` maps frame t back to frame 0. Metrics are averaged over
    ``indices`` (default: every frame after the first); indices without
    ground truth are listed in ``skipped``.
    """
    frames = seq.frames
    masks = seq.masks
    if masks is None or masks[0] is None:
        raise ValueError("tracking evaluation needs the first-frame mask")
    T = len(frames)
    indices = list(range(1, T)) if indices is None else list(indices)
    if labels is None:
        labels = sorted(int(v) for v in np.unique(_np(masks[0])) if v != 0)
    recs, skipped, jac = [], [], []
    for t in indices:
        if t >= len(fields) or t >= T or masks[t] is None:
            skipped.append(t)
            continue
        u = torch.as_tensor(fields[t], dtype=torch.float32)
        img = sample(torch.as_tensor(frames[0], dtype=torch.float32), u)
        msk = sample(torch.as_tensor(masks[0], dtype=torch.float32), u, mode="nearest")
        rec = frame_metrics(img, frames[t], msk, masks[t], labels)
        rec["t"] = t
        recs.append(rec)
        jac.append(jacobian_stats(u))
    if not recs:
        raise ValueError("no frame had ground truth to evaluate against")

    def avg(vals):
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    return MetricReport(
        dice={lab: avg([r["dice"][lab] for r in recs]) for lab in labels},
        hausdorff={lab: avg([r["hausdorff"][lab] for r in recs]) for lab in labels},
        psnr=avg([r["psnr"] for r in recs]),
        ssim=avg([r["ssim"] for r in recs]),
        jacobian=JacobianStats(
            frac_nonpos=avg([j.frac_nonpos for j in jac]),
            mean_abs_dev=avg([j.mean_abs_dev for j in jac]),
        ),
        frames=recs,
        skipped=skipped,
    )
