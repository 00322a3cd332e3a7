"""Unsupervised sequence-tracking objective."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .tensor_engine import ShapeError
from .warp import sample_batch


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 0.02
    alpha2: float = 1.0
    alpha3: float = 0.02

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ValueError("loss weights must be nonnegative")


class LossError(FloatingPointError):
    def __init__(self, term: str, t: int):
        super().__init__(f"loss term {term} is not finite at step t={t}")
        self.term = term
        self.t = t


def kl_loss(pairs) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, 1)), element-averaged per direction, summed over directions."""
    total = 0
    for mu, logvar in pairs:
        if mu.shape != logvar.shape:
            raise ShapeError(f"mean {tuple(mu.shape)} and log-variance {tuple(logvar.shape)} differ")
        total = total + 0.5 * (mu**2 + torch.exp(logvar) - 1 - logvar).mean()
    return torch.as_tensor(total)


def _window_sum(x: torch.Tensor, window: int, rank: int) -> torch.Tensor:
    """Box sums over ``x[B, *spatial]`` with edge-replicating padding."""
    pad = F.pad(x[:, None], (window // 2,) * (2 * rank), mode="replicate")
    kern = torch.ones((1, 1) + (window,) * rank, dtype=x.dtype)
    conv = F.conv2d if rank == 2 else F.conv3d
    return conv(pad, kern)[:, 0]


def local_cc2(a: torch.Tensor, b: torch.Tensor, window: int = 9, eps: float = 1e-5) -> torch.Tensor:
    """Squared local correlation map for image stacks ``[B, *spatial]``."""
    rank = a.ndim - 1
    n = window**rank
    sa, sb = _window_sum(a, window, rank), _window_sum(b, window, rank)
    saa = _window_sum(a * a, window, rank)
    sbb = _window_sum(b * b, window, rank)
    sab = _window_sum(a * b, window, rank)
    cross = sab - sa * sb / n
    var_a = torch.clamp(saa - sa * sa / n, min=0)
    var_b = torch.clamp(sbb - sb * sb / n, min=0)
    return cross * cross / (var_a * var_b + eps)


def ncc_loss(a: torch.Tensor, b: torch.Tensor, window: int = 9, eps: float = 1e-5) -> torch.Tensor:
    """Negative mean squared local correlation over a sliding window, in [-1, 0]."""
    if a.shape != b.shape:
        raise ShapeError(f"ncc: image shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    if window % 2 == 0:
        raise ValueError(f"ncc window must be odd, got {window}")
    if a.ndim not in (2, 3):
        raise ShapeError("ncc expects 2-D or 3-D images")
    return -local_cc2(a[None], b[None], window, eps).mean()


def smoothness_loss(u: torch.Tensor) -> torch.Tensor:
    """Mean squared forward difference over every component and axis."""
    rank = u.ndim - 1
    if rank < 1 or min(u.shape[1:]) < 2:
        raise ShapeError(f"smoothness needs at least 2 cells per axis, got {tuple(u.shape)}")
    total = 0
    count = 0
    for ax in range(1, rank + 1):
        d = torch.diff(u, dim=ax)
        total = total + (d**2).sum()
        count += d.numel()
    return total / count


def loss_terms(out, frames: torch.Tensor, window: int = 9) -> list[dict]:
    """Unweighted terms a..d for every transition t -> t+1."""
    T = frames.shape[0]
    if T < 2:
        raise ShapeError("the sequence loss needs at least two frames")
    if window % 2 == 0:
        raise ValueError(f"ncc window must be odd, got {window}")
    lag = torch.stack(out.lagrangian[1:])
    warped = sample_batch(frames[0].expand(T - 1, *frames.shape[1:]), lag)
    cc = local_cc2(frames[1:], warped, window)
    terms = []
    for t in range(T - 1):
        pairs = [(out.fwd_mu[t], out.fwd_logvar[t])]
        if out.bwd_mu:
            pairs.append((out.bwd_mu[t], out.bwd_logvar[t]))
        terms.append(
            {
                "a": kl_loss(pairs),
                "b": smoothness_loss(out.steps[t]) + smoothness_loss(out.back_steps[t]),
                "c": -cc[t].mean(),
                "d": smoothness_loss(lag[t]),
            }
        )
    return terms


def total_loss(out, frames: torch.Tensor, weights: LossWeights = LossWeights(), window: int = 9):
    """Weighted sum over transitions; returns ``(total, per-term sums)``."""
    sums = {k: 0.0 for k in "abcd"}
    total = 0
    for t, tt in enumerate(loss_terms(out, frames, window)):
        for k, v in tt.items():
            if not math.isfinite(float(v.detach())):
                raise LossError(k, t)
        total = (
            total
            + tt["a"]
            + weights.alpha1 * tt["b"]
            + weights.alpha2 * tt["c"]
            + weights.alpha3 * tt["d"]
        )
        for k in "abcd":
            sums[k] += float(tt[k].detach())
    return total, sums
