"""Sampling, composition and scaling-and-squaring of dense displacement fields.

Fields are stored component-first, ``[rank, *spatial]``, in grid-cell units;
component ``i`` displaces along spatial axis ``i``. A displacement ``u``
represents the map ``phi(x) = x + u(x)`` and warping pulls values back:
``sample(img, u)(x) = img(x + u(x))``. Under this convention
``phi_{a:c} = compose(phi_{a:b}, phi_{b:c})`` when ``phi_{a:b}`` carries
frame-``b`` coordinates into frame ``a``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .tensor_engine import ShapeError, read_ndt, write_ndt


@dataclass(frozen=True)
class JacobianStats:
    frac_nonpos: float
    mean_abs_dev: float


def identity_grid(spatial: tuple[int, ...], dtype=torch.float32) -> torch.Tensor:
    axes = [torch.arange(n, dtype=dtype) for n in spatial]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def _check_field(image: torch.Tensor, u: torch.Tensor) -> tuple[int, ...]:
    rank = u.shape[0]
    if u.ndim != rank + 1 or rank not in (2, 3):
        raise ShapeError(f"field must be [rank, *spatial] with rank 2 or 3, got {tuple(u.shape)}")
    spatial = tuple(u.shape[1:])
    if tuple(image.shape[-rank:]) != spatial:
        raise ShapeError(
            f"image grid {tuple(image.shape[-rank:])} does not match field grid {spatial}"
        )
    if min(spatial) < 2:
        raise ShapeError(f"grid {spatial} needs at least 2 cells per axis")
    return spatial


def _sample_batched(img: torch.Tensor, u: torch.Tensor, mode: str) -> torch.Tensor:
    """``img[B, C, *spatial]`` at ``x + u[B, rank, *spatial]``; coordinates clamped."""
    B, rank = u.shape[:2]
    spatial = tuple(u.shape[2:])
    C = img.shape[1]
    flat = img.reshape(B, C, math.prod(spatial))
    coords = identity_grid(spatial, u.dtype)[None] + u
    strides = [math.prod(spatial[i + 1 :]) for i in range(rank)]

    if mode == "nearest":
        lin = 0
        for i in range(rank):
            idx = torch.clamp(torch.round(torch.nan_to_num(coords[:, i])), 0, spatial[i] - 1).long()
            lin = lin + idx * strides[i]
        lin = lin.reshape(B, 1, -1).expand(B, C, -1)
        return torch.gather(flat, 2, lin).reshape(B, C, *spatial)
    if mode != "linear":
        raise ValueError(f"unknown sampling mode {mode!r}")

    base = 0
    frac = []
    for i in range(rank):
        c = torch.clamp(coords[:, i], 0, spatial[i] - 1)
        # keep the lower corner <= n-2 so its upper neighbour exists; frac reaches 1 at the edge
        lo = torch.clamp(torch.floor(torch.nan_to_num(c.detach())), max=spatial[i] - 2)
        frac.append((c - lo).reshape(B, 1, -1))
        base = base + lo.long() * strides[i]
    base = base.reshape(B, 1, -1).expand(B, C, -1)

    out = 0
    for corner in range(2**rank):
        offset = 0
        weight = 1
        for i in range(rank):
            bit = (corner >> i) & 1
            offset += bit * strides[i]
            weight = weight * (frac[i] if bit else 1 - frac[i])
        out = out + torch.gather(flat, 2, base + offset) * weight
    return out.reshape(B, C, *spatial)


def sample(image: torch.Tensor, u: torch.Tensor, mode: str = "linear") -> torch.Tensor:
    """Evaluate ``image`` at ``x + u(x)``, clamping coordinates to the grid.

    ``image`` is ``[*lead, *spatial]``; leading axes are sampled alike.
    ``mode`` is ``"linear"`` (bi/trilinear) or ``"nearest"``.
    """
    spatial = _check_field(image, u)
    lead = image.shape[: image.ndim - len(spatial)]
    out = _sample_batched(image.reshape(1, -1, *spatial), u[None], mode)
    return out.reshape(*lead, *spatial)


def sample_batch(image: torch.Tensor, u: torch.Tensor, mode: str = "linear") -> torch.Tensor:
    """Batched :func:`sample`: ``image[B, *lead, *spatial]``, ``u[B, rank, *spatial]``."""
    if image.shape[0] != u.shape[0]:
        raise ShapeError(f"batch sizes differ: {image.shape[0]} vs {u.shape[0]}")
    spatial = _check_field(image[0], u[0])
    lead = image.shape[1 : image.ndim - len(spatial)]
    B = u.shape[0]
    out = _sample_batched(image.reshape(B, -1, *spatial), u, mode)
    return out.reshape(B, *lead, *spatial)


def compose(f: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Displacement of ``x -> phi_f(phi_g(x))``."""
    if f.shape != g.shape:
        raise ShapeError(f"compose: field shapes {tuple(f.shape)} and {tuple(g.shape)} differ")
    return g + sample(f, g)


def compose_batch(f: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    if f.shape != g.shape:
        raise ShapeError(f"compose: field shapes {tuple(f.shape)} and {tuple(g.shape)} differ")
    return g + sample_batch(f, g)


def integrate_velocity(v: torch.Tensor, steps: int = 7) -> torch.Tensor:
    """Flow of a stationary velocity field at unit time by scaling and squaring."""
    return integrate_velocity_batch(v[None], steps)[0]


def integrate_velocity_batch(v: torch.Tensor, steps: int = 7) -> torch.Tensor:
    """:func:`integrate_velocity` over a stack ``v[B, rank, *spatial]``."""
    if steps < 1:
        raise ValueError("scaling and squaring needs at least one squaring step")
    u = v / (2**steps)
    for _ in range(steps):
        u = compose_batch(u, u)
    return u


def jacobian_determinant(u: torch.Tensor) -> torch.Tensor:
    """det(I + grad u) per cell; central differences inside, one-sided at borders."""
    rank = u.shape[0]
    spatial = tuple(u.shape[1:])
    if min(spatial) < 3:
        raise ShapeError(f"jacobian needs at least 3 cells per axis, got {spatial}")
    rows = []
    for i in range(rank):
        grads = torch.gradient(u[i], dim=tuple(range(rank)))
        rows.append([grads[j] + (1.0 if i == j else 0.0) for j in range(rank)])
    if rank == 2:
        return rows[0][0] * rows[1][1] - rows[0][1] * rows[1][0]
    (a, b, c), (d, e, f), (g, h, k) = rows
    return a * (e * k - f * h) - b * (d * k - f * g) + c * (d * h - e * g)


def interior(x: torch.Tensor, rank: int, margin: int = 1) -> torch.Tensor:
    sl = (Ellipsis,) + (slice(margin, -margin),) * rank
    return x[sl]


def jacobian_stats(u: torch.Tensor, interior_only: bool = True) -> JacobianStats:
    det = jacobian_determinant(u.detach())
    if interior_only:
        det = interior(det, u.shape[0])
    return JacobianStats(
        frac_nonpos=float((det <= 0).double().mean()),
        mean_abs_dev=float((det - 1).abs().double().mean()),
    )


def save_field(path: str | Path, u: torch.Tensor, kind: str, steps: int = 7) -> None:
    """Write a field as NDT1 plus a ``.json`` sidecar naming its kind."""
    if kind not in ("displacement", "velocity"):
        raise ValueError(f"unknown field kind {kind!r}")
    path = Path(path)
    write_ndt(path, u)
    path.with_suffix(".json").write_text(json.dumps({"kind": kind, "N": steps}))


def load_field(path: str | Path) -> tuple[torch.Tensor, dict]:
    path = Path(path)
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return read_ndt(path), meta
