"""Bidirectional recursive linear-attention encoder and velocity decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import gp
from .tensor_engine import ShapeError, layer_norm
from .warp import compose, integrate_velocity_batch


# ---------------------------------------------------------------- patches


def patchify(frame: torch.Tensor, p: int) -> torch.Tensor:
    """``[*spatial]`` -> ``[P, p**rank]``, patches in row-major grid order."""
    spatial = frame.shape
    for n in spatial:
        if n % p:
            raise ShapeError(f"patch size {p} does not divide spatial extent {n}")
    rank = len(spatial)
    grid = [n // p for n in spatial]
    x = frame.reshape(*[v for n in grid for v in (n, p)])
    # (g0, p0, g1, p1, ...) -> (g0, g1, ..., p0, p1, ...)
    x = x.permute(*range(0, 2 * rank, 2), *range(1, 2 * rank, 2))
    return x.reshape(math.prod(grid), p**rank)


def unpatchify(patches: torch.Tensor, spatial: tuple[int, ...], p: int) -> torch.Tensor:
    """Inverse of :func:`patchify`; leading axes of ``patches[..., P, p**rank]`` are kept."""
    rank = len(spatial)
    grid = [n // p for n in spatial]
    lead = patches.shape[:-2]
    x = patches.reshape(*lead, *grid, *([p] * rank))
    nl = len(lead)
    order = list(range(nl))
    for i in range(rank):
        order += [nl + i, nl + rank + i]
    return x.permute(*order).reshape(*lead, *spatial)


class PatchEmbed(nn.Module):
    def __init__(self, patch: int, dim: int, rank: int = 2):
        super().__init__()
        self.patch = patch
        self.proj = nn.Linear(patch**rank, dim)

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        return self.proj(patchify(frame, self.patch))


def temporal_encoding(T: int, dim: int, scale: float = 10000.0) -> torch.Tensor:
    """Sinusoidal table ``[T, dim]``: sin on even channels, cos on odd ones."""
    if dim % 2:
        raise ShapeError(f"temporal encoding needs an even channel count, got {dim}")
    if scale <= 1:
        raise ValueError("frequency scale must exceed 1")
    t = torch.arange(T, dtype=torch.float64)[:, None]
    k = torch.arange(dim // 2, dtype=torch.float64)[None, :]
    angle = t * scale ** (-2 * k / dim)
    out = torch.empty(T, dim, dtype=torch.float64)
    out[:, 0::2] = torch.sin(angle)
    out[:, 1::2] = torch.cos(angle)
    return out.float()


# ---------------------------------------------------------------- cell


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(dim))
        self.beta = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


def linear_attention(
    x: torch.Tensor, wq: torch.Tensor, wk: torch.Tensor, wv: torch.Tensor
) -> torch.Tensor:
    """``(elu(xWq)+1) @ ((elu(xWk)+1)^T @ xWv) / P`` for ``x[P, 2C]``.

    The key-value product is formed first so the cost is O(P C^2).
    """
    if x.ndim != 2 or x.shape[1] != wq.shape[0]:
        raise ShapeError(f"attention input {tuple(x.shape)} vs weight {tuple(wq.shape)}")
    q = F.elu(x @ wq) + 1
    k = F.elu(x @ wk) + 1
    v = x @ wv
    return q @ (k.transpose(0, 1) @ v) / x.shape[0]


class TrackCell(nn.Module):
    """One recursive cell: features of the current frame plus the next hidden state."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.norm_x = LayerNorm(dim)
        self.norm_h = LayerNorm(dim)
        self.norm_a = LayerNorm(dim)
        scale = 1.0 / math.sqrt(2 * dim)
        self.wq = nn.Parameter(torch.randn(2 * dim, dim) * scale)
        self.wk = nn.Parameter(torch.randn(2 * dim, dim) * scale)
        self.wv = nn.Parameter(torch.randn(2 * dim, dim) * scale)
        self.ffn = nn.Sequential(nn.Linear(dim, 2 * dim), nn.ELU(), nn.Linear(2 * dim, dim))

    def attention(self, x_t, h_prev, pos_t):
        xn = self.norm_x(x_t + pos_t)
        hn = self.norm_h(h_prev + pos_t)
        a = linear_attention(torch.cat([xn, hn], dim=-1), self.wq, self.wk, self.wv)
        return a, xn, hn

    def forward(self, x_t, h_prev, pos_t):
        if x_t.shape != h_prev.shape or x_t.shape[-1] != self.dim:
            raise ShapeError(
                f"cell expects [P, {self.dim}] inputs, got {tuple(x_t.shape)} and {tuple(h_prev.shape)}"
            )
        a, xn, hn = self.attention(x_t, h_prev, pos_t)
        h_next = a + hn
        f_t = self.ffn(self.norm_a(a + xn))
        return f_t, h_next


def run_cell(cell: TrackCell, xs: torch.Tensor, pos: torch.Tensor, reverse: bool = False):
    T = xs.shape[0]
    h = torch.zeros_like(xs[0])
    out = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        out[t], h = cell(xs[t], h, pos[t])
    return torch.stack(out)


class BiLayer(nn.Module):
    def __init__(self, dim: int, bidirectional: bool = True):
        super().__init__()
        self.fwd = TrackCell(dim)
        self.bwd = TrackCell(dim) if bidirectional else None

    def forward(self, xs, pos):
        """Returns fused, forward and backward features, each ``[T, P, C]``."""
        if xs.shape[0] < 2:
            raise ShapeError("bidirectional encoding needs at least two frames")
        f = run_cell(self.fwd, xs, pos)
        if self.bwd is None:
            return f, f, None
        b = run_cell(self.bwd, xs, pos, reverse=True)
        return f + b, f, b


def bidirectional_encode(layers, xs: torch.Tensor, pos: torch.Tensor):
    """Stack of bidirectional layers; each consumes the previous fused output."""
    fwd = bwd = None
    for layer in layers:
        xs, fwd, bwd = layer(xs, pos)
    return xs, fwd, bwd


# ---------------------------------------------------------------- decoder


LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


class VelocityDecoder(nn.Module):
    """Per-patch affine heads for velocity mean and log-variance, then a 3x3 smoother."""

    def __init__(self, dim: int, patch: int, rank: int = 2, logvar_init: float = -6.0):
        super().__init__()
        self.patch = patch
        self.rank = rank
        out = rank * patch**rank
        self.mean_head = nn.Linear(dim, out)
        self.logvar_head = nn.Linear(dim, out)
        for head in (self.mean_head, self.logvar_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
        nn.init.constant_(self.logvar_head.bias, logvar_init)
        box = torch.tensor([1.0, 2.0, 1.0])
        kern = box
        for _ in range(rank - 1):
            kern = kern[..., None] * box
        kern = kern / kern.sum()
        self.smooth = nn.Parameter(kern.expand(rank, 1, *kern.shape).clone())

    def _assemble(self, flat, spatial):
        B, P = flat.shape[:2]
        x = flat.reshape(B, P, self.rank, -1).transpose(1, 2)  # [B, rank, P, p**rank]
        return unpatchify(x, spatial, self.patch)

    def _smooth(self, v):
        rank = self.rank
        pad = F.pad(v, (1, 1) * rank, mode="replicate")
        conv = F.conv2d if rank == 2 else F.conv3d
        return conv(pad, self.smooth, groups=rank)

    def forward(self, z, spatial, sample: bool = False, generator=None):
        """Decode ``z[P, C]`` (or a stack ``z[B, P, C]``) to velocity fields.

        Returns ``(mu, logvar, v)`` each shaped ``[(B,) rank, *spatial]``;
        ``v`` is a reparameterized draw when ``sample`` is set, else ``mu``.
        """
        single = z.ndim == 2
        if single:
            z = z[None]
        grid = [n // self.patch for n in spatial]
        if z.ndim != 3 or z.shape[1] != math.prod(grid):
            raise ShapeError(f"latent {tuple(z.shape)} does not match patch grid {grid}")
        mu = self._smooth(self._assemble(self.mean_head(z), spatial))
        logvar = torch.clamp(self._assemble(self.logvar_head(z), spatial), LOGVAR_MIN, LOGVAR_MAX)
        if sample:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
            v = mu + torch.exp(0.5 * logvar) * eps
        else:
            v = mu
        if single:
            return mu[0], logvar[0], v[0]
        return mu, logvar, v


def decode_velocity(decoder: VelocityDecoder, z, spatial, sample=False, generator=None):
    return decoder(z, spatial, sample=sample, generator=generator)


# ---------------------------------------------------------------- full network


@dataclass
class ModelConfig:
    size: tuple[int, ...] = (64, 64)
    patch: int = 8
    dim: int = 32
    layers: int = 2
    bidirectional: bool = True
    gp: bool = True
    gp_prior: str = "half"
    gp_observe: str = "value"
    gap_mode: str = "euclidean"
    pos_scale: float = 10000.0
    squarings: int = 7


@dataclass
class SequenceOutput:
    """Velocities and integrated fields for one sequence of T frames.

    ``fwd_*[t]`` belongs to the transition t -> t+1 and ``bwd_*[t]`` to
    t+1 -> t, for t = 0..T-2. ``lagrangian[t]`` maps frame t back to frame 0.
    """

    fwd_mu: list
    fwd_logvar: list
    bwd_mu: list
    bwd_logvar: list
    steps: list
    back_steps: list
    lagrangian: list


class TrackNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rank = len(cfg.size)
        grid = [n // cfg.patch for n in cfg.size]
        for n in cfg.size:
            if n % cfg.patch:
                raise ShapeError(f"patch size {cfg.patch} does not divide spatial extent {n}")
        self.num_patches = math.prod(grid)
        self.embed = PatchEmbed(cfg.patch, cfg.dim, rank)
        self.spatial_pos = nn.Parameter(1.0 + 0.02 * torch.randn(self.num_patches, cfg.dim))
        self.layers = nn.ModuleList(BiLayer(cfg.dim, cfg.bidirectional) for _ in range(cfg.layers))
        # raw GP hyperparameters, one per channel; softplus keeps them positive
        self.gp_sigma = nn.Parameter(torch.full((cfg.dim,), _inv_softplus(1.0)))
        self.gp_ell = nn.Parameter(torch.full((cfg.dim,), _inv_softplus(1.0)))
        self.gp_noise = nn.Parameter(torch.full((cfg.dim,), _inv_softplus(0.1)))
        self.decoder = VelocityDecoder(cfg.dim, cfg.patch, rank)

    def gp_hyper(self):
        return F.softplus(self.gp_sigma), F.softplus(self.gp_ell), F.softplus(self.gp_noise)

    def positions(self, T: int) -> torch.Tensor:
        temporal = temporal_encoding(T, self.cfg.dim, self.cfg.pos_scale)
        return self.spatial_pos[None] * temporal.to(self.spatial_pos.dtype)[:, None, :]

    def latent(self, frames: torch.Tensor):
        """Encoded (and GP-gated) codes for both directions, each ``[T, P, C]``."""
        T = frames.shape[0]
        if T < 2:
            raise ShapeError("a sequence needs at least two frames")
        pos = self.positions(T)
        xs = torch.stack([self.embed(f) for f in frames])
        fused, _, bwd = bidirectional_encode(self.layers, xs, pos)
        if self.cfg.gp:
            deltas = gp.latent_deltas(pos, self.cfg.gap_mode)
            sigma, ell, noise = self.gp_hyper()
            kw = dict(prior=self.cfg.gp_prior, observe=self.cfg.gp_observe)
            z = gp.filter_latent(fused, deltas, sigma, ell, noise, **kw)
            if bwd is not None:
                zb = gp.filter_latent(bwd.flip(0), deltas.flip(0), sigma, ell, noise, **kw).flip(0)
            else:
                zb = None
        else:
            z = torch.relu(fused)
            zb = torch.relu(bwd) if bwd is not None else None
        return z, zb

    def forward(self, frames: torch.Tensor, sample: bool = False, generator=None) -> SequenceOutput:
        spatial = tuple(frames.shape[1:])
        if spatial != tuple(self.cfg.size):
            raise ShapeError(f"frames are {spatial}, model expects {tuple(self.cfg.size)}")
        z, zb = self.latent(frames)
        n = self.cfg.squarings
        # transition t -> t+1 decodes from the forward code at t and the backward code at t+1
        mu, lv, v = self.decoder(z[:-1], spatial, sample, generator)
        steps = integrate_velocity_batch(v, n)
        if zb is not None:
            mu_b, lv_b, v_b = self.decoder(zb[1:], spatial, sample, generator)
            back = integrate_velocity_batch(v_b, n)
            bwd_mu, bwd_lv = list(mu_b), list(lv_b)
        else:
            back = integrate_velocity_batch(-v, n)
            bwd_mu, bwd_lv = [], []
        steps = list(steps)
        return SequenceOutput(
            fwd_mu=list(mu),
            fwd_logvar=list(lv),
            bwd_mu=bwd_mu,
            bwd_logvar=bwd_lv,
            steps=steps,
            back_steps=list(back),
            lagrangian=accumulate(steps),
        )


def accumulate(steps: list) -> list:
    """Lagrangian fields ``[0, phi_{0:1}, phi_{0:2}, ...]`` from per-step fields."""
    lag = [torch.zeros_like(steps[0])]
    for step in steps:
        lag.append(compose(lag[-1], step))
    return lag


def _inv_softplus(y: float) -> float:
    return math.log(math.expm1(y))
