import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gpmotion.losses import (
    LossError,
    LossWeights,
    kl_loss,
    loss_terms,
    ncc_loss,
    smoothness_loss,
    total_loss,
)
from gpmotion.model import ModelConfig, SequenceOutput, TrackNet, accumulate
from gpmotion.tensor_engine import ShapeError
from gpmotion.warp import integrate_velocity, sample

F64 = torch.float64


def ncc_oracle(a: np.ndarray, b: np.ndarray, window: int, eps: float = 1e-5) -> float:
    """Per-pixel loops over an edge-replicated window."""
    r = window // 2
    pa, pb = np.pad(a, r, mode="edge"), np.pad(b, r, mode="edge")
    vals = []
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            wa = pa[i : i + window, j : j + window].ravel()
            wb = pb[i : i + window, j : j + window].ravel()
            da, db = wa - wa.mean(), wb - wb.mean()
            cross = (da * db).sum()
            vals.append(cross * cross / ((da * da).sum() * (db * db).sum() + eps))
    return -float(np.mean(vals))


def smooth_oracle(u: np.ndarray) -> float:
    total, count = 0.0, 0
    C, H, W = u.shape
    for c in range(C):
        for i in range(H):
            for j in range(W):
                if i + 1 < H:
                    total += (u[c, i + 1, j] - u[c, i, j]) ** 2
                    count += 1
                if j + 1 < W:
                    total += (u[c, i, j + 1] - u[c, i, j]) ** 2
                    count += 1
    return total / count


def test_kl_examples():
    z = torch.zeros(2, 3, 3)
    assert kl_loss([(z, z)]).item() == 0.0
    assert kl_loss([(torch.ones(1), torch.zeros(1))]).item() == pytest.approx(0.5)
    assert kl_loss([(torch.ones(1), torch.zeros(1)), (torch.ones(1), torch.zeros(1))]).item() == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        kl_loss([(torch.zeros(2), torch.zeros(3))])


def test_kl_matches_monte_carlo():
    g = torch.Generator().manual_seed(0)
    mu = torch.randn(6, generator=g, dtype=F64) * 0.7
    lv = torch.randn(6, generator=g, dtype=F64) * 0.5
    n = 100_000
    std = torch.exp(0.5 * lv)
    x = mu + std * torch.randn(n, 6, generator=g, dtype=F64)
    # log q(x) - log p(x), averaged over elements
    log_ratio = (-0.5 * ((x - mu) / std) ** 2 - torch.log(std) + 0.5 * x**2).mean(1)
    est, se = log_ratio.mean().item(), log_ratio.std().item() / math.sqrt(n)
    assert abs(kl_loss([(mu, lv)]).item() - est) < 3 * se


def test_ncc_examples(gen):
    a = torch.rand(32, 32, generator=gen, dtype=F64)
    assert ncc_loss(a, a).item() == pytest.approx(-1.0, abs=1e-5)
    assert ncc_loss(a, 2 * a + 3).item() == pytest.approx(-1.0, abs=1e-5)
    with pytest.raises(ValueError):
        ncc_loss(a, a, window=8)
    with pytest.raises(ShapeError):
        ncc_loss(a, a[:-1])


def test_ncc_matches_loop_oracle(rng):
    a, b = rng.random((12, 12)), rng.random((12, 12))
    b = 0.5 * a + b
    assert ncc_loss(torch.tensor(a), torch.tensor(b), 5).item() == pytest.approx(ncc_oracle(a, b, 5), abs=1e-10)


def test_ncc_independent_noise_range():
    g = torch.Generator().manual_seed(5)
    vals = [ncc_loss(torch.rand(64, 64, generator=g), torch.rand(64, 64, generator=g)).item() for _ in range(20)]
    assert all(-0.35 < v < 0 for v in vals)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([3, 5, 9]))
def test_ncc_range(seed, window):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.rand(16, 16, generator=g), torch.rand(16, 16, generator=g)
    v = ncc_loss(a, b, window).item()
    assert -1 - 1e-6 <= v <= 0


def test_smoothness_examples(rng):
    assert smoothness_loss(torch.full((2, 5, 5), 3.0)).item() == 0.0
    u = np.zeros((2, 6, 7))
    u[0] = np.arange(6)[:, None]
    assert smoothness_loss(torch.tensor(u)).item() == pytest.approx(smooth_oracle(u))
    r = rng.normal(size=(2, 6, 7))
    assert smoothness_loss(torch.tensor(r)).item() == pytest.approx(smooth_oracle(r))
    with pytest.raises(ShapeError):
        smoothness_loss(torch.zeros(2, 1, 5))


@settings(max_examples=25, deadline=None)
@given(st.floats(-10, 10), st.integers(0, 1000))
def test_smoothness_homogeneity(c, seed):
    u = torch.randn(2, 6, 6, generator=torch.Generator().manual_seed(seed), dtype=F64)
    base = smoothness_loss(u).item()
    assert smoothness_loss(c * u).item() == pytest.approx(c * c * base, rel=1e-9, abs=1e-12)
    assert base >= 0


def _manual_output(mus, lvs, bwd=True):
    steps = [integrate_velocity(m) for m in mus]
    back = [integrate_velocity(-m) for m in mus]
    return SequenceOutput(
        fwd_mu=list(mus),
        fwd_logvar=list(lvs),
        bwd_mu=list(mus) if bwd else [],
        bwd_logvar=list(lvs) if bwd else [],
        steps=steps,
        back_steps=back,
        lagrangian=accumulate(steps),
    )


def test_identical_frames_trivial_fields(gen):
    T = 4
    x = torch.rand(16, 16, generator=gen, dtype=F64)
    frames = x.expand(T, 16, 16)
    z = torch.zeros(2, 16, 16, dtype=F64)
    out = _manual_output([z] * (T - 1), [z] * (T - 1))
    w = LossWeights(0.3, 2.0, 0.7)
    total, sums = total_loss(out, frames, w)
    assert total.item() == pytest.approx(-2.0 * (T - 1), abs=1e-4)
    assert sums["a"] == 0 and sums["b"] == 0 and sums["d"] == 0


def test_zero_weights_leave_kl(gen):
    frames = torch.rand(3, 16, 16, generator=gen, dtype=F64)
    mus = [0.3 * torch.randn(2, 16, 16, generator=gen, dtype=F64) for _ in range(2)]
    lvs = [0.2 * torch.randn(2, 16, 16, generator=gen, dtype=F64) for _ in range(2)]
    out = _manual_output(mus, lvs)
    total, _ = total_loss(out, frames, LossWeights(0, 0, 0))
    kl = sum(kl_loss([(m, l), (m, l)]) for m, l in zip(mus, lvs))
    assert total.item() == pytest.approx(kl.item(), rel=1e-12)


def test_total_matches_term_by_term_oracle(gen):
    torch.manual_seed(0)
    net = TrackNet(ModelConfig(size=(16, 16), patch=8, dim=8, layers=1)).double()
    with torch.no_grad():
        net.decoder.mean_head.weight.normal_(0, 0.1, generator=gen)
    frames = torch.rand(3, 16, 16, generator=gen, dtype=F64)
    out = net(frames)
    w = LossWeights(0.02, 1.0, 0.02)
    total, _ = total_loss(out, frames, w)
    ref = 0.0
    for t in range(2):
        a = kl_loss([(out.fwd_mu[t], out.fwd_logvar[t]), (out.bwd_mu[t], out.bwd_logvar[t])])
        b = smoothness_loss(out.steps[t]) + smoothness_loss(out.back_steps[t])
        c = ncc_loss(frames[t + 1], sample(frames[0], out.lagrangian[t + 1]))
        d = smoothness_loss(out.lagrangian[t + 1])
        ref += (a + w.alpha1 * b + w.alpha2 * c + w.alpha3 * d).item()
    assert total.item() == pytest.approx(ref, abs=1e-6)


def test_nonfinite_term_is_reported(gen):
    frames = torch.rand(3, 16, 16, generator=gen, dtype=F64)
    z = torch.zeros(2, 16, 16, dtype=F64)
    bad = z.clone()
    bad[0, 0, 0] = float("nan")
    out = _manual_output([z, z], [z, z])
    out.fwd_logvar[1] = bad
    with pytest.raises(LossError) as info:
        total_loss(out, frames)
    assert info.value.term == "a" and info.value.t == 1
    assert "t=1" in str(info.value)


def test_loss_needs_two_frames():
    z = torch.zeros(2, 8, 8)
    out = _manual_output([z], [z])
    with pytest.raises(ShapeError):
        loss_terms(out, torch.zeros(1, 8, 8))
    with pytest.raises(ValueError):
        LossWeights(-1, 0, 0)


def test_terms_nonnegative(gen):
    frames = torch.rand(3, 16, 16, generator=gen, dtype=F64)
    mus = [0.5 * torch.randn(2, 16, 16, generator=gen, dtype=F64) for _ in range(2)]
    for tt in loss_terms(_manual_output(mus, [m * 0 for m in mus]), frames):
        assert tt["a"] >= 0 and tt["b"] >= 0 and tt["d"] >= 0 and -1 <= tt["c"] <= 0
