"""Self-checks shared by the CLI and the test-suite: GP path agreement and gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import gp, losses, model, warp
from .tensor_engine import elementwise, gradient_check, layer_norm, matmul

F64 = torch.float64


def gp_equivalence(draws: int = 100, max_len: int = 16, seed: int = 0) -> float:
    """Worst relative error between Kalman-filtered and dense-GP filtered means."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        T = int(rng.integers(1, max_len + 1))
        hp = gp.MaternHyper(
            sigma=float(rng.uniform(0.5, 2.0)),
            ell=float(rng.uniform(0.5, 4.0)),
            noise_var=float(rng.uniform(1e-3, 1.0)),
        )
        gaps = rng.uniform(0.05, 2.0, size=T - 1)
        positions = np.concatenate([[0.0], np.cumsum(gaps)])
        obs = rng.normal(size=T)
        res = gp.kalman_filter(
            torch.tensor(obs), torch.tensor(gaps), hp.sigma, hp.ell, hp.noise_var
        )
        kal = res.mean[:, 0].numpy()
        ref = gp.dense_filtered_means(obs, positions, hp)
        err = np.max(np.abs(kal - ref)) / max(np.max(np.abs(ref)), 1e-12)
        worst = max(worst, float(err))
    return worst


@dataclass
class GradResult:
    name: str
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.error < self.tolerance


PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3


def _r(gen, *shape, scale=1.0):
    return torch.randn(*shape, generator=gen, dtype=F64) * scale


def _smooth_field(gen, n=12, amp=1.5):
    coarse = _r(gen, 1, 2, 3, 3, scale=amp)
    return F.interpolate(coarse, size=(n, n), mode="bicubic", align_corners=True)[0]


def primitive_cases(seed: int = 0):
    """(name, fn, inputs) for every differentiable building block."""
    g = torch.Generator().manual_seed(seed)
    img = _r(g, 12, 12)
    cases = []
    for kind in ("elu", "exp", "neg"):
        cases.append((f"elementwise.{kind}", lambda a, k=kind: elementwise(k, a), [_r(g, 3, 4)]))
    cases.append(("elementwise.sqrt", lambda a: elementwise("sqrt", a), [_r(g, 3, 4).abs() + 0.5]))
    cases.append(("elementwise.relu", lambda a: elementwise("relu", a), [_r(g, 3, 4).abs() + 0.1]))
    for kind in ("add", "sub", "mul"):
        cases.append((f"elementwise.{kind}", lambda a, b, k=kind: elementwise(k, a, b), [_r(g, 3, 4), _r(g, 3, 4)]))
    cases.append(("elementwise.div", lambda a, b: elementwise("div", a, b), [_r(g, 3, 4), _r(g, 3, 4).abs() + 1]))
    cases.append(("matmul", matmul, [_r(g, 3, 5), _r(g, 5, 2)]))
    cases.append(("layer_norm", layer_norm, [_r(g, 4, 6), _r(g, 6), _r(g, 6)]))
    cases.append(("sample", warp.sample, [img, _smooth_field(g)]))
    cases.append(("compose", warp.compose, [_smooth_field(g), _smooth_field(g)]))
    cases.append(("integrate_velocity", lambda v: warp.integrate_velocity(v, 7), [_smooth_field(g)]))
    cases.append(
        (
            "kalman_filter",
            lambda y, d, s, l, n: gp.kalman_filter(y, d, s, l, n).mean,
            [_r(g, 6, 2), _r(g, 5, 2).abs() + 0.2, torch.tensor(1.3, dtype=F64),
             torch.tensor(0.8, dtype=F64), torch.tensor(0.2, dtype=F64)],
        )
    )
    P, C = 3, 4
    cases.append(
        ("linear_attention", model.linear_attention,
         [_r(g, P, 2 * C), _r(g, 2 * C, C), _r(g, 2 * C, C), _r(g, 2 * C, C)])
    )
    torch.manual_seed(seed)
    cell = model.TrackCell(C).double()
    cases.append(("cell_step", lambda x, h, p: cell(x, h, p)[0], [_r(g, 2, C), _r(g, 2, C), _r(g, 2, C)]))
    cases.append(("ncc_loss", lambda a, b: losses.ncc_loss(a, b, window=5), [img, img + _r(g, 12, 12, scale=0.3)]))
    cases.append(("smoothness_loss", losses.smoothness_loss, [_r(g, 2, 6, 6)]))
    cases.append(("kl_loss", lambda m, lv: losses.kl_loss([(m, lv)]), [_r(g, 2, 4, 4), _r(g, 2, 4, 4, scale=0.5)]))
    return cases


def end_to_end_case(seed: int = 0, size: int = 16, frames: int = 3, dim: int = 8, patch: int = 8):
    """Total loss of a tiny double-precision model as a function of all parameters."""
    torch.manual_seed(seed)
    cfg = model.ModelConfig(size=(size, size), patch=patch, dim=dim, layers=1)
    net = model.TrackNet(cfg).double()
    # move the zero-initialized heads off zero so every parameter carries gradient
    with torch.no_grad():
        for head in (net.decoder.mean_head, net.decoder.logvar_head):
            head.weight.normal_(0.0, 0.05)
    g = torch.Generator().manual_seed(seed + 1)
    xs = torch.rand(frames, size, size, generator=g, dtype=F64)
    names = [n for n, _ in net.named_parameters()]
    params = [p.detach().clone() for p in net.parameters()]

    def fn(*ps):
        state = dict(zip(names, ps))
        out = torch.func.functional_call(net, state, (xs,), {"sample": True,
                                         "generator": torch.Generator().manual_seed(7)})
        total, _ = losses.total_loss(out, xs, losses.LossWeights(0.5, 1.0, 0.5), window=5)
        return total

    return fn, params


def gradient_suite(seed: int = 0, end_to_end: bool = True) -> list[GradResult]:
    results = []
    for name, fn, inputs in primitive_cases(seed):
        inputs = [x.to(F64) for x in inputs]
        results.append(GradResult(name, gradient_check(fn, inputs, h=1e-6, seed=seed), PRIMITIVE_TOL))
    for term in "abcd":
        results.append(GradResult(f"loss_term.{term}", _term_check(term, seed), PRIMITIVE_TOL))
    if end_to_end:
        fn, params = end_to_end_case(seed)
        results.append(GradResult("end_to_end", gradient_check(fn, params, h=1e-6, seed=seed, directions=3), END_TO_END_TOL))
    return results


def _term_check(term: str, seed: int) -> float:
    """One loss component as a function of the velocity means it is built from."""
    g = torch.Generator().manual_seed(seed + 11)
    frames = torch.rand(3, 12, 12, generator=g, dtype=F64)
    mus = [_smooth_field(g, amp=0.6) for _ in range(2)]
    lvs = [_r(g, 2, 12, 12, scale=0.3) - 1 for _ in range(2)]

    def fn(m0, m1, l0, l1):
        steps = [warp.integrate_velocity(m, 7) for m in (m0, m1)]
        back = [warp.integrate_velocity(-m, 7) for m in (m0, m1)]
        out = model.SequenceOutput([m0, m1], [l0, l1], [], [], steps, back, model.accumulate(steps))
        return sum(t[term] for t in losses.loss_terms(out, frames, window=5))

    return gradient_check(fn, mus + lvs, h=1e-6, seed=seed, directions=6)
