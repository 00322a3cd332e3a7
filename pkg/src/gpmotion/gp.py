"""Matérn-3/2 Gaussian-process prior as a Kalman state-space filter.

The latent state per scalar series is ``(value, derivative)``. The filter runs
in O(T) and is vectorized over any trailing batch axes. A dense Cholesky GP
regression is kept alongside as an O(T^3) reference.

The prior covariance defaults to ``diag(sigma^2 / 2, 3 sigma^2 / ell^2)`` and
the process noise is ``Q = S0 - Phi S0 Phi^T`` so every predicted marginal
stays at ``S0``. Under that prior the value component is a Matérn-3/2 process
with magnitude ``sigma^2 / 2``; :func:`value_variance` exposes that number and
the dense reference uses it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.linalg import cho_factor, cho_solve

from .tensor_engine import ShapeError

SQRT3 = math.sqrt(3.0)
JITTER = 1e-8


@dataclass(frozen=True)
class MaternHyper:
    sigma: float = 1.0
    ell: float = 1.0
    noise_var: float = 0.1
    # "half": diag(s^2/2, 3 s^2/l^2); "stationary": diag(s^2/2, 3 s^2/(2 l^2)), which keeps Q PSD
    prior: str = "half"

    def __post_init__(self):
        if not (self.sigma > 0 and self.ell > 0 and self.noise_var >= 0):
            raise ValueError(f"invalid Matérn hyperparameters {self}")
        if self.prior not in ("half", "stationary"):
            raise ValueError(f"unknown prior {self.prior!r}")


def value_variance(sigma):
    return sigma**2 / 2


def matern_kernel(d, hp: MaternHyper):
    """sigma * (1 + sqrt(3) d / ell) * exp(-sqrt(3) d / ell)."""
    d_arr = np.asarray(d, dtype=float) if not torch.is_tensor(d) else d
    if (d_arr < 0).any():
        raise ValueError("Matérn kernel distance must be nonnegative")
    r = SQRT3 * d_arr / hp.ell
    exp = torch.exp if torch.is_tensor(r) else np.exp
    out = hp.sigma * (1 + r) * exp(-r)
    return float(out) if np.ndim(out) == 0 and not torch.is_tensor(out) else out


def transition_matrix(hp: MaternHyper) -> tuple[np.ndarray, np.ndarray]:
    lam = SQRT3 / hp.ell
    A = np.array([[0.0, 1.0], [-(lam**2), -2 * lam]])
    b = np.array([0.0, 1.0])
    return A, b


def _prior_diag(sigma, ell, prior: str = "half"):
    p11 = 3 * sigma**2 / ell**2
    if prior == "stationary":
        p11 = p11 / 2
    return value_variance(sigma), p11


def prior_covariance(hp: MaternHyper) -> np.ndarray:
    return np.diag(_prior_diag(hp.sigma, hp.ell, hp.prior))


def _phi_entries(delta, ell):
    """Closed-form exp(delta * A): A has the double eigenvalue -sqrt(3)/ell."""
    lam = SQRT3 / ell
    x = lam * delta
    e = torch.exp(-x) if torch.is_tensor(x) else np.exp(-x)
    return e * (1 + x), e * delta, -e * lam * x, e * (1 - x)


def discretize(delta: float, hp: MaternHyper) -> tuple[np.ndarray, np.ndarray]:
    """Transition ``Phi = exp(delta A)`` and process noise ``Q = S0 - Phi S0 Phi^T``."""
    if delta < 0:
        raise ValueError("time step must be nonnegative")
    if math.isinf(delta):
        Phi = np.zeros((2, 2))
    else:
        Phi = np.array(_phi_entries(float(delta), hp.ell), dtype=float).reshape(2, 2)
    S0 = prior_covariance(hp)
    Q = S0 - Phi @ S0 @ Phi.T
    return Phi, 0.5 * (Q + Q.T)


@dataclass
class KalmanResult:
    """Per-step filter quantities, stacked along axis 0.

    Covariances are kept as their three distinct entries ``(p00, p01, p11)``.
    """

    pred_mean: torch.Tensor  # [T, 2, *batch]
    pred_cov: torch.Tensor  # [T, 3, *batch]
    mean: torch.Tensor
    cov: torch.Tensor
    gain: torch.Tensor  # [T, 2, *batch]

    def cov_matrices(self, which: str = "post") -> torch.Tensor:
        c = self.cov if which == "post" else self.pred_cov
        return torch.stack(
            [torch.stack([c[:, 0], c[:, 1]], 1), torch.stack([c[:, 1], c[:, 2]], 1)], 1
        )


def kalman_filter(
    obs,
    deltas,
    sigma,
    ell,
    noise_var,
    prior: str = "half",
    observe: str = "value",
) -> KalmanResult:
    """Filter observations ``obs[T, *batch]`` taken ``deltas[T-1, *batch]`` apart.

    Hyperparameters broadcast against ``batch``. ``observe`` selects which
    state component the observation reads, ``"value"`` or ``"derivative"``.
    Gradients flow to every tensor input.
    """
    obs = torch.as_tensor(obs)
    dtype = obs.dtype if obs.is_floating_point() else torch.float64
    obs = obs.to(dtype)
    deltas = torch.as_tensor(deltas, dtype=dtype)
    T = obs.shape[0]
    if T < 1:
        raise ShapeError("kalman_filter needs at least one observation")
    if deltas.shape[0] != T - 1:
        raise ShapeError(f"{T} observations need {T - 1} gaps, got {deltas.shape[0]}")
    if (deltas < 0).any():
        raise ValueError("gaps must be nonnegative")
    if observe not in ("value", "derivative"):
        raise ValueError(f"unknown observation component {observe!r}")
    sigma = torch.as_tensor(sigma, dtype=dtype)
    ell = torch.as_tensor(ell, dtype=dtype)
    noise_var = torch.as_tensor(noise_var, dtype=dtype)
    batch = obs.shape[1:]

    s00, s11 = _prior_diag(sigma, ell, prior)
    s00 = torch.broadcast_to(s00, batch)
    s11 = torch.broadcast_to(s11, batch)
    zero = torch.zeros(batch, dtype=dtype)

    m0, m1 = zero, zero
    p00, p01, p11 = s00, zero, s11
    rec = {k: [] for k in ("pm", "pc", "m", "c", "k")}
    for t in range(T):
        if t > 0:
            a, b, c, d = _phi_entries(deltas[t - 1], ell)
            m0, m1 = a * m0 + b * m1, c * m0 + d * m1
            # P_pred = S0 + Phi (P - S0) Phi^T
            e00, e01, e11 = p00 - s00, p01, p11 - s11
            p00 = s00 + a * a * e00 + 2 * a * b * e01 + b * b * e11
            p01 = a * c * e00 + (a * d + b * c) * e01 + b * d * e11
            p11 = s11 + c * c * e00 + 2 * c * d * e01 + d * d * e11
        rec["pm"].append(torch.stack([m0, m1]))
        rec["pc"].append(torch.stack([p00, p01, p11]))

        if observe == "value":
            s = p00 + noise_var + JITTER
            k0, k1 = p00 / s, p01 / s
            innov = obs[t] - m0
            m0, m1 = m0 + k0 * innov, m1 + k1 * innov
            p00, p01, p11 = p00 - k0 * p00, p01 - k0 * p01, p11 - k1 * p01
        else:
            s = p11 + noise_var + JITTER
            k0, k1 = p01 / s, p11 / s
            innov = obs[t] - m1
            m0, m1 = m0 + k0 * innov, m1 + k1 * innov
            p00, p01, p11 = p00 - k0 * p01, p01 - k0 * p11, p11 - k1 * p11
        rec["m"].append(torch.stack([m0, m1]))
        rec["c"].append(torch.stack([p00, p01, p11]))
        rec["k"].append(torch.stack([k0, k1]))

    return KalmanResult(
        pred_mean=torch.stack(rec["pm"]),
        pred_cov=torch.stack(rec["pc"]),
        mean=torch.stack(rec["m"]),
        cov=torch.stack(rec["c"]),
        gain=torch.stack(rec["k"]),
    )


def dense_gp_posterior(obs, positions, hp: MaternHyper, query=None):
    """Exact GP regression on value observations (float64, Cholesky).

    The kernel magnitude is the state-space model's value variance so the two
    routes describe the same prior. Returns posterior means and variances at
    ``query`` (defaults to ``positions``).
    """
    y = np.asarray(obs, dtype=np.float64)
    x = np.asarray(positions, dtype=np.float64)
    if len(x) > 64:
        raise ValueError("dense GP reference is limited to 64 points")
    q = x if query is None else np.asarray(query, dtype=np.float64)
    amp = value_variance(hp.sigma)
    scaled = MaternHyper(sigma=amp, ell=hp.ell, noise_var=hp.noise_var)
    K = matern_kernel(np.abs(x[:, None] - x[None, :]), scaled)
    K = K + (hp.noise_var + JITTER) * np.eye(len(x))
    try:
        factor = cho_factor(K, lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("Gram matrix is not positive definite") from exc
    Ks = matern_kernel(np.abs(q[:, None] - x[None, :]), scaled)
    mean = Ks @ cho_solve(factor, y)
    var = amp - np.einsum("ij,ji->i", Ks, cho_solve(factor, Ks.T))
    return mean, var


def dense_filtered_means(obs, positions, hp: MaternHyper) -> np.ndarray:
    """Mean of z_t given obs[:t+1], for each t, by repeated dense regression."""
    obs = np.asarray(obs, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    out = np.empty(len(obs))
    for t in range(len(obs)):
        mean, _ = dense_gp_posterior(obs[: t + 1], positions[: t + 1], hp, positions[t : t + 1])
        out[t] = mean[0]
    return out


def latent_deltas(pos: torch.Tensor, mode: str = "euclidean") -> torch.Tensor:
    """Gaps between consecutive positional encodings ``pos[T, P, C]`` -> ``[T-1, P]``.

    ``"euclidean"`` uses the per-patch distance divided by sqrt(C);
    ``"unit"`` uses a constant gap of one per frame.
    """
    T, P, C = pos.shape
    if mode == "unit":
        return torch.ones(T - 1, P, dtype=pos.dtype)
    if mode != "euclidean":
        raise ValueError(f"unknown gap mode {mode!r}")
    diff = pos[1:] - pos[:-1]
    # the small floor keeps the sqrt differentiable when encodings coincide
    return torch.sqrt((diff**2).sum(-1) + 1e-12) / math.sqrt(C)


def filter_latent(
    z: torch.Tensor,
    deltas: torch.Tensor,
    sigma: torch.Tensor,
    ell: torch.Tensor,
    noise_var: torch.Tensor,
    prior: str = "half",
    observe: str = "value",
) -> torch.Tensor:
    """Gate latent codes ``z[T, P, C]`` by their Kalman gain: ReLU(k_t * z_t).

    Every (patch, channel) series is filtered independently with ``z`` as the
    observation; hyperparameters are per channel, shape ``[C]``.
    """
    if z.ndim != 3:
        raise ShapeError(f"latent codes must be [T, P, C], got {tuple(z.shape)}")
    T, P, C = z.shape
    if tuple(deltas.shape) != (T - 1, P):
        raise ShapeError(f"gaps must be [{T - 1}, {P}], got {tuple(deltas.shape)}")
    for name, h in (("sigma", sigma), ("ell", ell), ("noise_var", noise_var)):
        if h.shape[-1:] != (C,) and h.numel() != 1:
            raise ShapeError(f"{name} must hold one value per channel ({C})")
    res = kalman_filter(
        z,
        deltas[..., None].expand(T - 1, P, C),
        sigma,
        ell,
        noise_var,
        prior=prior,
        observe=observe,
    )
    gain = res.gain[:, 0] if observe == "value" else res.gain[:, 1]
    return torch.relu(gain * z)
