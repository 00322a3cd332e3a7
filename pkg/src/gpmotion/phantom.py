"""Synthetic periodic-deformation sequences with analytic motion.

Two annular structures pulse radially around their centres with factor
``1 + A sin(2 pi t / period + phase)``; the second runs in counter-phase.
Each structure's motion is localized by a Gaussian weight, so a material
point at reference position ``X`` sits at

    chi_t(X) = X + sum_k w_k(X) (s_k(t) - 1) (X - c_k)

at frame t. Frames and masks are the template evaluated at
``chi_t^{-1}(x)``, which is found by fixed-point iteration to machine
precision. Frame 0 is the undeformed template.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .tensor_engine import read_ndt, write_ndt

MAX_AMPLITUDE = 0.25
N_WAVES = 40


@dataclass(frozen=True)
class Structure:
    center: tuple[float, float]
    r_inner: float
    r_outer: float
    phase: float = 0.0

    @property
    def reach(self) -> float:
        return 1.25 * self.r_outer


@dataclass(frozen=True)
class PhantomSpec:
    size: tuple[int, int] = (64, 64)
    period: int = 16
    frames: int = 32
    amplitude: float = 0.12
    structures: tuple[Structure, ...] = (
        Structure((20.0, 20.0), 6.0, 12.0, 0.0),
        Structure((44.0, 44.0), 6.0, 12.0, math.pi),
    )
    counter_phase: bool = True
    texture_seed: int = 0
    noise: float = 0.02

    def __post_init__(self):
        if not 0 <= self.amplitude < MAX_AMPLITUDE:
            raise ValueError(
                f"amplitude {self.amplitude} outside [0, {MAX_AMPLITUDE}); larger values can fold the field"
            )
        if self.period < 1 or self.frames < 1:
            raise ValueError("period and frame count must be positive")
        H, W = self.size
        for s in self.structures:
            cy, cx = s.center
            if not (0 < s.r_inner < s.r_outer):
                raise ValueError(f"bad radii in {s}")
            if cy - s.r_outer < 0 or cx - s.r_outer < 0 or cy + s.r_outer > H - 1 or cx + s.r_outer > W - 1:
                raise ValueError(f"structure {s} leaves the {H}x{W} grid")

    def phase_of(self, k: int) -> float:
        if not self.counter_phase:
            return 0.0
        return self.structures[k].phase

    @classmethod
    def random(cls, seed: int, size=64, period=16, frames=32, amplitude=0.12, noise=0.02):
        """Jittered centres and radii around the default two-structure layout."""
        rng = np.random.default_rng(seed)
        scale = size / 64.0
        structs = []
        for k, (base, phase) in enumerate(((20.0, 0.0), (44.0, math.pi))):
            cy, cx = (base + rng.uniform(-3, 3)) * scale, (base + rng.uniform(-3, 3)) * scale
            r_out = rng.uniform(10.0, 12.5) * scale
            r_in = r_out * rng.uniform(0.45, 0.6)
            structs.append(Structure((float(cy), float(cx)), float(r_in), float(r_out), phase))
        return cls(
            size=(size, size),
            period=period,
            frames=frames,
            amplitude=amplitude,
            structures=tuple(structs),
            texture_seed=int(rng.integers(2**31)),
            noise=noise,
        )

    def to_json(self) -> dict:
        d = asdict(self)
        d["structures"] = [asdict(s) for s in self.structures]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["size"] = tuple(d["size"])
        d["structures"] = tuple(
            Structure(tuple(s["center"]), s["r_inner"], s["r_outer"], s["phase"]) for s in d["structures"]
        )
        return cls(**d)


@dataclass
class SequenceSample:
    frames: torch.Tensor  # [T, H, W] in [0, 1]
    masks: torch.Tensor  # [T, H, W] integer labels stored as float
    gt_steps: torch.Tensor  # [T-1, 2, H, W], phi_{t:t+1}
    gt_lagrangian: torch.Tensor  # [T, 2, H, W], phi_{0:t}
    spec: PhantomSpec | None = None
    meta: dict = field(default_factory=dict)


# ----------------------------------------------------------------- geometry


def _scales(spec: PhantomSpec, t: float) -> list[float]:
    return [
        1.0 + spec.amplitude * math.sin(2 * math.pi * t / spec.period + spec.phase_of(k))
        for k in range(len(spec.structures))
    ]


def _displacement(spec: PhantomSpec, X: np.ndarray, t: float) -> np.ndarray:
    """chi_t(X) - X for points ``X[2, ...]``."""
    out = np.zeros_like(X)
    for s, f in zip(spec.structures, _scales(spec, t)):
        if f == 1.0:
            continue
        c = np.asarray(s.center).reshape(2, *([1] * (X.ndim - 1)))
        rel = X - c
        w = np.exp(-(rel**2).sum(0) / (2 * s.reach**2))
        out += w * (f - 1.0) * rel
    return out


def forward_map(spec: PhantomSpec, X: np.ndarray, t: float) -> np.ndarray:
    return X + _displacement(spec, X, t)


def inverse_map(spec: PhantomSpec, x: np.ndarray, t: float, tol: float = 1e-12) -> np.ndarray:
    X = x.copy()
    for _ in range(200):
        nxt = x - _displacement(spec, X, t)
        if np.max(np.abs(nxt - X)) < tol:
            return nxt
        X = nxt
    return X


def _grid(spec: PhantomSpec) -> np.ndarray:
    H, W = spec.size
    return np.stack(np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij"))


def analytic_field(spec: PhantomSpec, t1: int, t2: int) -> torch.Tensor:
    """Displacement carrying frame-``t2`` coordinates to frame-``t1`` coordinates.

    Warping frame ``t1`` by this field reproduces frame ``t2``.
    """
    for t in (t1, t2):
        if not 0 <= t < spec.frames:
            raise IndexError(f"frame index {t} outside [0, {spec.frames})")
    x = _grid(spec)
    X = inverse_map(spec, x, t2)
    return torch.from_numpy(forward_map(spec, X, t1) - x).float()


# ------------------------------------------------------------------ content


def _texture(spec: PhantomSpec, X: np.ndarray) -> np.ndarray:
    """Band-limited random field in [0, 1]: a sum of random plane waves."""
    rng = np.random.default_rng(spec.texture_seed)
    H, W = spec.size
    out = np.zeros(X.shape[1:])
    for _ in range(N_WAVES):
        wavelength = rng.uniform(9.0, 24.0)
        theta = rng.uniform(0, 2 * math.pi)
        k = 2 * math.pi / wavelength * np.array([math.cos(theta), math.sin(theta)])
        out += rng.uniform(0.5, 1.0) * np.cos(k[0] * X[0] + k[1] * X[1] + rng.uniform(0, 2 * math.pi))
    out /= math.sqrt(N_WAVES / 2) * 0.75
    return 0.5 + 0.25 * np.tanh(out)


def _ring_profile(spec: PhantomSpec, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Smooth ring intensity and hard label map at reference positions."""
    intensity = np.zeros(X.shape[1:])
    labels = np.zeros(X.shape[1:], dtype=np.int64)
    for k, s in enumerate(spec.structures, start=1):
        c = np.asarray(s.center).reshape(2, 1, 1)
        r = np.sqrt(((X - c) ** 2).sum(0))
        # soft edges about 1.5 cells wide keep the image band-limited
        edge = 1.5
        inside = 0.5 * (np.tanh((r - s.r_inner) / edge) - np.tanh((r - s.r_outer) / edge))
        intensity = np.maximum(intensity, inside)
        labels[(r >= s.r_inner) & (r <= s.r_outer)] = k
    return intensity, labels


def _render(spec: PhantomSpec, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ring, labels = _ring_profile(spec, X)
    img = 0.55 * _texture(spec, X) + 0.45 * ring
    return np.clip(img, 0.0, 1.0), labels


def generate(spec: PhantomSpec, seed: int = 0) -> SequenceSample:
    """Render all frames, masks and analytic fields; ``seed`` drives the noise."""
    rng = np.random.default_rng(seed)
    x = _grid(spec)
    frames, masks, refs = [], [], []
    for t in range(spec.frames):
        X = inverse_map(spec, x, t)
        refs.append(X)
        img, lab = _render(spec, X)
        if spec.noise > 0:
            img = np.clip(img + rng.normal(0.0, spec.noise, img.shape), 0.0, 1.0)
        frames.append(img)
        masks.append(lab)
    steps = [forward_map(spec, refs[t + 1], t) - x for t in range(spec.frames - 1)]
    lag = [forward_map(spec, refs[t], 0) - x for t in range(spec.frames)]
    as_t = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float32))
    return SequenceSample(
        frames=as_t(frames),
        masks=as_t(masks),
        gt_steps=as_t(steps) if steps else torch.zeros(0, 2, *spec.size),
        gt_lagrangian=as_t(lag),
        spec=spec,
        meta={"seed": seed},
    )


# ------------------------------------------------------------------ storage


def save_sequence(seq: SequenceSample, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_ndt(out / "frames.ndt", seq.frames)
    write_ndt(out / "masks.ndt", seq.masks)
    write_ndt(out / "gt_fields.ndt", seq.gt_steps)
    write_ndt(out / "gt_lagrangian.ndt", seq.gt_lagrangian)
    manifest = {
        "format_version": 1,
        "frames": int(seq.frames.shape[0]),
        "size": list(seq.frames.shape[1:]),
        "files": {
            "frames": "frames.ndt",
            "masks": "masks.ndt",
            "gt_fields": "gt_fields.ndt",
            "gt_lagrangian": "gt_lagrangian.ndt",
        },
        "spec": seq.spec.to_json() if seq.spec else None,
        **seq.meta,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_sequence(path: str | Path) -> SequenceSample:
    path = Path(path)
    mpath = path / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
        files = manifest["files"]
        frames = read_ndt(path / files["frames"])
        masks = read_ndt(path / files["masks"]) if "masks" in files else None
        steps = read_ndt(path / files["gt_fields"]) if "gt_fields" in files else None
        lag = read_ndt(path / files["gt_lagrangian"]) if "gt_lagrangian" in files else None
    except (OSError, KeyError, ValueError) as exc:
        raise ValueError(f"cannot read sequence at {path}: {exc}") from exc
    spec = PhantomSpec.from_json(manifest["spec"]) if manifest.get("spec") else None
    meta = {k: v for k, v in manifest.items() if k not in ("files", "spec")}
    return SequenceSample(frames, masks, steps, lag, spec, meta)


def list_sequences(root: str | Path) -> list[Path]:
    root = Path(root)
    if (root / "manifest.json").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "manifest.json").exists())
    if not dirs:
        raise ValueError(f"no sequence directories under {root}")
    return dirs


def generate_dataset(out, count, size=64, period=16, frames=32, amplitude=0.12, noise=0.02, seed=0):
    out = Path(out)
    paths = []
    for i in range(count):
        spec = PhantomSpec.random(seed * 1000 + i, size, period, frames, amplitude, noise)
        paths.append(save_sequence(generate(spec, seed * 1000 + i), out / f"seq_{i:03d}"))
    return paths
