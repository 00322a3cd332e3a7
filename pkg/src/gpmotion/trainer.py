"""Training, checkpointing and inference for the tracking network."""
from __future__ import annotations

import base64
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch
import yaml

from .losses import LossError, LossWeights, total_loss
from .model import ModelConfig, TrackNet, accumulate
from .phantom import SequenceSample, list_sequences, load_sequence
from .tensor_engine import (
    AdamState,
    ShapeError,
    adam_step,
    backward,
    clip_grad_norm,
    read_ndt,
    step_decay,
    write_ndt,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
CSV_HEADER = ["epoch", "term_a", "term_b", "term_c", "term_d", "total"]


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 5e-4
    lr_decay: float = 0.5
    lr_every: int = 20
    batch_size: int = 1
    seq_len: int = 8
    layers: int = 2
    patch: int = 8
    dim: int = 32
    alpha1: float = 0.02
    alpha2: float = 1.0
    alpha3: float = 0.02
    ncc_window: int = 9
    seed: int = 0
    bidirectional: bool = True
    gp: bool = True
    gp_prior: str = "half"
    gp_observe: str = "value"
    gap_mode: str = "euclidean"
    clip_norm: float = 1.0
    flip_augment: bool = False
    max_sequences: int = 0  # 0 uses every sequence in the dataset

    def __post_init__(self):
        for name in ("epochs", "lr", "lr_every", "batch_size", "layers", "patch", "dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.seq_len < 2:
            raise ValueError("seq_len must be at least 2")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        LossWeights(self.alpha1, self.alpha2, self.alpha3)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha1, self.alpha2, self.alpha3)

    def model_config(self, size) -> ModelConfig:
        return ModelConfig(
            size=tuple(size),
            patch=self.patch,
            dim=self.dim,
            layers=self.layers,
            bidirectional=self.bidirectional,
            gp=self.gp,
            gp_prior=self.gp_prior,
            gp_observe=self.gp_observe,
            gap_mode=self.gap_mode,
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def load_config(path: str | Path | None, **overrides) -> TrainConfig:
    """Read a YAML (or JSON) config; ``None``-valued overrides are ignored."""
    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**data)


# ------------------------------------------------------------------ state


@dataclass
class TrainState:
    config: TrainConfig
    model: TrackNet
    opt: AdamState
    epoch: int = 0
    generator: torch.Generator = field(default_factory=torch.Generator)
    history: list = field(default_factory=list)


def build_state(cfg: TrainConfig, size) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = TrackNet(cfg.model_config(size))
    params = list(model.parameters())
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    return TrainState(cfg, model, AdamState.for_params(params, lr=cfg.lr), 0, gen)


def save_checkpoint(state: TrainState, out: str | Path) -> Path:
    """Manifest JSON plus one NDT1 file per parameter and Adam moment."""
    out = Path(out)
    (out / "params").mkdir(parents=True, exist_ok=True)
    (out / "optim").mkdir(parents=True, exist_ok=True)
    names = [n for n, _ in state.model.named_parameters()]
    for (name, p), m, v in zip(state.model.named_parameters(), state.opt.m, state.opt.v):
        write_ndt(out / "params" / f"{name}.ndt", p)
        write_ndt(out / "optim" / f"{name}.m.ndt", m)
        write_ndt(out / "optim" / f"{name}.v.ndt", v)
    manifest = {
        "format_version": FORMAT_VERSION,
        "epoch": state.epoch,
        "size": list(state.model.cfg.size),
        "config": asdict(state.config),
        "config_hash": state.config.digest(),
        "params": {n: f"params/{n}.ndt" for n in names},
        "optimizer": {
            "step": state.opt.step,
            "lr": state.opt.lr,
            "beta1": state.opt.beta1,
            "beta2": state.opt.beta2,
            "eps": state.opt.eps,
            "m": {n: f"optim/{n}.m.ndt" for n in names},
            "v": {n: f"optim/{n}.v.ndt" for n in names},
        },
        "rng_state": base64.b64encode(state.generator.get_state().numpy().tobytes()).decode(),
        "history": state.history,
    }
    path = out / "checkpoint.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.json"
    root = path.parent
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('format_version')}")
    cfg = TrainConfig(**manifest["config"])
    model = TrackNet(cfg.model_config(manifest["size"]))
    with torch.no_grad():
        for name, p in model.named_parameters():
            src = read_ndt(root / manifest["params"][name])
            if src.shape != p.shape:
                raise ShapeError(f"checkpoint parameter {name}: {tuple(src.shape)} vs {tuple(p.shape)}")
            p.copy_(src)
    o = manifest["optimizer"]
    names = [n for n, _ in model.named_parameters()]
    opt = AdamState(
        lr=o["lr"],
        beta1=o["beta1"],
        beta2=o["beta2"],
        eps=o["eps"],
        step=o["step"],
        m=[read_ndt(root / o["m"][n]) for n in names],
        v=[read_ndt(root / o["v"][n]) for n in names],
    )
    gen = torch.Generator()
    raw = base64.b64decode(manifest["rng_state"])
    gen.set_state(torch.frombuffer(bytearray(raw), dtype=torch.uint8))
    return TrainState(cfg, model, opt, manifest["epoch"], gen, manifest.get("history", []))


# ------------------------------------------------------------------ training


def load_dataset(data_dir: str | Path, cfg: TrainConfig) -> list[torch.Tensor]:
    seqs = []
    paths = list_sequences(data_dir)
    if cfg.max_sequences:
        paths = paths[: cfg.max_sequences]
    for p in paths:
        frames = load_sequence(p).frames
        if frames.shape[0] < cfg.seq_len:
            raise ValueError(f"{p}: {frames.shape[0]} frames, need {cfg.seq_len}")
        seqs.append(frames[: cfg.seq_len].contiguous())
    return seqs


def train_step(state: TrainState, frames: torch.Tensor) -> dict:
    cfg = state.config
    model = state.model
    model.train()
    if cfg.flip_augment and torch.rand((), generator=state.generator) < 0.5:
        frames = frames.flip(-1)
    out = model(frames, sample=True, generator=state.generator)
    loss, terms = total_loss(out, frames, cfg.weights, cfg.ncc_window)
    params = list(model.parameters())
    for p in params:
        p.grad = None
    backward(loss)
    clip_grad_norm(params, cfg.clip_norm)
    adam_step(params, [p.grad for p in params], state.opt)
    terms["total"] = float(loss.detach())
    return terms


def train_epoch(state: TrainState, seqs: list[torch.Tensor]) -> dict:
    cfg = state.config
    state.opt.lr = step_decay(cfg.lr, state.epoch, cfg.lr_every, cfg.lr_decay)
    acc = {k: 0.0 for k in ("a", "b", "c", "d", "total")}
    for i, frames in enumerate(seqs):
        try:
            terms = train_step(state, frames)
        except LossError as exc:
            raise LossError(exc.term, exc.t) from RuntimeError(
                f"epoch {state.epoch}, sequence {i}"
            )
        if not math.isfinite(terms["total"]):
            raise LossError("total", -1)
        for k in acc:
            acc[k] += terms[k] / len(seqs)
    state.epoch += 1
    row = {"epoch": state.epoch, **acc}
    state.history.append(row)
    return row


def write_loss_csv(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in history:
            w.writerow([r["epoch"]] + [f"{r[k]:.9g}" for k in ("a", "b", "c", "d", "total")])


def train(data_dir, cfg: TrainConfig, out_dir, resume: str | Path | None = None, progress=None) -> Path:
    """Train on every sequence under ``data_dir``; returns the checkpoint manifest path."""
    torch.use_deterministic_algorithms(True)
    seqs = load_dataset(data_dir, cfg)
    size = tuple(seqs[0].shape[1:])
    if resume is not None:
        state = load_checkpoint(resume)
        state.config = cfg if cfg.digest() == state.config.digest() else state.config
    else:
        state = build_state(cfg, size)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    while state.epoch < cfg.epochs:
        row = train_epoch(state, seqs)
        log.info("epoch %d total %.5f", row["epoch"], row["total"])
        if progress:
            progress(row)
    write_loss_csv(state.history, out_dir / "loss.csv")
    return save_checkpoint(state, out_dir)


# ------------------------------------------------------------------ inference


@dataclass
class TrackResult:
    steps: torch.Tensor  # [T-1, rank, *spatial]
    lagrangian: torch.Tensor  # [T, rank, *spatial]


@torch.no_grad()
def track(model_or_ckpt, frames: torch.Tensor) -> TrackResult:
    """Mean-only (deterministic) fields for every frame of a sequence."""
    model = model_or_ckpt
    if not isinstance(model, TrackNet):
        model = load_checkpoint(model_or_ckpt).model
    model.eval()
    frames = torch.as_tensor(frames, dtype=torch.float32)
    if tuple(frames.shape[1:]) != tuple(model.cfg.size):
        raise ShapeError(f"sequence frames {tuple(frames.shape[1:])} vs model grid {tuple(model.cfg.size)}")
    out = model(frames, sample=False)
    return TrackResult(torch.stack(out.steps), torch.stack(out.lagrangian))


def track_sequence(model, seq: SequenceSample, window: int | None = None) -> TrackResult:
    """Track a sequence longer than the training window by chaining windows.

    Consecutive windows overlap by one frame; step fields are concatenated and
    composed into Lagrangian fields from frame 0.
    """
    T = seq.frames.shape[0]
    if window is None or window >= T:
        return track(model, seq.frames)
    steps = []
    start = 0
    while start < T - 1:
        stop = min(start + window, T)
        steps.extend(track(model, seq.frames[start:stop]).steps)
        start = stop - 1
    lag = accumulate(steps)
    return TrackResult(torch.stack(steps), torch.stack(lag))
