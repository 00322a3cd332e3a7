"""Tensor primitives, Adam, and the NDT1 tensor file format.

Tensors are ``torch.Tensor`` objects; reverse-mode differentiation is torch's
autograd tape. This module pins down the small primitive surface the rest of
the package is written against, plus the optimizer and on-disk format.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F

DTYPE = torch.float32
MAGIC = b"NDT1"

# Checked mode: every primitive asserts finite outputs.
CHECKED = os.environ.get("GPMOTION_CHECKED", "0") == "1"


class ShapeError(ValueError):
    pass


def tensor(data, requires_grad: bool = False, dtype=DTYPE) -> torch.Tensor:
    return torch.tensor(data, dtype=dtype, requires_grad=requires_grad)


def _checked(out: torch.Tensor, op: str) -> torch.Tensor:
    if CHECKED and not torch.isfinite(out).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    return out


_UNARY: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "elu": F.elu,
    "relu": torch.relu,
    "exp": torch.exp,
    "sqrt": torch.sqrt,
    "neg": torch.neg,
}
_BINARY: dict[str, Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "div": torch.div,
}


def elementwise(kind: str, a: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """Apply a unary or broadcasting binary elementwise op by name."""
    if kind in _UNARY:
        if b is not None:
            raise TypeError(f"{kind} is unary")
        return _checked(_UNARY[kind](a), kind)
    if kind not in _BINARY:
        raise KeyError(f"unknown elementwise op {kind!r}")
    if b is None:
        raise TypeError(f"{kind} needs two operands")
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(
            f"{kind}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast"
        ) from None
    return _checked(_BINARY[kind](a, b), kind)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    return _checked(a @ b, "matmul")


def layer_norm(
    x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    """Normalize over the last axis with population variance, then apply the affine."""
    if x.shape[-1] == 0:
        raise ShapeError("layer_norm over an empty channel axis")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return _checked((x - mean) / torch.sqrt(var + eps) * gamma + beta, "layer_norm")


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


# --------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor], **kw) -> "AdamState":
        return cls(
            m=[torch.zeros_like(p) for p in params],
            v=[torch.zeros_like(p) for p in params],
            **kw,
        )


@torch.no_grad()
def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: AdamState,
) -> None:
    """One bias-corrected Adam update, in place. ``None`` grads count as zero."""
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("params, grads and moment buffers differ in length")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(
                f"adam: parameter {tuple(p.shape)} vs grad {tuple(g.shape)}"
            )
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        p.sub_(state.lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))


def step_decay(base_lr: float, epoch: int, every: int, factor: float = 0.5) -> float:
    return base_lr * factor ** (epoch // every)


def clip_grad_norm(params: Iterable[torch.Tensor], max_norm: float) -> float:
    return float(torch.nn.utils.clip_grad_norm_(list(params), max_norm))


# ----------------------------------------------------------------- gradient check


def gradient_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    h: float = 1e-3,
    seed: int = 0,
    directions: int = 0,
) -> float:
    """Largest relative deviation between autograd and central differences.

    ``fn`` is reduced to a scalar through a fixed random projection. With
    ``directions == 0`` every input entry is perturbed separately and the error
    for an input is ``max|analytic - numeric| / max(max|numeric|, 1e-8)``.
    Otherwise each input is probed along that many random unit directions and
    the same ratio is taken over the directional derivatives. The worst input
    is returned.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    gen = torch.Generator().manual_seed(seed)
    out = fn(*inputs)
    proj = torch.randn(out.shape, generator=gen, dtype=out.dtype)

    def scalar(*xs):
        return (fn(*xs) * proj).sum()

    grads = torch.autograd.grad(scalar(*inputs), inputs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for i, x in enumerate(inputs):
            analytic = grads[i] if grads[i] is not None else torch.zeros_like(x)
            if directions:
                a_vals, n_vals = [], []
                orig = x.clone()
                for _ in range(directions):
                    d = torch.randn(x.shape, generator=gen, dtype=x.dtype)
                    d /= d.norm()
                    x.copy_(orig + h * d)
                    fp = scalar(*inputs).item()
                    x.copy_(orig - h * d)
                    fm = scalar(*inputs).item()
                    x.copy_(orig)
                    a_vals.append((analytic * d).sum().item())
                    n_vals.append((fp - fm) / (2 * h))
                analytic_t, numeric = torch.tensor(a_vals), torch.tensor(n_vals)
            else:
                analytic_t = analytic
                numeric = torch.zeros_like(x)
                flat = x.view(-1)
                nflat = numeric.view(-1)
                for j in range(flat.numel()):
                    orig = flat[j].item()
                    flat[j] = orig + h
                    fp = scalar(*inputs).item()
                    flat[j] = orig - h
                    fm = scalar(*inputs).item()
                    flat[j] = orig
                    nflat[j] = (fp - fm) / (2 * h)
            scale = max(numeric.abs().max().item(), 1e-8)
            worst = max(worst, (analytic_t - numeric).abs().max().item() / scale)
    return worst


# ----------------------------------------------------------------------- NDT1 io

_DTYPES = {"f32": ("<f4", torch.float32)}


def write_ndt(path: str | os.PathLike, t: torch.Tensor) -> None:
    arr = t.detach().to(torch.float32).contiguous().cpu().numpy().astype("<f4", copy=False)
    header = json.dumps({"dtype": "f32", "shape": list(arr.shape)}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_ndt(path: str | os.PathLike) -> torch.Tensor:
    import numpy as np

    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an NDT1 file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    if header.get("dtype") not in _DTYPES:
        raise ValueError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    np_dtype, _ = _DTYPES[header["dtype"]]
    shape = [int(s) for s in header["shape"]]
    payload = raw[8 + hlen :]
    count = math.prod(shape)
    if len(payload) != 4 * count:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, header wants {4 * count}")
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(shape)
    return torch.from_numpy(arr.astype(np.float32))
