"""Differentiable building blocks, a central-difference gradient checker and
the FGL1 checkpoint format.

Autograd comes from torch; every op here is a thin, shape-checked wrapper so
the rest of the package has a single contract to test against.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError, FormatError, ShapeError

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def dtype_of(precision: str) -> torch.dtype:
    return DTYPES[precision]


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


# ---------------------------------------------------------------------------
# functional ops


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for {x.ndim}-d input")
    z = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=axis, keepdim=True)


def scaled_dot_attention(q, k, v, key_dim: int | None = None, return_weights: bool = False):
    """softmax(q k^T / sqrt(key_dim)) v over the last two axes.

    ``key_dim`` defaults to the width of ``q``.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    d_e = q.shape[-1] if key_dim is None else key_dim
    w = softmax(q @ k.transpose(-2, -1) / math.sqrt(d_e), axis=-1)
    out = w @ v
    return (out, w) if return_weights else out


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def resize_to(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-1] == size and x.shape[-2] == size:
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)


def conv3x3(cin: int, cout: int, bias: bool = True) -> nn.Conv2d:
    conv = nn.Conv2d(cin, cout, kernel_size=3, stride=1, padding=1, bias=bias)
    if bias:
        nn.init.zeros_(conv.bias)
    return conv


# ---------------------------------------------------------------------------
# modules


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        # a key bias only shifts every logit of a row equally, which softmax ignores
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x, context=None):
        context = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        y = scaled_dot_attention(q, k, v)
        b, h, n, dh = y.shape
        return self.out(y.transpose(1, 2).reshape(b, n, h * dh))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + GELU feed-forward."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class CrossAttentionBlock(nn.Module):
    """Learned queries attend to a token sequence."""

    def __init__(self, dim: int, heads: int, n_queries: int):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(n_queries, dim) * 0.02)
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, tokens):
        q = self.queries.unsqueeze(0).expand(tokens.shape[0], -1, -1)
        x = q + self.attn(self.norm_q(q), self.norm_kv(tokens))
        return x + self.mlp(self.norm2(x))


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def trainable_parameters(module: nn.Module) -> dict[str, nn.Parameter]:
    return {n: p for n, p in module.named_parameters() if p.requires_grad}


def snapshot(module: nn.Module, only_frozen: bool = False) -> dict[str, torch.Tensor]:
    return {
        n: p.detach().clone()
        for n, p in module.named_parameters()
        if not (only_frozen and p.requires_grad)
    }


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    max_relative_error: float
    per_parameter: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    frozen_grad_max: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance and self.frozen_grad_max == 0.0

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        worst = max(self.per_parameter, key=self.per_parameter.get) if self.per_parameter else "-"
        return (
            f"{status} max_relative_error={self.max_relative_error:.3e} "
            f"(tol {self.tolerance:g}, {len(self.per_parameter)} parameters, worst: {worst})"
        )


def _rel(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def _central(loss_fn, flat: torch.Tensor, d: torch.Tensor, h: float, order: int) -> float:
    base = flat.clone()

    def at(t):
        flat.copy_(base + t * d)
        return float(loss_fn())

    try:
        d1 = (at(h) - at(-h)) / (2 * h)
        if order == 2:
            return d1
        d2 = (at(2 * h) - at(-2 * h)) / (4 * h)
        return (4 * d1 - d2) / 3
    finally:
        flat.copy_(base)


def grad_check(
    module: nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    *,
    h: float = 1e-3,
    tol: float = 1e-4,
    n_directions: int = 2,
    coord_limit: int = 8,
    seed: int = 0,
    order: int = 4,
) -> GradCheckReport:
    """Compare autograd gradients against central differences.

    Every trainable parameter is perturbed along unit-norm directions: the
    normalized analytic gradient g/|g| and ``n_directions`` random unit
    vectors r tilted towards it, (g/|g| + r) / |g/|g| + r|. The tilt keeps the
    directional derivative near |g|/sqrt(2), well above float64 roundoff in
    the loss, while an error orthogonal to g still shows through r.
    Parameters with at most ``coord_limit`` entries are also checked along
    every coordinate axis whose derivative is at least 1e-3 |g|.

    ``order=2`` is the two-point stencil (f(+h) - f(-h)) / 2h; ``order=4``
    (default) adds the +-2h points, cancelling the h^2 truncation term that
    otherwise dominates along high-curvature directions.

    Relative error per direction is ``|a - n| / max(|a|, |n|, 1e-8)``; a
    parameter's error is its worst direction.
    """
    if order not in (2, 4):
        raise ContractError(f"stencil order must be 2 or 4, got {order}")
    params = dict(module.named_parameters())
    for n, p in params.items():
        if p.dtype != torch.float64:
            raise ContractError(f"grad_check needs float64 parameters, {n} is {p.dtype}")
    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    if loss.ndim != 0 and loss.numel() != 1:
        raise ContractError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    trainable = {n: p for n, p in params.items() if p.requires_grad}
    if trainable:
        loss.backward()
    frozen_max = 0.0
    for n, p in params.items():
        if not p.requires_grad and p.grad is not None:
            frozen_max = max(frozen_max, float(p.grad.abs().max()))
    analytic = {
        n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for n, p in trainable.items()
    }
    module.zero_grad(set_to_none=True)

    gen = seeded_generator(seed)
    per = {}
    with torch.no_grad():
        for name, p in trainable.items():
            g = analytic[name].reshape(-1)
            gn = g.norm()
            g_hat = g / gn if gn > 0 else torch.zeros_like(g)
            dirs = [g_hat] if gn > 0 else []
            for _ in range(n_directions):
                r = torch.randn(p.numel(), generator=gen, dtype=p.dtype)
                t = g_hat + r / r.norm()
                dirs.append(t / t.norm())
            if p.numel() <= coord_limit:
                eye = torch.eye(p.numel(), dtype=p.dtype)
                dirs += [eye[i] for i in range(p.numel()) if abs(g[i]) >= 1e-3 * gn and gn > 0]
            flat = p.view(-1)
            errs = []
            for d in dirs:
                numeric = _central(loss_fn, flat, d, h, order)
                errs.append(_rel(float(g @ d), numeric))
            per[name] = max(errs) if errs else 0.0
    worst = max(per.values(), default=0.0)
    return GradCheckReport(worst, per, tol, frozen_max)


# ---------------------------------------------------------------------------
# checkpoint format: b"FGL1" | u32 index length | JSON index | raw tensor bytes

MAGIC = b"FGL1"


def to_ckpt_name(torch_name: str) -> str:
    return torch_name.replace(".", "/")


def save_checkpoint(tensors: dict[str, torch.Tensor], path, meta: dict | None = None) -> None:
    index, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy()
        dt = {"float32": "<f4", "float64": "<f8"}.get(str(arr.dtype))
        if dt is None:
            raise ContractError(f"{name}: unsupported dtype {arr.dtype}")
        raw = arr.astype(dt).tobytes()
        index.append({"name": to_ckpt_name(name), "shape": list(arr.shape), "offset": offset, "dtype": dt})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": index, "meta": meta or {}}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``({ckpt_name: array}, meta)``."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: not an FGL1 checkpoint")
    (n,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + n])
    body = memoryview(blob)[8 + n :]
    out = {}
    for rec in header["tensors"]:
        dt = np.dtype(rec["dtype"])
        count = int(np.prod(rec["shape"])) if rec["shape"] else 1
        a = np.frombuffer(body, dtype=dt, count=count, offset=rec["offset"])
        out[rec["name"]] = a.reshape(rec["shape"]).copy()
    return out, header.get("meta", {})


def module_state(module: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p for n, p in module.named_parameters()}


def load_into(module: nn.Module, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
    with torch.no_grad():
        for n, p in module.named_parameters():
            key = to_ckpt_name(n)
            if key not in tensors:
                if strict:
                    raise FormatError(f"checkpoint lacks {key}")
                continue
            src = torch.from_numpy(tensors[key])
            if tuple(src.shape) != tuple(p.shape):
                raise ShapeError(f"{key}: checkpoint shape {tuple(src.shape)} != {tuple(p.shape)}")
            p.copy_(src.to(p.dtype))
