"""Numeric substrate: precision mode, symlog/two-hot codecs, gradient checks, Adam.

Tensors are plain ``torch.Tensor`` objects; reverse-mode accumulation is torch
autograd. The pieces here are the conventions every other module relies on.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
import torch

_PRECISIONS = {"float32": torch.float32, "float64": torch.float64}
_mode = "float32"


def set_precision(mode: str) -> None:
    """Select the global run precision ("float64" for checks, "float32" for training)."""
    global _mode
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_PRECISIONS)}")
    _mode = mode
    torch.set_default_dtype(_PRECISIONS[mode])


def get_precision() -> str:
    return _mode


def dtype() -> torch.dtype:
    return _PRECISIONS[_mode]


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    prev = _mode
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(prev)


def seed_everything(seed: int) -> np.random.Generator:
    """Seed torch's global generator and return a numpy Generator for the same seed."""
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


# ---------------------------------------------------------------------------
# symlog / symexp
# ---------------------------------------------------------------------------


def _check_finite(x, name: str) -> None:
    if isinstance(x, torch.Tensor):
        ok = bool(torch.isfinite(x).all())
    else:
        ok = bool(np.all(np.isfinite(x)))
    if not ok:
        raise ValueError(f"{name}: non-finite input")


def symlog(x):
    """sign(x) * ln(1 + |x|). Accepts floats, numpy arrays or tensors."""
    _check_finite(x, "symlog")
    if isinstance(x, torch.Tensor):
        return torch.sign(x) * torch.log1p(torch.abs(x))
    if np.ndim(x) == 0:
        return math.copysign(math.log1p(abs(x)), x) if x != 0 else 0.0
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(y):
    """Inverse of :func:`symlog`."""
    _check_finite(y, "symexp")
    if isinstance(y, torch.Tensor):
        return torch.sign(y) * torch.expm1(torch.abs(y))
    if np.ndim(y) == 0:
        return math.copysign(math.expm1(abs(y)), y) if y != 0 else 0.0
    y = np.asarray(y, dtype=float)
    return np.sign(y) * np.expm1(np.abs(y))


# ---------------------------------------------------------------------------
# two-hot codec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TwoHotCodec:
    """Distributional regression target on a grid that is uniform in symlog space."""

    bucket_count: int = 255
    low: float = -20.0
    high: float = 20.0
    centers: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.bucket_count < 2:
            raise ValueError("bucket_count must be >= 2")
        if not self.low < self.high:
            raise ValueError("low must be < high")
        c = np.linspace(symlog(self.low), symlog(self.high), self.bucket_count)
        object.__setattr__(self, "centers", c)

    @property
    def value_range(self) -> tuple[float, float]:
        return float(symexp(self.centers[0])), float(symexp(self.centers[-1]))

    def centers_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.centers, dtype=dtype())

    def encode(self, v: torch.Tensor | float) -> torch.Tensor:
        """Two-hot probabilities for value(s) ``v``; output has a trailing bucket axis."""
        v = torch.as_tensor(v, dtype=dtype())
        centers = self.centers_tensor()
        y = symlog(v).clamp(centers[0], centers[-1])
        idx_hi = torch.searchsorted(centers, y.contiguous(), right=False).clamp(1, self.bucket_count - 1)
        idx_lo = idx_hi - 1
        c_lo, c_hi = centers[idx_lo], centers[idx_hi]
        w_hi = (y - c_lo) / (c_hi - c_lo)
        w_lo = 1.0 - w_hi
        out = torch.zeros(*y.shape, self.bucket_count, dtype=y.dtype)
        out.scatter_(-1, idx_lo.unsqueeze(-1), w_lo.unsqueeze(-1))
        out.scatter_add_(-1, idx_hi.unsqueeze(-1), w_hi.unsqueeze(-1))
        return out

    def decode(self, p: torch.Tensor, *, check: bool = True) -> torch.Tensor:
        """symexp of the probability-weighted center. ``p`` has a trailing bucket axis."""
        p = torch.as_tensor(p)
        if p.shape[-1] != self.bucket_count:
            raise ValueError(f"expected {self.bucket_count} buckets, got {p.shape[-1]}")
        if check and p.numel() and float((p.sum(-1) - 1.0).abs().max()) > 1e-6:
            raise ValueError("probability vector not normalized within 1e-6")
        return symexp((p * self.centers_tensor().to(p.dtype)).sum(-1))

    def decode_logits(self, logits: torch.Tensor) -> torch.Tensor:
        return self.decode(torch.softmax(logits, -1), check=False)

    def cross_entropy(self, logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        """Per-element cross-entropy between ``logits`` and two-hot(targets)."""
        target_p = self.encode(targets.detach())
        return -(target_p * torch.log_softmax(logits, -1)).sum(-1)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    step: float = 1e-5,
) -> float:
    """Max relative error between autograd and central finite differences.

    ``f`` is a zero-argument closure computing a scalar from ``params``; it must
    reseed any randomness it uses. Requires float64 tensors.
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("grad_check requires float64 parameters")
    for p in params:
        p.grad = None
    out = f()
    if out.dim() != 0 and out.numel() != 1:
        raise ValueError("f must return a scalar")
    again = f()
    if out.item() != again.item():
        raise RuntimeError("f is not deterministic: two evaluations differ")
    grads = torch.autograd.grad(out, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g_ad = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            g_fd = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                g_fd[i] = (fp - fm) / (2 * step)
            g_ad = g_ad.reshape(-1)
            rel = (g_ad - g_fd).abs() / (g_ad.abs() + g_fd.abs() + 1e-8)
            if rel.numel():
                worst = max(worst, float(rel.max()))
    return worst


# ---------------------------------------------------------------------------
# Adam with global-norm clipping
# ---------------------------------------------------------------------------


@dataclass
class AdamMoments:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamMoments":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def clip_by_global_norm(grads: Sequence[torch.Tensor], clip: float | None) -> tuple[list[torch.Tensor], float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if clip is None or norm <= clip or norm == 0.0:
        return list(grads), norm
    scale = clip / norm
    return [g * scale for g in grads], norm


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    moments: AdamMoments,
    lr: float,
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    clip: float | None = 100.0,
) -> float:
    """In-place Adam update of ``params``; returns the pre-clip global gradient norm."""
    if len(params) != len(grads) or len(params) != len(moments.m):
        raise ValueError("params, grads and moments must have equal length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: param {tuple(p.shape)} vs grad {tuple(g.shape)}")
    grads, norm = clip_by_global_norm(grads, clip)
    moments.t += 1
    bc1 = 1.0 - beta1**moments.t
    bc2 = 1.0 - beta2**moments.t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, moments.m, moments.v):
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return norm


class Adam:
    """Stateful wrapper over :func:`adam_step` for a fixed parameter list."""

    def __init__(self, params: Iterable[torch.Tensor], lr: float, clip: float | None = 100.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.clip = clip
        self.moments = AdamMoments.zeros_like(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        grads = [torch.zeros_like(p) if p.grad is None else p.grad for p in self.params]
        return adam_step(self.params, grads, self.moments, self.lr, clip=self.clip)
