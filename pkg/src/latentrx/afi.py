"""Adaptive feature integration: value/interval embeddings plus FM pairwise interactions."""

from __future__ import annotations

import torch
import torch.nn as nn


def fm(E: torch.Tensor) -> torch.Tensor:
    """Pairwise interaction pooling over the feature axis (-2).

    ``0.5 * ((sum_d e_d)^2 - sum_d e_d^2)`` which equals ``sum_{i<j} e_i * e_j``.
    """
    s = E.sum(-2)
    return 0.5 * (s * s - (E * E).sum(-2))


def _zero_fill(o: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    # where() rather than o*m so NaN or junk in missing slots cannot leak
    return torch.where(m > 0, o, torch.zeros((), dtype=o.dtype))


class AFI(nn.Module):
    """Encodes (o_t, delta_t, m_t) into a width-2k vector in (0, 1)."""

    def __init__(self, D: int, k: int = 32, mask_channel: bool = False, log_delta: bool = False, init_scale: float = 0.1):
        super().__init__()
        self.D, self.k = D, k
        self.mask_channel = mask_channel
        self.log_delta = log_delta
        self.W_o = nn.Parameter(init_scale * torch.randn(D, k) / k**0.5)
        self.W_delta = nn.Parameter(0.1 * init_scale * torch.randn(D, k) / k**0.5)
        self.W_m = nn.Parameter(init_scale * torch.randn(D, k) / k**0.5) if mask_channel else None
        self.linear = nn.Linear(D, 2 * k)

    @property
    def out_dim(self) -> int:
        return 2 * self.k

    def _check(self, o, delta, m):
        if o.shape[-1] != self.D or delta.shape != o.shape or m.shape != o.shape:
            raise ValueError(f"expected matching (..., {self.D}) inputs, got {tuple(o.shape)}, {tuple(delta.shape)}, {tuple(m.shape)}")

    def embed(self, o: torch.Tensor, delta: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        """Per-feature joint embedding ``[E_o | E_delta]`` of shape (..., D, 2k)."""
        self._check(o, delta, m)
        o = _zero_fill(o, m)
        if self.log_delta:
            delta = torch.log1p(delta)
        e_o = o.unsqueeze(-1) * self.W_o
        if self.W_m is not None:
            e_o = e_o + m.unsqueeze(-1) * self.W_m
        e_d = delta.unsqueeze(-1) * self.W_delta
        return torch.cat([e_o, e_d], -1)

    def forward(self, o: torch.Tensor, delta: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        E = self.embed(o, delta, m)
        return torch.sigmoid(self.linear(_zero_fill(o, m)) + fm(E))


class PlainEncoder(nn.Module):
    """Ablation baseline: zero-imputed values only, no intervals, no mask."""

    def __init__(self, D: int, k: int = 32, hidden: int = 128):
        super().__init__()
        self.D, self.k = D, k
        self.net = nn.Sequential(nn.Linear(D, hidden), nn.LayerNorm(hidden), nn.SiLU(), nn.Linear(hidden, 2 * k))

    @property
    def out_dim(self) -> int:
        return 2 * self.k

    def forward(self, o: torch.Tensor, delta: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(_zero_fill(o, m)))


def afi_encode(o: torch.Tensor, delta: torch.Tensor, m: torch.Tensor, params: AFI) -> torch.Tensor:
    return params(o, delta, m)


def make_encoder(kind: str, D: int, k: int, mask_channel: bool = False, log_delta: bool = False) -> nn.Module:
    if kind == "afi":
        return AFI(D, k, mask_channel=mask_channel, log_delta=log_delta)
    if kind == "plain":
        return PlainEncoder(D, k)
    raise ValueError(f"unknown encoder kind {kind!r}")
