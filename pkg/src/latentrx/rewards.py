"""Intermittent and terminal reward functions for the sepsis and ventilation tasks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .episodes import Episode


@dataclass(frozen=True)
class RewardConfig:
    # defaults are configuration choices: clinical weights are not published
    a_sep: float = -0.025
    b_sep: float = -0.125
    c_sep: float = -2.0
    a_vent: float = 0.5
    b_vent: float = 0.5
    r_ter: float = 15.0
    gamma: float = 0.99
    sofa_index: int = 0
    lactate_index: int = 1
    spo2_index: int = 0
    mbp_index: int = 1

    def __post_init__(self) -> None:
        if not self.r_ter > 0:
            raise ValueError("r_ter must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    def validate_indices(self, schema: str, D: int) -> None:
        idx = (self.sofa_index, self.lactate_index) if schema == "sepsis" else (self.spo2_index, self.mbp_index)
        if any(not 0 <= i < D for i in idx):
            raise ValueError(f"reward feature indices {idx} invalid for D={D}")


def _require(x, name: str) -> float:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        raise ValueError(f"missing required feature {name!r} for reward labeling")
    return float(x)


def sepsis_reward(s_t, s_next, cfg: RewardConfig) -> float:
    """``s_t`` and ``s_next`` are (SOFA, lactate) pairs."""
    sofa_t, lactate_t = _require(s_t[0], "sofa"), _require(s_t[1], "lactate")
    sofa_next, lactate_next = _require(s_next[0], "sofa"), _require(s_next[1], "lactate")
    same = 1.0 if (sofa_next == sofa_t and sofa_next > 0) else 0.0
    return cfg.a_sep * same + cfg.b_sep * (sofa_next - sofa_t) + cfg.c_sep * math.tanh(lactate_next - lactate_t)


def _band(x: float, lo: float, hi: float) -> float:
    return 1.0 if lo <= x <= hi else -0.5


def vent_reward(s_t, s_next, cfg: RewardConfig) -> float:
    """``s_t`` and ``s_next`` are (SpO2, MBP) pairs; only the next state enters."""
    spo2_next, mbp_next = _require(s_next[0], "spo2"), _require(s_next[1], "mbp")
    return cfg.a_vent * _band(spo2_next, 94.0, 98.0) + cfg.b_vent * _band(mbp_next, 70.0, 80.0)


def apply_terminal(rewards: np.ndarray, outcome: str, cfg: RewardConfig) -> np.ndarray:
    out = np.array(rewards, dtype=float, copy=True)
    if len(out) == 0 or outcome == "censored":
        return out
    out[-1] = cfg.r_ter if outcome == "survived" else -cfg.r_ter
    return out


def intermittent_rewards(proxy: np.ndarray, schema: str, cfg: RewardConfig) -> np.ndarray:
    """Reward sequence from ground-truth proxy values, ``proxy[t] = (feat_a, feat_b)``.

    Step ``t`` carries the reward for arriving there from step ``t-1``; step 0
    has no predecessor and gets 0.
    """
    proxy = np.asarray(proxy, dtype=float)
    T = len(proxy)
    r = np.zeros(T)
    for t in range(1, T):
        fn = sepsis_reward if schema == "sepsis" else vent_reward
        r[t] = fn(proxy[t - 1], proxy[t], cfg)
    return r


def label_episode(ep: Episode, proxy: np.ndarray, cfg: RewardConfig) -> Episode:
    """Attach intermittent + terminal rewards computed from ground-truth proxies."""
    if len(proxy) != len(ep):
        raise ValueError("proxy sequence length differs from episode length")
    r = intermittent_rewards(proxy, ep.schema, cfg)
    r = apply_terminal(r, ep.outcome, cfg)
    return ep.with_rewards(r)


def label_from_observations(ep: Episode, cfg: RewardConfig) -> Episode:
    """Label using last-observed carry-forward of the designated proxy features."""
    ia, ib = (cfg.sofa_index, cfg.lactate_index) if ep.schema == "sepsis" else (cfg.spo2_index, cfg.mbp_index)
    proxy = np.full((len(ep), 2), np.nan)
    last = [np.nan, np.nan]
    for t in range(len(ep)):
        for j, i in enumerate((ia, ib)):
            v = ep.obs[t, i]
            if not np.isnan(v):
                last[j] = v
            proxy[t, j] = last[j]
    # steps before the first observation of a proxy borrow the first observed value
    for j in range(2):
        col = proxy[:, j]
        obs_idx = np.flatnonzero(~np.isnan(col))
        if obs_idx.size == 0:
            raise ValueError(f"episode {ep.id}: proxy feature never observed")
        col[: obs_idx[0]] = col[obs_idx[0]]
    if ep.schema == "sepsis":
        proxy[:, 0] = np.round(proxy[:, 0])
    return label_episode(ep, proxy, cfg)
