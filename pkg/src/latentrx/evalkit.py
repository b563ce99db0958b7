"""Off-policy evaluation and analysis tables."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import stats as sps

from . import numkit
from .episodes import ActionSchema, Episode, NormStats

log = logging.getLogger(__name__)

EPS_FLOOR = 1e-4


# ---------------------------------------------------------------------------
# behavior policy
# ---------------------------------------------------------------------------


@dataclass
class BehaviorConfig:
    hidden: int = 16
    lr: float = 3e-3
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.1
    eps: float = EPS_FLOOR
    seed: int = 0


class BehaviorNet(nn.Module):
    def __init__(self, D: int, A: int, hidden: int = 16):
        super().__init__()
        self.D, self.A = D, A
        self.lstm = nn.LSTM(2 * D, hidden, batch_first=True)
        self.out = nn.Linear(hidden, A)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y, _ = self.lstm(x)
        return self.out(y)


def carry_forward(obs: np.ndarray) -> np.ndarray:
    """Last observed value per feature along axis 0; 0 before the first observation."""
    out = np.zeros_like(obs)
    last = np.zeros(obs.shape[1:], dtype=obs.dtype)
    for t in range(obs.shape[0]):
        last = np.where(np.isnan(obs[t]), last, obs[t])
        out[t] = last
    return out


def _behavior_inputs(episodes: Sequence[Episode], stats: NormStats):
    N = len(episodes)
    L = max(len(e) for e in episodes)
    D = episodes[0].n_features
    x = np.zeros((N, L, 2 * D), np.float32)
    y = np.zeros((N, L), np.int64)
    valid = np.zeros((N, L), bool)
    for i, ep in enumerate(episodes):
        T = len(ep)
        m = ep.masks
        x[i, :T, :D] = carry_forward((ep.obs - stats.mean) / stats.std)
        x[i, :T, D:] = m
        y[i, :T] = ep.actions
        valid[i, :T] = True
    dt = numkit.dtype()
    return torch.as_tensor(x, dtype=dt), torch.as_tensor(y), torch.as_tensor(valid)


@dataclass
class BehaviorPolicy:
    net: BehaviorNet
    stats: NormStats
    eps: float = EPS_FLOOR
    val_accuracy: float = float("nan")
    val_loss: float = float("nan")
    epochs: int = 0
    degenerate: bool = False

    @torch.no_grad()
    def probs(self, episodes: Sequence[Episode], chunk: int = 512) -> list[np.ndarray]:
        """Floored per-step action distributions ``(T, A)`` for each episode."""
        out: list[np.ndarray] = []
        A = self.net.A
        for b in range(0, len(episodes), chunk):
            part = episodes[b : b + chunk]
            x, _, _ = _behavior_inputs(part, self.stats)
            p = torch.softmax(self.net(x), -1).numpy().astype(float)
            # mixing keeps every entry >= eps and each row normalized
            p = (1.0 - A * self.eps) * p + self.eps
            out.extend(p[i, : len(ep)] for i, ep in enumerate(part))
        return out

    def episode_probs(self, ep: Episode) -> np.ndarray:
        return self.probs([ep])[0]


def fit_behavior(episodes: Sequence[Episode], A: int, cfg: BehaviorConfig | None = None, stats: NormStats | None = None) -> BehaviorPolicy:
    """Cross-entropy training with early stopping on a held-out split."""
    cfg = cfg or BehaviorConfig()
    if len(episodes) < 2:
        raise ValueError("need at least two episodes to fit a behavior policy")
    all_actions = np.concatenate([ep.actions for ep in episodes])
    degenerate = np.unique(all_actions).size == 1
    if degenerate:
        warnings.warn("logged actions contain a single class; behavior policy is degenerate", RuntimeWarning, stacklevel=2)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    stats = stats or NormStats.fit(episodes)
    order = rng.permutation(len(episodes))
    n_val = max(1, int(round(cfg.val_fraction * len(episodes))))
    val_eps = [episodes[i] for i in order[:n_val]]
    tr_eps = [episodes[i] for i in order[n_val:]]
    xt, yt, vt = _behavior_inputs(tr_eps, stats)
    xv, yv, vv = _behavior_inputs(val_eps, stats)
    net = BehaviorNet(episodes[0].n_features, A, cfg.hidden)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)

    def evaluate():
        with torch.no_grad():
            logits = net(xv)
            loss = F.cross_entropy(logits[vv], yv[vv])
            acc = (logits[vv].argmax(-1) == yv[vv]).to(torch.float64).mean()
        return float(loss), float(acc)

    best = (math.inf, float("nan"))
    best_state = {k: v.clone() for k, v in net.state_dict().items()}
    stale = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        perm = torch.as_tensor(rng.permutation(len(tr_eps)))
        for b in range(0, len(perm), cfg.batch_size):
            idx = perm[b : b + cfg.batch_size]
            logits = net(xt[idx])
            v = vt[idx]
            loss = F.cross_entropy(logits[v], yt[idx][v])
            opt.zero_grad()
            loss.backward()
            opt.step()
        val_loss, val_acc = evaluate()
        if val_loss < best[0] - 1e-6:
            best = (val_loss, val_acc)
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    net.load_state_dict(best_state)
    net.eval()
    log.info("behavior policy: %d epochs, val loss %.4f, val accuracy %.3f", epoch, best[0], best[1])
    return BehaviorPolicy(net, stats, cfg.eps, val_accuracy=best[1], val_loss=best[0], epochs=epoch, degenerate=degenerate)


def total_variation(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(-1)


# ---------------------------------------------------------------------------
# importance sampling
# ---------------------------------------------------------------------------


def importance_ratios(actions: np.ndarray, pi: np.ndarray, pi_b: np.ndarray, clip: tuple[float, float] = (1e-4, 1e2)) -> np.ndarray:
    """Cumulative clipped ratios ``rho_{1:t}`` for logged ``actions`` given (T, A) probability tables."""
    actions = np.asarray(actions, dtype=np.int64)
    rows = np.arange(len(actions))
    num = np.asarray(pi)[rows, actions]
    den = np.maximum(np.asarray(pi_b)[rows, actions], EPS_FLOOR)
    step = np.clip(num / den, clip[0], clip[1])
    return np.cumprod(step)


def reward_weights(rho: np.ndarray) -> np.ndarray:
    """Weight of reward ``r_t``: the ratios of actions taken before step ``t``.

    Step ``t`` stores the reward for arriving there, so it depends on actions
    ``0..t-1`` only; the final logged action never influences a reward.
    """
    rho = np.asarray(rho, dtype=float)
    return np.concatenate([[1.0], rho[:-1]]) if len(rho) else rho


@dataclass
class OPEReport:
    WIS: float
    WPDIS: float
    CWPDIS: float
    ESS: float
    N: int
    weight_max: float
    weight_mean: float
    clipped_fraction: float
    gamma: float
    clip_low: float = 1e-4
    clip_high: float = 1e2

    def to_dict(self) -> dict:
        return asdict(self)


def _pad(seqs: Sequence[np.ndarray], fill: str | float) -> np.ndarray:
    L = max(len(s) for s in seqs)
    out = np.zeros((len(seqs), L))
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        if len(s) < L:
            out[i, len(s) :] = (s[-1] if len(s) else 0.0) if fill == "hold" else fill
    return out


def ope_estimates(rewards: Sequence[np.ndarray], weights: Sequence[np.ndarray], gamma: float, clipped_fraction: float = 0.0, clip: tuple[float, float] = (1e-4, 1e2)) -> OPEReport:
    """WIS, WPDIS, CWPDIS and ESS from per-trajectory reward and weight sequences.

    ``weights[i][t]`` is the cumulative importance weight applied to
    ``rewards[i][t]``; the last entry is the full-trajectory weight.

    * WPDIS: per-step self-normalization over trajectories still present at ``t``
      (absent steps carry weight 0).
    * CWPDIS: per-step self-normalization over all trajectories, where a finished
      trajectory keeps its final weight and earns reward 0 (absorbing state).
    """
    if len(rewards) == 0 or len(rewards) != len(weights):
        raise ValueError("need N >= 1 trajectories with matching weights")
    for r, w in zip(rewards, weights):
        if len(r) != len(w) or len(r) == 0:
            raise ValueError("reward and weight sequences must be non-empty and equal length")
    N = len(rewards)
    rho = np.array([float(w[-1]) for w in weights])
    if not np.all(np.isfinite(rho)) or rho.sum() <= 0:
        raise ValueError("importance weights are all zero; estimator undefined")
    disc = [gamma ** np.arange(len(r)) for r in rewards]
    G = np.array([float((np.nan_to_num(r) * d).sum()) for r, d in zip(rewards, disc)])
    wis = float((rho * G).sum() / rho.sum())
    ess = float(rho.sum() ** 2 / (rho**2).sum())

    R = _pad([np.nan_to_num(np.asarray(r, float)) for r in rewards], 0.0)
    W0 = _pad([np.asarray(w, float) for w in weights], 0.0)
    Wh = _pad([np.asarray(w, float) for w in weights], "hold")
    g = gamma ** np.arange(R.shape[1])

    def per_step(W):
        den = W.sum(0)
        num = (W * R).sum(0)
        term = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        return float((g * term).sum())

    return OPEReport(
        WIS=wis,
        WPDIS=per_step(W0),
        CWPDIS=per_step(Wh),
        ESS=ess,
        N=N,
        weight_max=float(rho.max()),
        weight_mean=float(rho.mean()),
        clipped_fraction=float(clipped_fraction),
        gamma=gamma,
        clip_low=clip[0],
        clip_high=clip[1],
    )


def evaluate_policy(
    episodes: Sequence[Episode],
    pi_probs: Callable[[Episode], np.ndarray] | Sequence[np.ndarray],
    pi_b_probs: Sequence[np.ndarray],
    gamma: float,
    clip: tuple[float, float] = (1e-4, 1e2),
) -> OPEReport:
    """End-to-end OPE: evaluated and behavior probability tables -> report."""
    rewards, weights, step_ratios = [], [], []
    for i, ep in enumerate(episodes):
        p = pi_probs(ep) if callable(pi_probs) else pi_probs[i]
        pb = pi_b_probs[i]
        rows = np.arange(len(ep))
        raw = np.asarray(p)[rows, ep.actions] / np.maximum(np.asarray(pb)[rows, ep.actions], EPS_FLOOR)
        step_ratios.append(raw[:-1])
        rho = importance_ratios(ep.actions, p, pb, clip)
        rewards.append(np.nan_to_num(ep.rewards))
        weights.append(reward_weights(rho))
    raw_all = np.concatenate(step_ratios) if step_ratios else np.zeros(0)
    clipped = float(np.mean((raw_all < clip[0]) | (raw_all > clip[1]))) if raw_all.size else 0.0
    return ope_estimates(rewards, weights, gamma, clipped, clip)


def mean_step_ratio(episodes: Sequence[Episode], pi_probs: Sequence[np.ndarray], pi_b_probs: Sequence[np.ndarray]) -> float:
    vals = [np.asarray(p)[np.arange(len(ep)), ep.actions] / np.asarray(pb)[np.arange(len(ep)), ep.actions] for ep, p, pb in zip(episodes, pi_probs, pi_b_probs)]
    return float(np.concatenate(vals).mean())


# ---------------------------------------------------------------------------
# mortality vs return
# ---------------------------------------------------------------------------


@dataclass
class MortalityCurve:
    centers: np.ndarray
    mortality: np.ndarray
    counts: np.ndarray
    correlation: float = float("nan")
    p_value: float = float("nan")

    def estimate(self, expected_return: float) -> float:
        """Mortality at ``expected_return`` by linear interpolation between bin centres."""
        return float(np.interp(expected_return, self.centers, self.mortality))

    def rows(self) -> list[dict]:
        return [{"return_center": float(c), "mortality": float(m), "count": int(n)} for c, m, n in zip(self.centers, self.mortality, self.counts)]


def mortality_vs_return(returns: np.ndarray, died: np.ndarray, bins: int = 10) -> MortalityCurve:
    """Equal-count bins of returns and per-bin empirical mortality.

    Ties can leave quantile bins empty; an empty bin is absorbed by its
    neighbours (those returns already fall there).
    """
    returns = np.asarray(returns, dtype=float)
    died = np.asarray(died, dtype=float)
    if bins < 2:
        raise ValueError("need at least 2 bins")
    if len(returns) != len(died) or len(returns) == 0:
        raise ValueError("returns and outcomes must be non-empty and equal length")
    order = np.argsort(returns, kind="stable")
    r, d = returns[order], died[order]
    edges = np.quantile(r, np.linspace(0, 1, bins + 1))
    idx = np.clip(np.searchsorted(edges, r, side="right") - 1, 0, bins - 1)
    groups = [np.flatnonzero(idx == b) for b in range(bins)]
    merged: list[np.ndarray] = []
    for g in groups:
        if g.size == 0:
            continue
        merged.append(g)
    centers = np.array([r[g].mean() for g in merged])
    mort = np.array([d[g].mean() for g in merged])
    counts = np.array([g.size for g in merged])
    corr, p = float("nan"), float("nan")
    if len(centers) >= 3 and np.std(mort) > 0 and np.std(centers) > 0:
        res = sps.pearsonr(centers, mort)
        corr, p = float(res[0]), float(res[1])
    return MortalityCurve(centers, mort, counts, corr, p)


# ---------------------------------------------------------------------------
# dose and action tables
# ---------------------------------------------------------------------------

STRATA = (("low", -math.inf, 5.0), ("mid", 5.0, 14.0), ("high", 14.0, math.inf))


def stratum(severity: float) -> str:
    """Low (<=5), Mid (6-14), High (>=15) on the integer SOFA scale."""
    for name, lo, hi in STRATA:
        if lo < severity <= hi:
            return name
    raise AssertionError("unreachable")


def episode_severity(ep: Episode, index: int = 0) -> float:
    """First observed value of the severity feature (carried backward otherwise)."""
    col = ep.obs[:, index]
    obs = col[~np.isnan(col)]
    if obs.size == 0:
        raise ValueError(f"episode {ep.id}: severity feature never observed")
    return float(obs[0])


def dose_difference_table(
    episodes: Sequence[Episode],
    recommended: Sequence[np.ndarray],
    schema: ActionSchema,
    severity_index: int = 0,
    bin_width: float = 1.0,
) -> list[dict]:
    """Per treatment dimension and stratum: mean recommended-minus-logged level per episode vs. mortality."""
    rows = []
    table = schema.level_table()
    for j, dim in enumerate(schema.dim_names):
        buckets: dict[tuple[str, float], list[int]] = {}
        for ep, rec in zip(episodes, recommended):
            diff = float((table[np.asarray(rec, dtype=np.int64), j] - table[ep.actions, j]).mean())
            key = (stratum(episode_severity(ep, severity_index)), float(np.round(diff / bin_width) * bin_width))
            buckets.setdefault(key, []).append(1 if ep.outcome == "deceased" else 0)
        for name, _, _ in STRATA:
            for (s, diff), outs in sorted(buckets.items(), key=lambda kv: (kv[0][0], kv[0][1])):
                if s != name:
                    continue
                rows.append({"dimension": dim, "stratum": s, "dose_difference": diff, "mortality": float(np.mean(outs)), "count": len(outs)})
    return rows


def action_heatmap(actions: np.ndarray, schema: ActionSchema) -> np.ndarray:
    """Normalized joint-action frequencies shaped by the schema's level grid."""
    actions = np.asarray(actions, dtype=np.int64).ravel()
    counts = np.bincount(actions, minlength=schema.cardinality).astype(float)
    total = counts.sum()
    freq = counts / total if total > 0 else counts
    return freq.reshape(schema.levels)


def heatmaps_by_stratum(episodes: Sequence[Episode], actions: Sequence[np.ndarray], schema: ActionSchema, severity_index: int = 0) -> dict[str, np.ndarray]:
    """Heatmaps per step-level severity stratum plus ``all``."""
    per: dict[str, list[np.ndarray]] = {"low": [], "mid": [], "high": [], "all": []}
    for ep, acts in zip(episodes, actions):
        sev = ep.obs[:, severity_index]
        last = episode_severity(ep, severity_index)
        for t, a in enumerate(np.asarray(acts)):
            if not np.isnan(sev[t]):
                last = float(sev[t])
            per[stratum(last)].append(np.array([a]))
        per["all"].append(np.asarray(acts))
    return {k: action_heatmap(np.concatenate(v) if v else np.zeros(0, np.int64), schema) for k, v in per.items()}


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------


def write_csv(path: str | Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({c: _fmt(row[c]) for c in columns})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def heatmap_rows(maps: dict[str, np.ndarray], schema: ActionSchema) -> list[dict]:
    rows = []
    for name, grid in maps.items():
        flat = grid.ravel()
        for a in range(schema.cardinality):
            rows.append({"stratum": name, "action": a, "levels": "-".join(map(str, schema.decode(a))), "frequency": float(flat[a])})
    return rows


def write_json(path: str | Path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")
