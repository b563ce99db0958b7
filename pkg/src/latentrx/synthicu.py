"""Synthetic ICU simulator with linear-Gaussian latent dynamics and informative missingness.

A latent disease state ``x`` (width m) evolves as ``x' = F x + c + B[:, a] + noise``.
A severity scalar ``sqrt(sum w_i x_i^2)`` absorbs the episode (death above one
threshold, discharge below another), shortens the gap to the next measurement and
raises every feature's probability of being measured.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .episodes import ActionSchema, Episode, schema_for
from .rewards import RewardConfig, label_episode

SEPSIS_FEATURES = ["sofa", "lactate", "fluid_deficit", "vasoplegia", "map_proxy", "hr", "resp", "temp", "creat", "bili", "plt", "wbc"]
VENT_FEATURES = ["spo2", "mbp", "recruitment", "oxygenation", "fluid_deficit", "hr", "resp", "temp", "paco2", "ph", "lactate", "gcs"]


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class SimConfig:
    schema: str = "sepsis"
    m: int = 6
    D: int = 12
    horizon: int = 60
    seed: int = 0
    transition: list[list[float]] = field(default_factory=list)  # (m, m)
    drift: list[float] = field(default_factory=list)  # (m,)
    # per action dimension: latent component it acts on and effect per level
    effect_targets: list[int] = field(default_factory=list)
    effect_per_level: list[float] = field(default_factory=list)
    process_noise: float = 0.3
    init_mean: list[float] = field(default_factory=list)
    init_std: float = 0.4
    severity_weights: list[float] = field(default_factory=list)
    death_threshold: float = 2.3
    discharge_threshold: float = 0.8
    loadings: list[list[float]] = field(default_factory=list)  # (D, m); rows 0-1 unused (proxies)
    obs_offset: list[float] = field(default_factory=list)
    obs_noise: list[float] = field(default_factory=list)
    # missingness: p_obs = sigmoid(base_logit_d + coupling * (severity - severity_ref))
    miss_base_logit: list[float] = field(default_factory=list)
    miss_coupling: float = 1.0
    severity_ref: float = 1.5
    p_obs_clip: float = 0.01
    gap_mean_hours: float = 4.0
    gap_coupling: float = 0.5
    gap_floor_hours: float = 0.25
    sofa_gain: float = 5.0

    def __post_init__(self) -> None:
        if not self.transition:
            self._fill_defaults()
        self.validate()

    @property
    def action_schema(self) -> ActionSchema:
        return schema_for(self.schema)

    @property
    def A(self) -> int:
        return self.action_schema.cardinality

    @property
    def feature_names(self) -> list[str]:
        names = SEPSIS_FEATURES if self.schema == "sepsis" else VENT_FEATURES
        return list(names[: self.D]) + [f"f{d}" for d in range(len(names), self.D)]

    @property
    def clinician_features(self) -> list[int]:
        """Observed features that carry each action dimension's target component."""
        return [2 + j for j in range(len(self.action_schema.levels))]

    def _fill_defaults(self) -> None:
        m, D = self.m, self.D
        if m < 6 or D < 6:
            raise ValueError("default dynamics need m >= 6 and D >= 6")
        F = 0.93 * np.eye(m)
        # circulatory components (0, 1) damage the organ components (2..)
        F[2, 0] = F[3, 1] = 0.06
        F[4, 0] = F[4, 1] = 0.04
        F[5, 2] = F[5, 3] = 0.04
        drift = np.zeros(m)
        drift[:4] = [0.15, 0.15, 0.04, 0.04]
        init = np.zeros(m)
        init[:6] = [0.9, 0.75, 0.375, 0.375, 0.225, 0.225]
        w = np.full(m, 0.4)
        w[:4] = [1.0, 1.0, 0.6, 0.6]
        schema = schema_for(self.schema)
        if self.schema == "sepsis":
            targets, per_level = [0, 1], [0.15, 0.15]
        else:
            # peep, fio2, tidal volume; per-level effect scaled to the level count
            targets, per_level = [2, 3, 0], [0.3, 0.15, 0.15]
            drift[:4] = [0.15, 0.0, 0.15, 0.15]
            init[:4] = [0.6, 0.2, 0.75, 0.75]
        rng = np.random.default_rng(1234)
        L = np.zeros((D, m))
        for j, tgt in enumerate(targets):
            L[2 + j, tgt] = 1.0
        for d in range(2 + len(targets), D):
            L[d] = rng.normal(0.0, 0.6, size=m)
        noise = np.full(D, 0.4)
        noise[0] = 0.0
        noise[1] = 0.3 if self.schema == "sepsis" else 2.0
        if self.schema == "vent":
            noise[0] = 0.5
        base = np.full(D, -0.5)
        base[0] = 4.0
        for j in range(len(targets)):
            base[2 + j] = 4.0
        self.transition = F.tolist()
        self.drift = drift.tolist()
        self.effect_targets = list(targets)
        self.effect_per_level = list(per_level)
        self.init_mean = init.tolist()
        self.severity_weights = w.tolist()
        self.loadings = L.tolist()
        self.obs_offset = np.zeros(D).tolist()
        self.obs_noise = noise.tolist()
        self.miss_base_logit = base.tolist()
        assert len(schema.levels) == len(targets)

    def validate(self) -> None:
        F = np.asarray(self.transition)
        if F.shape != (self.m, self.m):
            raise ValueError("transition must be m x m")
        rho = max(abs(np.linalg.eigvals(F)))
        if not rho < 1:
            raise ValueError(f"unstable dynamics: spectral radius {rho:.3f} >= 1")
        if not self.death_threshold > self.discharge_threshold:
            raise ValueError("death threshold must exceed discharge threshold")
        if not 0 < self.p_obs_clip < 0.5:
            raise ValueError("p_obs_clip must lie in (0, 0.5) so probabilities stay inside (0, 1)")
        if np.asarray(self.loadings).shape != (self.D, self.m):
            raise ValueError("loadings must be D x m")
        if len(self.effect_targets) != len(self.action_schema.levels):
            raise ValueError("one effect target per action dimension is required")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        return cls(**d)

    # -- derived arrays -------------------------------------------------------

    def action_effects(self) -> np.ndarray:
        """(A, m) latent displacement of every action."""
        schema = self.action_schema
        levels = schema.level_table()
        B = np.zeros((schema.cardinality, self.m))
        for j, (tgt, k) in enumerate(zip(self.effect_targets, self.effect_per_level)):
            B[:, tgt] -= k * levels[:, j]
        return B

    def severity(self, x: np.ndarray) -> np.ndarray:
        w = np.asarray(self.severity_weights)
        return np.sqrt((w * x * x).sum(-1))

    def proxies(self, x: np.ndarray) -> np.ndarray:
        """Noise-free reward proxies, shape (..., 2)."""
        sev = self.severity(x)
        if self.schema == "sepsis":
            sofa = np.clip(np.round(self.sofa_gain * sev), 0, 24)
            lactate = 1.0 + 1.5 * np.log1p(np.exp(x[..., 0] + x[..., 1] - 0.5))
            return np.stack([sofa, lactate], -1)
        spo2 = np.clip(96.0 - 2.5 * x[..., 3], 60.0, 100.0)
        mbp = 75.0 - 6.0 * x[..., 1]
        return np.stack([spo2, mbp], -1)

    def obs_probability(self, sev: np.ndarray) -> np.ndarray:
        p = _sigmoid(np.asarray(self.miss_base_logit)[None, :] + self.miss_coupling * (sev[:, None] - self.severity_ref))
        return np.clip(p, self.p_obs_clip, 1.0 - self.p_obs_clip)

    def gap_mean(self, sev: np.ndarray) -> np.ndarray:
        return self.gap_mean_hours * np.exp(-self.gap_coupling * (sev - self.severity_ref))


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------


@dataclass
class SimStep:
    """What a policy sees for the currently active episodes."""

    index: np.ndarray  # episode ids of the active rows
    t: int  # step counter
    times: np.ndarray  # (n,)
    obs: np.ndarray  # (n, D) NaN = missing
    latent: np.ndarray  # (n, m) ground truth, for oracle policies only


class SimPolicy(Protocol):
    def reset(self, n: int) -> None: ...

    def act(self, step: SimStep, rng: np.random.Generator) -> np.ndarray: ...


class NullPolicy:
    def reset(self, n: int) -> None:
        pass

    def act(self, step: SimStep, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(len(step.index), dtype=np.int64)


class RandomPolicy:
    def __init__(self, A: int):
        self.A = A

    def reset(self, n: int) -> None:
        pass

    def act(self, step: SimStep, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.A, size=len(step.index))


class OracleSeverityPolicy:
    """Reads the true latent state and doses each dimension to cancel the expected drift."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.schema = cfg.action_schema

    def reset(self, n: int) -> None:
        pass

    def act(self, step: SimStep, rng: np.random.Generator) -> np.ndarray:
        F = np.asarray(self.cfg.transition)
        pred = step.latent @ F.T + np.asarray(self.cfg.drift)
        levels = []
        for j, (tgt, k) in enumerate(zip(self.cfg.effect_targets, self.cfg.effect_per_level)):
            lv = np.clip(np.round(pred[:, tgt] / k), 0, self.schema.levels[j] - 1)
            levels.append(lv.astype(np.int64))
        return _encode_levels(np.stack(levels, -1), self.schema.levels)


def _encode_levels(levels: np.ndarray, cards: Sequence[int]) -> np.ndarray:
    idx = np.zeros(levels.shape[0], dtype=np.int64)
    for j, n in enumerate(cards):
        idx = idx * n + levels[:, j]
    return idx


class ClinicianPolicy:
    """Stochastic observation-driven logging policy with known action probabilities.

    Each action dimension's level follows a discretized Gaussian around a target
    level that is linear in the last observed value of one feature; with weight
    ``explore`` the joint action is instead drawn uniformly.
    """

    def __init__(self, cfg: SimConfig, spread: float = 1.0, shift: float = 0.0, bias: float = -0.3, fallback: float = 1.0, explore: float = 0.0):
        if not 0.0 <= explore <= 1.0:
            raise ValueError("explore must lie in [0, 1]")
        self.cfg = cfg
        self.explore = explore
        self.schema = cfg.action_schema
        self.spread = spread
        self.shift = shift
        self.bias = bias
        self.fallback = fallback
        self.features = cfg.clinician_features
        F = np.asarray(cfg.transition)
        self._slope = [F[t, t] / k for t, k in zip(cfg.effect_targets, cfg.effect_per_level)]
        self._icept = [cfg.drift[t] / k + bias + shift for t, k in zip(cfg.effect_targets, cfg.effect_per_level)]
        self._carry: np.ndarray | None = None

    def level_probs(self, carried: np.ndarray) -> list[np.ndarray]:
        """Per-dimension level distributions given carried feature values (n, n_dims)."""
        out = []
        for j, n in enumerate(self.schema.levels):
            mu = self._icept[j] + self._slope[j] * carried[:, j]
            lv = np.arange(n)[None, :]
            logits = -((lv - mu[:, None]) ** 2) / (2 * self.spread**2)
            logits -= logits.max(1, keepdims=True)
            p = np.exp(logits)
            out.append(p / p.sum(1, keepdims=True))
        return out

    def probs(self, carried: np.ndarray) -> np.ndarray:
        """Joint (n, A) action distribution."""
        per_dim = self.level_probs(carried)
        joint = per_dim[0]
        for p in per_dim[1:]:
            joint = (joint[:, :, None] * p[:, None, :]).reshape(joint.shape[0], -1)
        if self.explore:
            joint = (1.0 - self.explore) * joint + self.explore / joint.shape[1]
        return joint

    def carry_forward(self, obs: np.ndarray) -> np.ndarray:
        """Carried values of the policy features along one episode's (T, D) observations."""
        T = obs.shape[0]
        carried = np.empty((T, len(self.features)))
        last = np.full(len(self.features), self.fallback)
        for t in range(T):
            cur = obs[t, self.features]
            last = np.where(np.isnan(cur), last, cur)
            carried[t] = last
        return carried

    def episode_probs(self, ep: Episode) -> np.ndarray:
        return self.probs(self.carry_forward(ep.obs))

    def reset(self, n: int) -> None:
        self._carry = np.full((n, len(self.features)), self.fallback)

    def act(self, step: SimStep, rng: np.random.Generator) -> np.ndarray:
        cur = step.obs[:, self.features]
        prev = self._carry[step.index]
        carried = np.where(np.isnan(cur), prev, cur)
        self._carry[step.index] = carried
        p = self.probs(carried)
        u = rng.random(len(step.index))
        return np.minimum((p.cumsum(1) < u[:, None]).sum(1), p.shape[1] - 1).astype(np.int64)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


@dataclass
class SimResult:
    episodes: list[Episode]
    expected_return: float
    return_se: float
    mortality: float
    censored_fraction: float
    latents: list[np.ndarray]  # per-episode (T, m) ground-truth states
    returns: np.ndarray

    def summary(self) -> dict:
        return {
            "n": len(self.episodes),
            "expected_return": self.expected_return,
            "return_se": self.return_se,
            "mortality": self.mortality,
            "censored_fraction": self.censored_fraction,
            "mean_length": float(np.mean([len(e) for e in self.episodes])) if self.episodes else 0.0,
        }


def discounted_return(rewards: np.ndarray, gamma: float) -> float:
    r = np.nan_to_num(np.asarray(rewards, dtype=float))
    return float((r * gamma ** np.arange(len(r))).sum())


def simulate(
    cfg: SimConfig,
    policy: SimPolicy,
    n: int,
    reward_cfg: RewardConfig | None = None,
    seed: int | None = None,
    id_prefix: str = "sim",
) -> SimResult:
    """Roll ``n`` episodes of ``policy`` in lockstep; deterministic given ``seed``."""
    reward_cfg = reward_cfg or RewardConfig()
    seed = cfg.seed if seed is None else seed
    env_rng = np.random.default_rng([seed, 0])
    pol_rng = np.random.default_rng([seed, 1])
    F = np.asarray(cfg.transition)
    drift = np.asarray(cfg.drift)
    B = cfg.action_effects()
    L = np.asarray(cfg.loadings)
    offset = np.asarray(cfg.obs_offset)
    noise = np.asarray(cfg.obs_noise)

    x = np.asarray(cfg.init_mean)[None, :] + cfg.init_std * env_rng.standard_normal((n, cfg.m))
    times = np.zeros(n)
    active = np.arange(n)
    rec_t: list[list[float]] = [[] for _ in range(n)]
    rec_o: list[list[np.ndarray]] = [[] for _ in range(n)]
    rec_a: list[list[int]] = [[] for _ in range(n)]
    rec_x: list[list[np.ndarray]] = [[] for _ in range(n)]
    outcome = np.array(["censored"] * n, dtype=object)
    policy.reset(n)

    for t in range(cfg.horizon):
        if active.size == 0:
            break
        xa = x[active]
        sev = cfg.severity(xa)
        prox = cfg.proxies(xa)
        clean = xa @ L.T + offset
        clean[:, :2] = prox
        o = clean + noise * env_rng.standard_normal(clean.shape)
        if cfg.schema == "sepsis":
            o[:, 0] = prox[:, 0]
        observed = env_rng.random(o.shape) < cfg.obs_probability(sev)
        o = np.where(observed, o, np.nan)
        step = SimStep(index=active, t=t, times=times[active].copy(), obs=o, latent=xa)
        acts = np.asarray(policy.act(step, pol_rng), dtype=np.int64)
        for row, i in enumerate(active):
            rec_t[i].append(times[i])
            rec_o[i].append(o[row])
            rec_a[i].append(int(acts[row]))
            rec_x[i].append(xa[row].copy())
        died = sev >= cfg.death_threshold
        discharged = (sev <= cfg.discharge_threshold) & ~died
        outcome[active[died]] = "deceased"
        outcome[active[discharged]] = "survived"
        keep = ~(died | discharged)
        nxt = active[keep]
        gaps = env_rng.exponential(cfg.gap_mean(sev[keep])) + cfg.gap_floor_hours
        x[nxt] = xa[keep] @ F.T + drift + B[acts[keep]] + cfg.process_noise * env_rng.standard_normal((nxt.size, cfg.m))
        times[nxt] += gaps
        active = nxt

    episodes = []
    latents = []
    returns = np.empty(n)
    for i in range(n):
        X = np.asarray(rec_x[i])
        ep = Episode(
            id=f"{id_prefix}-{i:06d}",
            schema=cfg.schema,
            outcome=str(outcome[i]),
            times=np.asarray(rec_t[i]),
            obs=np.asarray(rec_o[i]),
            actions=np.asarray(rec_a[i]),
            rewards=np.zeros(len(rec_t[i])),
        )
        ep = label_episode(ep, cfg.proxies(X), reward_cfg)
        episodes.append(ep)
        latents.append(X)
        returns[i] = discounted_return(ep.rewards, reward_cfg.gamma)
    deceased = np.mean(outcome == "deceased") if n else 0.0
    return SimResult(
        episodes=episodes,
        expected_return=float(returns.mean()) if n else 0.0,
        return_se=float(returns.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
        mortality=float(deceased),
        censored_fraction=float(np.mean(outcome == "censored")) if n else 0.0,
        latents=latents,
        returns=returns,
    )


@dataclass(frozen=True)
class PolicyValue:
    mean: float
    se: float
    mortality: float
    n: int


def true_policy_value(
    cfg: SimConfig,
    policy: SimPolicy,
    n: int,
    reward_cfg: RewardConfig | None = None,
    seed: int | None = None,
) -> PolicyValue:
    if n < 100:
        raise ValueError("true_policy_value needs n >= 100")
    res = simulate(cfg, policy, n, reward_cfg, seed=seed)
    return PolicyValue(res.expected_return, res.return_se, res.mortality, n)


def missingness_correlation(res: SimResult, cfg: SimConfig) -> float:
    """Pearson correlation between per-step observation count and true severity."""
    counts, sev = [], []
    for ep, X in zip(res.episodes, res.latents):
        counts.append((~np.isnan(ep.obs)).sum(1))
        sev.append(cfg.severity(X))
    return float(np.corrcoef(np.concatenate(counts), np.concatenate(sev))[0, 1])
