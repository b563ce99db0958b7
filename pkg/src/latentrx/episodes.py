"""Irregular episode data model, JSONL ingestion, deltas, normalization, action bins."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

OUTCOMES = ("survived", "deceased", "censored")
SCHEMAS = ("sepsis", "vent")


class EpisodeFormatError(ValueError):
    """Malformed episode record; message names the line and field."""


# ---------------------------------------------------------------------------
# action schemas
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionSchema:
    kind: str
    dim_names: tuple[str, ...]
    levels: tuple[int, ...]
    # per-dimension edges; sepsis edges are quartiles of nonzero doses
    edges: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in SCHEMAS:
            raise ValueError(f"unknown schema kind {self.kind!r}")
        for e in self.edges:
            if any(b < a for a, b in zip(e, e[1:])):
                raise ValueError("bin edges must be monotone")

    @property
    def cardinality(self) -> int:
        return int(np.prod(self.levels))

    def encode_levels(self, levels: Sequence[int]) -> int:
        if len(levels) != len(self.levels):
            raise ValueError("wrong number of action dimensions")
        idx = 0
        for lv, n in zip(levels, self.levels):
            if not 0 <= lv < n:
                raise ValueError(f"level {lv} out of range [0, {n})")
            idx = idx * n + int(lv)
        return idx

    def decode(self, action: int) -> tuple[int, ...]:
        if not 0 <= action < self.cardinality:
            raise ValueError(f"action {action} out of range [0, {self.cardinality})")
        out = []
        for n in reversed(self.levels):
            out.append(action % n)
            action //= n
        return tuple(reversed(out))

    def level_table(self) -> np.ndarray:
        """(A, n_dims) integer matrix of per-dimension levels for every action id."""
        return np.array([self.decode(a) for a in range(self.cardinality)], dtype=np.int64)


def sepsis_schema(iv_edges: Sequence[float] = (), vaso_edges: Sequence[float] = ()) -> ActionSchema:
    return ActionSchema("sepsis", ("iv", "vaso"), (5, 5), (tuple(iv_edges), tuple(vaso_edges)))


def vent_schema() -> ActionSchema:
    return ActionSchema("vent", ("peep", "fio2", "tidal_volume"), (2, 3, 3), ((5.0,), (35.0, 50.0), (6.5, 8.0)))


def schema_for(kind: str) -> ActionSchema:
    return sepsis_schema() if kind == "sepsis" else vent_schema()


def fit_sepsis_schema(iv_doses: Iterable[float], vaso_doses: Iterable[float]) -> ActionSchema:
    """Quartile edges of the nonzero doses (training split only)."""

    def edges(doses):
        d = np.asarray(list(doses), dtype=float)
        if np.any(d < 0):
            raise ValueError("negative dose")
        nz = d[d > 0]
        if nz.size == 0:
            return (0.0, 0.0, 0.0)
        return tuple(float(q) for q in np.quantile(nz, [0.25, 0.5, 0.75]))

    return sepsis_schema(edges(iv_doses), edges(vaso_doses))


def _dose_level(dose: float, edges: Sequence[float]) -> int:
    if dose < 0:
        raise ValueError(f"negative dose {dose}")
    if dose == 0:
        return 0
    # a dose equal to an edge falls in the lower bin
    level = 1
    for e in edges:
        if dose > e:
            level += 1
    return level


def bin_sepsis_actions(iv_dose: float, vaso_dose: float, schema: ActionSchema) -> int:
    if schema.kind != "sepsis":
        raise ValueError("sepsis schema required")
    iv = _dose_level(iv_dose, schema.edges[0])
    va = _dose_level(vaso_dose, schema.edges[1])
    return 5 * iv + va


def bin_vent_actions(peep: float, fio2: float, tidal_volume: float) -> int:
    if min(peep, fio2, tidal_volume) < 0:
        raise ValueError("ventilator settings must be nonnegative")
    peep_level = 0 if peep <= 5 else 1
    fio2_level = 0 if fio2 < 35 else (1 if fio2 < 50 else 2)
    tv_level = 0 if tidal_volume < 6.5 else (1 if tidal_volume < 8 else 2)
    return 9 * peep_level + 3 * fio2_level + tv_level


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    """One patient trajectory. ``obs`` holds NaN where a value is missing."""

    id: str
    schema: str
    outcome: str
    times: np.ndarray  # (T,) hours
    obs: np.ndarray  # (T, D) float, NaN = missing
    actions: np.ndarray  # (T,) int
    rewards: np.ndarray  # (T,) float, NaN = unlabeled

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.obs = np.asarray(self.obs, dtype=float)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=float)
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")
        if self.schema not in SCHEMAS:
            raise ValueError(f"unknown schema {self.schema!r}")
        T = len(self.times)
        if self.obs.ndim != 2 or self.obs.shape[0] != T or self.actions.shape != (T,) or self.rewards.shape != (T,):
            raise ValueError("episode arrays have inconsistent lengths")
        if T and np.any(np.diff(self.times) <= 0):
            raise ValueError(f"episode {self.id}: timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def n_features(self) -> int:
        return self.obs.shape[1]

    @property
    def masks(self) -> np.ndarray:
        return (~np.isnan(self.obs)).astype(np.float64)

    @property
    def terminal(self) -> np.ndarray:
        flags = np.zeros(len(self), dtype=bool)
        if len(self) and self.outcome != "censored":
            flags[-1] = True
        return flags

    def with_rewards(self, rewards: np.ndarray) -> "Episode":
        return replace(self, rewards=np.asarray(rewards, dtype=float))

    def equals(self, other: "Episode") -> bool:
        return (
            self.id == other.id
            and self.schema == other.schema
            and self.outcome == other.outcome
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.obs, other.obs, equal_nan=True)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards, equal_nan=True)
        )


def compute_deltas(times: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Per-feature hours since the feature was last observed (0 at the first step)."""
    times = np.asarray(times, dtype=float)
    masks = np.asarray(masks)
    T = len(times)
    if masks.shape[0] != T:
        raise ValueError("masks and timestamps disagree in length")
    if np.any(np.diff(times) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    deltas = np.zeros(masks.shape, dtype=float)
    for t in range(1, T):
        gap = times[t] - times[t - 1]
        deltas[t] = np.where(masks[t - 1] > 0, gap, gap + deltas[t - 1])
    return deltas


def episode_deltas(ep: Episode) -> np.ndarray:
    return compute_deltas(ep.times, ep.masks)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, episodes: Sequence[Episode]) -> "NormStats":
        if not episodes:
            raise ValueError("cannot fit normalization stats on no episodes")
        stacked = np.concatenate([ep.obs for ep in episodes], axis=0)
        D = stacked.shape[1]
        mean = np.zeros(D)
        std = np.ones(D)
        for d in range(D):
            col = stacked[:, d]
            col = col[~np.isnan(col)]
            if col.size:
                mean[d] = col.mean()
                s = col.std()
                std[d] = s if s > 0 else 1.0
        return cls(mean, std)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def normalize(ep: Episode, stats: NormStats) -> Episode:
    if ep.n_features != len(stats.mean):
        raise ValueError(f"feature count mismatch: episode has {ep.n_features}, stats have {len(stats.mean)}")
    return replace(ep, obs=(ep.obs - stats.mean) / stats.std)


# ---------------------------------------------------------------------------
# JSONL I/O
# ---------------------------------------------------------------------------


@dataclass
class EpisodeFile:
    D: int
    feature_names: list[str] = field(default_factory=list)
    episodes: list[Episode] = field(default_factory=list)


def _num(x: float | None):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return None
    return float(x)


def episode_to_record(ep: Episode) -> dict:
    steps = []
    for t in range(len(ep)):
        steps.append(
            {
                "t": float(ep.times[t]),
                "obs": [_num(v) for v in ep.obs[t]],
                "action": int(ep.actions[t]),
                "reward": _num(ep.rewards[t]),
            }
        )
    return {"id": ep.id, "schema": ep.schema, "outcome": ep.outcome, "steps": steps}


def save_episodes(episodes: Sequence[Episode], path: str | Path, feature_names: Sequence[str] | None = None) -> None:
    path = Path(path)
    if episodes:
        D = episodes[0].n_features
    else:
        D = len(feature_names) if feature_names else 0
    names = list(feature_names) if feature_names else [f"f{d}" for d in range(D)]
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": {"D": D, "feature_names": names}}, separators=(",", ":")) + "\n")
        for ep in episodes:
            if ep.n_features != D:
                raise ValueError(f"episode {ep.id} has {ep.n_features} features, file has {D}")
            fh.write(json.dumps(episode_to_record(ep), separators=(",", ":")) + "\n")


def _field(rec: dict, key: str, lineno: int, types):
    if key not in rec:
        raise EpisodeFormatError(f"line {lineno}: missing field {key!r}")
    val = rec[key]
    if not isinstance(val, types) or isinstance(val, bool):
        raise EpisodeFormatError(f"line {lineno}: field {key!r} has wrong type {type(val).__name__}")
    return val


def record_to_episode(rec: dict, D: int, lineno: int) -> Episode:
    ep_id = _field(rec, "id", lineno, str)
    schema = _field(rec, "schema", lineno, str)
    if schema not in SCHEMAS:
        raise EpisodeFormatError(f"line {lineno}: field 'schema' must be one of {SCHEMAS}")
    outcome = _field(rec, "outcome", lineno, str)
    if outcome not in OUTCOMES:
        raise EpisodeFormatError(f"line {lineno}: field 'outcome' must be one of {OUTCOMES}")
    steps = _field(rec, "steps", lineno, list)
    A = schema_for(schema).cardinality
    T = len(steps)
    times = np.zeros(T)
    obs = np.full((T, D), np.nan)
    actions = np.zeros(T, dtype=np.int64)
    rewards = np.full(T, np.nan)
    for i, step in enumerate(steps):
        where = f"steps[{i}]"
        if not isinstance(step, dict):
            raise EpisodeFormatError(f"line {lineno}: field {where!r} must be an object")
        t = _field(step, "t", lineno, (int, float))
        o = _field(step, "obs", lineno, list)
        a = _field(step, "action", lineno, int)
        if "reward" not in step:
            raise EpisodeFormatError(f"line {lineno}: missing field '{where}.reward'")
        r = step["reward"]
        if len(o) != D:
            raise EpisodeFormatError(f"line {lineno}: field '{where}.obs' has length {len(o)}, expected D={D}")
        if not 0 <= a < A:
            raise EpisodeFormatError(f"line {lineno}: field '{where}.action' = {a} outside [0, {A})")
        if r is not None and not isinstance(r, (int, float)):
            raise EpisodeFormatError(f"line {lineno}: field '{where}.reward' must be a number or null")
        for d, v in enumerate(o):
            if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float))):
                raise EpisodeFormatError(f"line {lineno}: field '{where}.obs[{d}]' must be a number or null")
        times[i] = float(t)
        obs[i] = [np.nan if v is None else float(v) for v in o]
        actions[i] = a
        rewards[i] = np.nan if r is None else float(r)
    if T and np.any(np.diff(times) <= 0):
        raise EpisodeFormatError(f"line {lineno}: field 'steps.t' must be strictly increasing")
    return Episode(ep_id, schema, outcome, times, obs, actions, rewards)


def load_episode_file(path: str | Path) -> EpisodeFile:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not any(line.strip() for line in lines):
        return EpisodeFile(D=0)
    D = None
    names: list[str] = []
    episodes: list[Episode] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise EpisodeFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise EpisodeFormatError(f"line {lineno}: record must be an object")
        if "meta" in rec:
            meta = rec["meta"]
            if not isinstance(meta, dict):
                raise EpisodeFormatError(f"line {lineno}: field 'meta' must be an object")
            D = _field(meta, "D", lineno, int)
            names = list(meta.get("feature_names", []))
            continue
        if D is None:
            raise EpisodeFormatError(f"line {lineno}: field 'meta' header must precede episodes")
        episodes.append(record_to_episode(rec, D, lineno))
    return EpisodeFile(D=D or 0, feature_names=names, episodes=episodes)


def load_episodes(path: str | Path) -> list[Episode]:
    return load_episode_file(path).episodes
