"""Actor-critic over world-model features with hybrid (Phase 1) and imagined (Phase 2) rollouts."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import numkit
from .episodes import Episode, NormStats
from .numkit import TwoHotCodec
from .worldmodel import EpisodeTensors, LatentBelief, WorldModel, is_frozen, mlp

log = logging.getLogger(__name__)


@dataclass
class PolicyConfig:
    units: int = 512
    layers: int = 2
    buckets: int = 255
    gamma: float = 0.99
    lam: float = 0.95
    entropy: float = 3e-4
    ema: float = 0.02
    return_decay: float = 0.99
    lr_phase1: float = 1e-4
    lr_phase2: float = 1e-5
    clip: float = 100.0
    batch_size: int = 64
    batch_length: int = 50
    tau: int = 10
    horizon: int = 15
    start_stride: int = 1
    phase2_starts: int = 1024
    epochs_phase1: int = 10
    epochs_phase2: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.ema <= 1:
            raise ValueError("EMA rate must lie in (0, 1]")
        if not (0 <= self.lam <= 1 and 0 <= self.gamma <= 1):
            raise ValueError("lambda and gamma must lie in [0, 1]")
        if self.tau < 0 or self.tau >= self.batch_length:
            raise ValueError(f"tau={self.tau} must satisfy 0 <= tau < T={self.batch_length}")
        if self.horizon < 1:
            raise ValueError("imagination horizon must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# returns and losses
# ---------------------------------------------------------------------------


def lambda_returns(rewards, continues, values, lam: float, gamma: float, bootstrap):
    """Backward recursion ``R_t = r_t + gamma*c_t*((1-lam)*v_t + lam*R_{t+1})`` with ``R_N = bootstrap``.

    Arrays are aligned on the last axis; returns a tensor of the same shape.
    """
    rewards, continues, values = (torch.as_tensor(x, dtype=numkit.dtype()) for x in (rewards, continues, values))
    if not rewards.shape == continues.shape == values.shape:
        raise ValueError(f"length mismatch: {tuple(rewards.shape)}, {tuple(continues.shape)}, {tuple(values.shape)}")
    nxt = torch.as_tensor(bootstrap, dtype=rewards.dtype).expand(rewards.shape[:-1])
    out = []
    for t in reversed(range(rewards.shape[-1])):
        nxt = rewards[..., t] + gamma * continues[..., t] * ((1 - lam) * values[..., t] + lam * nxt)
        out.append(nxt)
    return torch.stack(out[::-1], -1)


def masked_lambda_returns(rewards, continues, values, last, lam: float, gamma: float):
    """Batched returns over padded sequences of states ``0..N``.

    ``rewards[:, k]``, ``continues[:, k]``, ``values[:, k]`` describe state ``k``;
    ``last[:, k]`` marks each row's final valid state, whose return is its value.
    Returns targets for every state (entries past ``last`` are meaningless).
    """
    N = rewards.shape[1]
    R = values[:, N - 1]
    out = [R]
    for k in reversed(range(N - 1)):
        step = rewards[:, k + 1] + gamma * continues[:, k + 1] * ((1 - lam) * values[:, k + 1] + lam * R)
        R = torch.where(last[:, k], values[:, k], step)
        out.append(R)
    return torch.stack(out[::-1], 1)


def entropy(logits: torch.Tensor) -> torch.Tensor:
    logp = torch.log_softmax(logits, -1)
    return -(logp.exp() * logp).sum(-1)


def actor_loss(logits, actions, returns, baseline, eta: float, weights=None, scale=1.0) -> torch.Tensor:
    """REINFORCE with a stop-gradient advantage and an entropy bonus, averaged over weighted steps."""
    adv = ((returns - baseline) / scale).detach()
    logp = torch.log_softmax(logits, -1).gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    per_step = -adv * logp - eta * entropy(logits)
    if weights is None:
        return per_step.mean()
    return (per_step * weights).sum() / weights.sum().clamp(min=1e-8)


def critic_loss(logits, returns, codec: TwoHotCodec, weights=None) -> torch.Tensor:
    per_step = codec.cross_entropy(logits, returns.detach())
    if weights is None:
        return per_step.mean()
    return (per_step * weights).sum() / weights.sum().clamp(min=1e-8)


class ReturnNormalizer:
    """EMA of the 5th-95th percentile return range, floored at 1."""

    def __init__(self, decay: float = 0.99):
        self.decay = decay
        self.range: float | None = None

    def update(self, returns: torch.Tensor, weights: torch.Tensor | None = None) -> float:
        r = returns.detach().flatten()
        if weights is not None:
            r = r[weights.detach().flatten() > 0]
        if r.numel():
            lo, hi = torch.quantile(r, torch.tensor([0.05, 0.95], dtype=r.dtype))
            cur = float(hi - lo)
            self.range = cur if self.range is None else self.decay * self.range + (1 - self.decay) * cur
        return self.scale

    @property
    def scale(self) -> float:
        return max(1.0, self.range or 0.0)


# ---------------------------------------------------------------------------
# actor / critic
# ---------------------------------------------------------------------------


class PolicyBundle(nn.Module):
    def __init__(self, feat_dim: int, A: int, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        self.A = A
        self.feat_dim = feat_dim
        self.codec = TwoHotCodec(cfg.buckets)
        self.actor = mlp(feat_dim, A, cfg.units, cfg.layers)
        self.critic = mlp(feat_dim, cfg.buckets, cfg.units, cfg.layers)
        nn.init.zeros_(self.critic[-1].weight)
        nn.init.zeros_(self.critic[-1].bias)
        self.target_critic = copy.deepcopy(self.critic)
        for p in self.target_critic.parameters():
            p.requires_grad_(False)
        self.normalizer = ReturnNormalizer(cfg.return_decay)
        self.phases_done: list[int] = []

    def value(self, feat: torch.Tensor, target: bool = False) -> torch.Tensor:
        net = self.target_critic if target else self.critic
        return self.codec.decode_logits(net(feat))

    @torch.no_grad()
    def update_target(self) -> None:
        rate = self.cfg.ema
        for t, s in zip(self.target_critic.parameters(), self.critic.parameters()):
            t.mul_(1 - rate).add_(s, alpha=rate)

    def trainable(self) -> list[torch.Tensor]:
        return list(self.actor.parameters()) + list(self.critic.parameters())


def act(feat: torch.Tensor, bundle: PolicyBundle, mode: str = "greedy", generator: torch.Generator | None = None) -> torch.Tensor:
    """Action ids for features ``feat`` (..., F). Greedy ties resolve to the lowest id."""
    with torch.no_grad():
        logits = bundle.actor(feat)
    if mode == "greedy":
        # argmax returns the first maximal index
        return logits.argmax(-1)
    if mode == "sample":
        probs = torch.softmax(logits, -1)
        flat = probs.reshape(-1, probs.shape[-1])
        return torch.multinomial(flat, 1, generator=generator).reshape(probs.shape[:-1])
    raise ValueError(f"unknown act mode {mode!r}")


# ---------------------------------------------------------------------------
# posterior cache
# ---------------------------------------------------------------------------


class PosteriorCache:
    """Posterior-mean latents of a frozen world model over a fixed episode set.

    Logged actions live behind :attr:`actions`, which counts its reads so
    imagination-only training can prove it never touches them.
    """

    def __init__(self, model: WorldModel, episodes: Sequence[Episode], stats: NormStats, chunk: int = 256):
        data = EpisodeTensors(episodes, stats)
        self.N, self.L = data.N, data.L
        self.lengths = torch.as_tensor(data.lengths)
        hs, zs = [], []
        with torch.no_grad():
            for b in range(0, data.N, chunk):
                idx = np.arange(b, min(b + chunk, data.N))
                batch = data.batch(idx)
                post, _, _ = model.observe(batch, sample=False)
                pad = self.L - post.h.shape[1]
                hs.append(nn.functional.pad(post.h, (0, 0, 0, pad)))
                zs.append(nn.functional.pad(post.z, (0, 0, 0, pad)))
        self.h = torch.cat(hs)
        self.z = torch.cat(zs)
        self.valid = torch.arange(self.L)[None, :] < self.lengths[:, None]
        self.cont = torch.as_tensor(data.cont)
        self._actions = torch.as_tensor(data.actions)
        self.action_reads = 0

    @property
    def actions(self) -> torch.Tensor:
        self.action_reads += 1
        return self._actions

    def states(self, ep_idx, t_idx) -> LatentBelief:
        h, z = self.h[ep_idx, t_idx], self.z[ep_idx, t_idx]
        return LatentBelief(h, z, z, torch.ones_like(z))

    def windows(self, length: int) -> np.ndarray:
        lens = self.lengths.numpy()
        return np.asarray([(i, s) for i in range(self.N) for s in range(0, int(lens[i]), length)], dtype=np.int64)

    def start_states(self, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
        ep, t = np.nonzero(self.valid.numpy())
        keep = t % stride == 0
        return ep[keep], t[keep]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class PhaseResult:
    bundle: PolicyBundle
    trace: list[dict] = field(default_factory=list)
    logged_action_reads: int = 0


def _rollout(model: WorldModel, bundle: PolicyBundle, start: LatentBelief, steps: int, generator):
    feats, actions = [start.feat], []
    state = start
    for _ in range(steps):
        a = act(state.feat, bundle, "sample", generator)
        with torch.no_grad():
            state = model.prior_step(state, a, sample=True, generator=generator)
        feats.append(state.feat)
        actions.append(a)
    return feats, actions


def _update(model, bundle, opt, feats, actions, valid, last, step_id, observed_cont=None):
    """One actor-critic step on padded state sequences ``feats`` (B, N, F).

    ``actions[:, k]`` leads from state k to k+1; ``valid``/``last`` are (B, N) bools.
    ``observed_cont`` is an optional (known, value) pair of (B, N) tensors: where
    ``known`` is set, the logged continuation replaces the predicted one.
    """
    cfg = bundle.cfg
    with torch.no_grad():
        rew = model.reward(feats)
        cont = model.cont_prob(feats)
        if observed_cont is not None:
            known, value = observed_cont
            cont = torch.where(known, value.to(cont.dtype), cont)
        tval = bundle.value(feats, target=True)
        R = masked_lambda_returns(rew, cont, tval, last, cfg.lam, cfg.gamma)
        # states that have a successor carry a target; discount weight follows predicted continuation
        has_next = valid & ~last
        disc = torch.cumprod(torch.cat([torch.ones_like(cont[:, :1]), cont[:, 1:]], 1), 1)
        w = disc * has_next.to(disc.dtype)
        scale = bundle.normalizer.update(R, w)
    x = feats[:, :-1]
    w = w[:, :-1]
    R = R[:, :-1]
    logits = bundle.actor(x)
    crit_logits = bundle.critic(x)
    baseline = bundle.codec.decode_logits(crit_logits)
    a_loss = actor_loss(logits, actions, R, baseline, cfg.entropy, w, scale)
    c_loss = critic_loss(crit_logits, R, bundle.codec, w)
    opt.zero_grad()
    (a_loss + c_loss).backward()
    opt.step()
    bundle.update_target()
    with torch.no_grad():
        ent = float((entropy(logits) * w).sum() / w.sum().clamp(min=1e-8))
        ret = float((R * w).sum() / w.sum().clamp(min=1e-8))
    return {"step": step_id, "actor_loss": float(a_loss.detach()), "critic_loss": float(c_loss.detach()), "entropy": ent, "mean_return": ret}


def _check_frozen(model: WorldModel) -> None:
    if not is_frozen(model):
        raise ValueError("world model must be frozen before policy training")


def train_phase1(
    cache: PosteriorCache,
    model: WorldModel,
    bundle: PolicyBundle,
    tau: int | None = None,
    epochs: int | None = None,
    max_seconds: float | None = None,
) -> PhaseResult:
    """Hybrid rollouts: real posterior window of length T followed by ``tau`` imagined steps."""
    _check_frozen(model)
    cfg = bundle.cfg
    tau = cfg.tau if tau is None else tau
    T = cfg.batch_length
    if not 0 <= tau < T:
        raise ValueError(f"tau={tau} must satisfy 0 <= tau < T={T}")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    gen = numkit.torch_generator(cfg.seed + 11)
    opt = numkit.Adam(bundle.trainable(), cfg.lr_phase1, clip=cfg.clip)
    windows = cache.windows(T)
    logged = cache.actions
    trace = []
    t0 = time.monotonic()
    step = 0
    for epoch in range(cfg.epochs_phase1 if epochs is None else epochs):
        order = rng.permutation(len(windows))
        for b in range(0, len(order), cfg.batch_size):
            w = windows[order[b : b + cfg.batch_size]]
            ep, s = torch.as_tensor(w[:, 0]), torch.as_tensor(w[:, 1])
            n_real = torch.minimum(cache.lengths[ep] - s, torch.tensor(T))
            B = len(w)
            t_idx = (s[:, None] + torch.arange(T)[None, :]).clamp(max=cache.L - 1)
            feats = torch.cat([cache.h[ep[:, None], t_idx], cache.z[ep[:, None], t_idx]], -1)
            acts = logged[ep[:, None], t_idx]
            rows = torch.arange(B)
            last_state = cache.states(ep, s + n_real - 1)
            img_feats, img_acts = _rollout(model, bundle, last_state, tau, gen)
            N = T + tau
            full = torch.zeros(B, N, feats.shape[-1], dtype=feats.dtype)
            full_a = torch.zeros(B, N, dtype=torch.long)
            pos = torch.arange(N)[None, :]
            real = pos < n_real[:, None]
            full[:, :T] = torch.where(real[:, :T, None], feats, torch.zeros((), dtype=feats.dtype))
            full_a[:, :T] = torch.where(real[:, :T], acts, torch.zeros((), dtype=torch.long))
            for j in range(tau):
                full[rows, n_real + j] = img_feats[j + 1]
                full_a[rows, n_real + j - 1] = img_acts[j]
            valid = pos < (n_real + tau)[:, None]
            last = pos == (n_real + tau - 1)[:, None]
            # real steps carry their logged continuation: an episode known to have
            # ended gives no weight to the imagined tail appended after it
            real_cont = torch.zeros(B, N, dtype=cache.cont.dtype)
            real_cont[:, :T] = cache.cont[ep[:, None], t_idx]
            row = _update(model, bundle, opt, full, full_a[:, :-1], valid, last, step, (real, real_cont))
            row["epoch"] = epoch
            trace.append(row)
            step += 1
        log.info("phase 1 epoch %d: %s", epoch, trace[-1] if trace else None)
        if max_seconds is not None and time.monotonic() - t0 > max_seconds:
            break
    bundle.phases_done.append(1)
    return PhaseResult(bundle, trace, cache.action_reads)


def train_phase2(
    cache: PosteriorCache,
    model: WorldModel,
    bundle: PolicyBundle,
    horizon: int | None = None,
    epochs: int | None = None,
    allow_cold_start: bool = False,
    max_seconds: float | None = None,
) -> PhaseResult:
    """Imagination-only training from posterior start states; never reads logged actions."""
    _check_frozen(model)
    if 1 not in bundle.phases_done and not allow_cold_start:
        raise ValueError("phase 2 requires a phase-1 policy (pass allow_cold_start for the imagination-only ablation)")
    cfg = bundle.cfg
    H = cfg.horizon if horizon is None else horizon
    if H < 1:
        raise ValueError("imagination horizon must be >= 1")
    torch.manual_seed(cfg.seed + 2)
    rng = np.random.default_rng([cfg.seed, 2])
    gen = numkit.torch_generator(cfg.seed + 22)
    opt = numkit.Adam(bundle.trainable(), cfg.lr_phase2, clip=cfg.clip)
    reads_before = cache.action_reads
    ep_all, t_all = cache.start_states(cfg.start_stride)
    trace = []
    t0 = time.monotonic()
    step = 0
    for epoch in range(cfg.epochs_phase2 if epochs is None else epochs):
        order = rng.permutation(len(ep_all))
        for b in range(0, len(order), cfg.phase2_starts):
            sel = order[b : b + cfg.phase2_starts]
            start = cache.states(torch.as_tensor(ep_all[sel]), torch.as_tensor(t_all[sel]))
            feats, acts = _rollout(model, bundle, start, H, gen)
            full = torch.stack(feats, 1)
            B, N = full.shape[:2]
            valid = torch.ones(B, N, dtype=torch.bool)
            last = torch.zeros(B, N, dtype=torch.bool)
            last[:, -1] = True
            row = _update(model, bundle, opt, full, torch.stack(acts, 1), valid, last, step)
            row["epoch"] = epoch
            trace.append(row)
            step += 1
        log.info("phase 2 epoch %d: %s", epoch, trace[-1] if trace else None)
        if max_seconds is not None and time.monotonic() - t0 > max_seconds:
            break
    bundle.phases_done.append(2)
    return PhaseResult(bundle, trace, cache.action_reads - reads_before)


# ---------------------------------------------------------------------------
# deployment in the simulator
# ---------------------------------------------------------------------------


class AgentPolicy:
    """Runs the world-model posterior online and picks actions with the actor.

    Implements the simulator policy protocol, so ``true_policy_value`` can
    score a trained agent.
    """

    def __init__(self, model: WorldModel, bundle: PolicyBundle, stats: NormStats, mode: str = "greedy", seed: int = 0):
        self.model = model
        self.bundle = bundle
        self.mean = torch.as_tensor(stats.mean, dtype=numkit.dtype())
        self.std = torch.as_tensor(stats.std, dtype=numkit.dtype())
        self.mode = mode
        self.gen = numkit.torch_generator(seed)

    @torch.no_grad()
    def reset(self, n: int) -> None:
        init = self.model.initial(n)
        self.state = LatentBelief(init.h.clone(), init.z.clone(), init.mean.clone(), init.std.clone())
        D = self.model.cfg.D
        self.prev_action = torch.full((n,), self.model.null_action, dtype=torch.long)
        self.prev_time = torch.zeros(n, dtype=numkit.dtype())
        self.prev_mask = torch.zeros(n, D, dtype=numkit.dtype())
        self.delta = torch.zeros(n, D, dtype=numkit.dtype())

    def features(self, idx: torch.Tensor, times: torch.Tensor, obs: np.ndarray, first: bool) -> torch.Tensor:
        o = torch.as_tensor(obs, dtype=numkit.dtype())
        m = (~torch.isnan(o)).to(o.dtype)
        o = torch.where(m > 0, (torch.nan_to_num(o) - self.mean) / self.std, torch.zeros((), dtype=o.dtype))
        if first:
            delta = torch.zeros_like(o)
        else:
            gap = (times - self.prev_time[idx]).unsqueeze(-1)
            delta = torch.where(self.prev_mask[idx] > 0, gap, gap + self.delta[idx])
        self.delta[idx] = delta
        self.prev_mask[idx] = m
        self.prev_time[idx] = times
        with torch.no_grad():
            emb = self.model.encoder(o, delta, m)
            prev = self.state.index(idx)
            post = self.model.posterior_step(prev, self.prev_action[idx], emb, sample=False)
        self.state.h[idx], self.state.z[idx] = post.h, post.z
        return post.feat

    def act(self, step, rng: np.random.Generator) -> np.ndarray:
        idx = torch.as_tensor(step.index)
        times = torch.as_tensor(step.times, dtype=numkit.dtype())
        feat = self.features(idx, times, step.obs, step.t == 0)
        a = act(feat, self.bundle, self.mode, self.gen)
        self.prev_action[idx] = a
        return a.numpy().astype(np.int64)

    @torch.no_grad()
    def episode_probs(self, ep: Episode) -> np.ndarray:
        """Actor softmax along a logged episode's posterior (teacher-forced on logged actions)."""
        self.reset(1)
        out = []
        for t in range(len(ep)):
            idx = torch.tensor([0])
            feat = self.features(idx, torch.tensor([ep.times[t]], dtype=numkit.dtype()), ep.obs[t : t + 1], t == 0)
            out.append(torch.softmax(self.bundle.actor(feat), -1)[0])
            self.prev_action[0] = int(ep.actions[t])
        return torch.stack(out).numpy()
