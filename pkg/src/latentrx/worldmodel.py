"""Recurrent latent world model: posterior/prior transitions, prediction heads, training, imagination."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numkit
from .afi import make_encoder
from .episodes import Episode, NormStats, compute_deltas
from .numkit import TwoHotCodec, symlog

log = logging.getLogger(__name__)


@dataclass
class WorldModelConfig:
    D: int = 12
    A: int = 25
    k: int = 32
    hidden: int = 256
    latent: int = 32
    units: int = 512
    layers: int = 2
    min_std: float = 0.1
    free_bits: float = 1.0
    buckets: int = 255
    encoder: str = "afi"
    mask_channel: bool = False
    log_delta: bool = False
    w_rew: float = 1.0
    w_con: float = 1.0
    w_rec: float = 1.0
    w_kl: float = 1.0
    # share of the KL gradient that trains the prior (the rest regularizes the
    # posterior); None trains both with the plain KL gradient
    kl_balance: float | None = 0.8
    lr: float = 1e-4
    clip: float = 100.0
    batch_size: int = 64
    batch_length: int = 50
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.kl_balance is not None and not 0.0 <= self.kl_balance <= 1.0:
            raise ValueError("kl_balance must lie in [0, 1]")

    @property
    def feat_dim(self) -> int:
        return self.hidden + self.latent

    def to_dict(self) -> dict:
        return asdict(self)


def mlp(inp: int, out: int, units: int, layers: int) -> nn.Sequential:
    mods: list[nn.Module] = []
    d = inp
    for _ in range(layers):
        mods += [nn.Linear(d, units), nn.LayerNorm(units), nn.SiLU()]
        d = units
    mods.append(nn.Linear(d, out))
    return nn.Sequential(*mods)


@dataclass
class LatentBelief:
    h: torch.Tensor
    z: torch.Tensor
    mean: torch.Tensor
    std: torch.Tensor

    @property
    def feat(self) -> torch.Tensor:
        return torch.cat([self.h, self.z], -1)

    def detach(self) -> "LatentBelief":
        return LatentBelief(self.h.detach(), self.z.detach(), self.mean.detach(), self.std.detach())

    def index(self, idx) -> "LatentBelief":
        return LatentBelief(self.h[idx], self.z[idx], self.mean[idx], self.std[idx])


def kl_loss(post_mean, post_std, prior_mean, prior_std, free_bits: float = 0.0) -> torch.Tensor:
    """KL(posterior || prior) for diagonal Gaussians, summed over the last axis, floored at ``free_bits``."""
    if bool((post_std <= 0).any()) or bool((prior_std <= 0).any()):
        raise ValueError("standard deviations must be positive")
    var_ratio = (post_std / prior_std) ** 2
    kl = 0.5 * (var_ratio + ((post_mean - prior_mean) / prior_std) ** 2 - 1.0 - torch.log(var_ratio))
    kl = kl.sum(-1)
    if free_bits > 0:
        kl = torch.clamp(kl, min=free_bits)
    return kl


def balanced_kl(post_mean, post_std, prior_mean, prior_std, free_bits: float = 0.0, balance: float = 0.5) -> torch.Tensor:
    """Free-bits KL whose value equals :func:`kl_loss` but whose gradient is split:
    ``balance`` of it moves the prior toward the posterior, the rest the posterior
    toward the prior. ``balance=0.5`` gives half the plain KL gradient."""
    dyn = kl_loss(post_mean.detach(), post_std.detach(), prior_mean, prior_std, free_bits)
    rep = kl_loss(post_mean, post_std, prior_mean.detach(), prior_std.detach(), free_bits)
    return balance * dyn + (1.0 - balance) * rep


class WorldModel(nn.Module):
    def __init__(self, cfg: WorldModelConfig):
        super().__init__()
        self.cfg = cfg
        self.codec = TwoHotCodec(cfg.buckets)
        self.encoder = make_encoder(cfg.encoder, cfg.D, cfg.k, cfg.mask_channel, cfg.log_delta)
        self.cell = nn.GRUCell(cfg.latent + cfg.A + 1, cfg.hidden)
        self.h0 = nn.Parameter(torch.zeros(cfg.hidden))
        self.post_net = mlp(cfg.hidden + self.encoder.out_dim, 2 * cfg.latent, cfg.units, 1)
        self.prior_net = mlp(cfg.hidden, 2 * cfg.latent, cfg.units, 1)
        F_ = cfg.feat_dim
        self.reward_head = mlp(F_, cfg.buckets, cfg.units, cfg.layers)
        self.cont_head = mlp(F_, 1, cfg.units, cfg.layers)
        self.recon_head = mlp(F_, cfg.D, cfg.units, cfg.layers)
        # start reward predictions at the zero bucket mixture
        nn.init.zeros_(self.reward_head[-1].weight)
        nn.init.zeros_(self.reward_head[-1].bias)

    @property
    def null_action(self) -> int:
        return self.cfg.A

    # -- transitions -----------------------------------------------------------

    def initial(self, batch: int) -> LatentBelief:
        c = self.cfg
        z = torch.zeros(batch, c.latent)
        return LatentBelief(self.h0.expand(batch, c.hidden), z, z, torch.ones_like(z))

    def _dist(self, raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean, s = raw.chunk(2, -1)
        return mean, F.softplus(s) + self.cfg.min_std

    def _sample(self, mean, std, sample: bool, generator: torch.Generator | None):
        if not sample:
            return mean
        return mean + std * torch.randn(mean.shape, generator=generator, dtype=mean.dtype)

    def recurrent(self, prev: LatentBelief, action: torch.Tensor) -> torch.Tensor:
        action = torch.as_tensor(action, dtype=torch.long)
        if bool((action < 0).any()) or bool((action > self.cfg.A).any()):
            raise ValueError(f"action id outside [0, {self.cfg.A}]")
        a = F.one_hot(action, self.cfg.A + 1).to(prev.z.dtype)
        return self.cell(torch.cat([prev.z, a], -1), prev.h)

    def posterior_step(self, prev: LatentBelief, action, emb: torch.Tensor, sample: bool = True, generator=None) -> LatentBelief:
        h = self.recurrent(prev, action)
        mean, std = self._dist(self.post_net(torch.cat([h, emb], -1)))
        return LatentBelief(h, self._sample(mean, std, sample, generator), mean, std)

    def prior_from_h(self, h: torch.Tensor, sample: bool = True, generator=None) -> LatentBelief:
        mean, std = self._dist(self.prior_net(h))
        return LatentBelief(h, self._sample(mean, std, sample, generator), mean, std)

    def prior_step(self, prev: LatentBelief, action, sample: bool = True, generator=None) -> LatentBelief:
        return self.prior_from_h(self.recurrent(prev, action), sample, generator)

    # -- heads -----------------------------------------------------------------

    def reward(self, feat: torch.Tensor) -> torch.Tensor:
        return self.codec.decode_logits(self.reward_head(feat))

    def cont_prob(self, feat: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.cont_head(feat).squeeze(-1))

    def head_losses(self, feat, reward, cont, obs, mask):
        """Per-step (L_rew, L_con, L_rec); missing entries never touch L_rec or its gradient."""
        l_rew = self.codec.cross_entropy(self.reward_head(feat), reward)
        l_con = F.binary_cross_entropy_with_logits(self.cont_head(feat).squeeze(-1), cont, reduction="none")
        target = symlog(torch.where(mask > 0, obs, torch.zeros((), dtype=obs.dtype)))
        sq = (self.recon_head(feat) - target) ** 2
        l_rec = torch.where(mask > 0, sq, torch.zeros((), dtype=sq.dtype)).sum(-1)
        return l_rew, l_con, l_rec

    # -- sequences -------------------------------------------------------------

    def observe(self, batch: "Batch", sample: bool = True, generator=None):
        """Posterior pass over a batch; returns stacked posterior and prior beliefs (B, T, .)."""
        B, T, _ = batch.obs.shape
        emb = self.encoder(batch.obs, batch.deltas, batch.masks)
        state = self.initial(B)
        posts, priors = [], []
        null = torch.full((B,), self.null_action, dtype=torch.long)
        for t in range(T):
            if batch.starts is not None and t > 0:
                cut = (batch.starts == t).unsqueeze(-1)
                if bool(cut.any()):
                    state = LatentBelief(torch.where(cut, state.h.detach(), state.h), torch.where(cut, state.z.detach(), state.z), state.mean, state.std)
            act = null if t == 0 else batch.actions[:, t - 1]
            h = self.recurrent(state, act)
            pm, ps = self._dist(self.prior_net(h))
            qm, qs = self._dist(self.post_net(torch.cat([h, emb[:, t]], -1)))
            z = self._sample(qm, qs, sample, generator)
            state = LatentBelief(h, z, qm, qs)
            posts.append(state)
            priors.append((pm, ps))
        stack = lambda xs: torch.stack(xs, 1)
        post = LatentBelief(stack([p.h for p in posts]), stack([p.z for p in posts]), stack([p.mean for p in posts]), stack([p.std for p in posts]))
        prior_mean = stack([p[0] for p in priors])
        prior_std = stack([p[1] for p in priors])
        return post, prior_mean, prior_std

    def loss(self, batch: "Batch", generator=None) -> tuple[torch.Tensor, dict[str, float]]:
        c = self.cfg
        post, pm, ps = self.observe(batch, sample=True, generator=generator)
        feat = post.feat
        l_rew, l_con, l_rec = self.head_losses(feat, batch.rewards, batch.cont, batch.obs, batch.masks)
        if c.kl_balance is None:
            l_kl = kl_loss(post.mean, post.std, pm, ps, c.free_bits)
        else:
            l_kl = balanced_kl(post.mean, post.std, pm, ps, c.free_bits, c.kl_balance)
        w = batch.loss_mask
        n = w.sum().clamp(min=1.0)
        terms = {"L_rew": (l_rew * w).sum() / n, "L_con": (l_con * w).sum() / n, "L_rec": (l_rec * w).sum() / n, "L_D": (l_kl * w).sum() / n}
        total = c.w_rew * terms["L_rew"] + c.w_con * terms["L_con"] + c.w_rec * terms["L_rec"] + c.w_kl * terms["L_D"]
        return total, {k: float(v.detach()) for k, v in terms.items()}


def imagine(start: LatentBelief, actor: Callable[[torch.Tensor], torch.Tensor], horizon: int, model: WorldModel, generator=None, sample_latent: bool = True):
    """Roll the prior forward ``horizon`` steps with actions sampled from ``actor(feat) -> logits``.

    Returns dict with ``feats`` (B, H+1, F) including the start, ``actions`` (B, H),
    ``rewards`` and ``continues`` (B, H) predicted at the imagined states.
    """
    if horizon < 1:
        raise ValueError("imagination horizon must be >= 1")
    state = start
    feats = [state.feat]
    actions, rewards, conts = [], [], []
    for _ in range(horizon):
        logits = actor(state.feat)
        probs = torch.softmax(logits, -1)
        a = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
        state = model.prior_step(state, a, sample=sample_latent, generator=generator)
        f = state.feat
        feats.append(f)
        actions.append(a)
        rewards.append(model.reward(f))
        conts.append(model.cont_prob(f))
    return {
        "feats": torch.stack(feats, 1),
        "actions": torch.stack(actions, 1),
        "rewards": torch.stack(rewards, 1),
        "continues": torch.stack(conts, 1),
    }


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    obs: torch.Tensor  # (B, T, D) normalized, zero where missing
    masks: torch.Tensor
    deltas: torch.Tensor
    actions: torch.Tensor  # (B, T) long
    rewards: torch.Tensor
    cont: torch.Tensor
    valid: torch.Tensor  # (B, T) 1 where the step exists
    loss_mask: torch.Tensor  # valid and inside the training window
    starts: torch.Tensor | None = None
    lengths: torch.Tensor | None = None


class EpisodeTensors:
    """Padded arrays for a list of episodes, with window sampling."""

    def __init__(self, episodes: Sequence[Episode], stats: NormStats):
        if not episodes:
            raise ValueError("empty dataset")
        N = len(episodes)
        L = max(len(e) for e in episodes)
        D = episodes[0].n_features
        self.N, self.L, self.D = N, L, D
        self.obs = np.zeros((N, L, D), np.float32)
        self.masks = np.zeros((N, L, D), np.float32)
        self.deltas = np.zeros((N, L, D), np.float32)
        self.actions = np.zeros((N, L), np.int64)
        self.rewards = np.zeros((N, L), np.float32)
        self.cont = np.ones((N, L), np.float32)
        self.lengths = np.zeros(N, np.int64)
        for i, ep in enumerate(episodes):
            T = len(ep)
            m = ep.masks
            o = (ep.obs - stats.mean) / stats.std
            self.obs[i, :T] = np.where(m > 0, o, 0.0)
            self.masks[i, :T] = m
            self.deltas[i, :T] = compute_deltas(ep.times, m)
            self.actions[i, :T] = ep.actions
            self.rewards[i, :T] = np.nan_to_num(ep.rewards)
            if ep.outcome != "censored":
                self.cont[i, T - 1] = 0.0
            self.lengths[i] = T

    def windows(self, length: int) -> np.ndarray:
        out = [(i, s) for i in range(self.N) for s in range(0, int(self.lengths[i]), length)]
        return np.asarray(out, dtype=np.int64)

    def batch(self, ep_idx: np.ndarray, starts: np.ndarray | None = None, length: int | None = None) -> Batch:
        ep_idx = np.asarray(ep_idx)
        if starts is None:
            starts = np.zeros(len(ep_idx), np.int64)
        lens = self.lengths[ep_idx]
        end = int(lens.max()) if length is None else int(min(self.L, (starts + length).max()))
        end = max(end, 1)
        t = np.arange(end)[None, :]
        valid = (t < lens[:, None]).astype(np.float32)
        win = valid if length is None else valid * ((t >= starts[:, None]) & (t < starts[:, None] + length))
        dt = numkit.dtype()
        to = lambda a: torch.as_tensor(a, dtype=dt)
        return Batch(
            obs=to(self.obs[ep_idx, :end]),
            masks=to(self.masks[ep_idx, :end]),
            deltas=to(self.deltas[ep_idx, :end]),
            actions=torch.as_tensor(self.actions[ep_idx, :end]),
            rewards=to(self.rewards[ep_idx, :end]),
            cont=to(self.cont[ep_idx, :end]),
            valid=to(valid),
            loss_mask=to(win),
            starts=torch.as_tensor(starts),
            lengths=torch.as_tensor(lens),
        )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: WorldModel
    stats: NormStats
    trace: list[dict] = field(default_factory=list)


def train_worldmodel(
    episodes: Sequence[Episode],
    cfg: WorldModelConfig,
    stats: NormStats | None = None,
    epochs: int | None = None,
    max_seconds: float | None = None,
    model: WorldModel | None = None,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Adam on the summed window loss; returns the model, normalization stats and per-epoch trace."""
    if not episodes:
        raise ValueError("cannot train a world model on an empty dataset")
    if any(np.isnan(ep.rewards).any() for ep in episodes):
        raise ValueError("episodes must be reward-labeled before world-model training")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = numkit.torch_generator(cfg.seed + 1)
    stats = stats or NormStats.fit(episodes)
    data = EpisodeTensors(episodes, stats)
    model = model or WorldModel(cfg)
    opt = numkit.Adam(model.parameters(), cfg.lr, clip=cfg.clip)
    windows = data.windows(cfg.batch_length)
    trace = []
    t0 = time.monotonic()
    for epoch in range(epochs if epochs is not None else cfg.epochs):
        order = rng.permutation(len(windows))
        sums = {"L_rew": 0.0, "L_con": 0.0, "L_rec": 0.0, "L_D": 0.0, "total": 0.0}
        nb = 0
        for b in range(0, len(order), cfg.batch_size):
            w = windows[order[b : b + cfg.batch_size]]
            batch = data.batch(w[:, 0], w[:, 1], cfg.batch_length)
            loss, terms = model.loss(batch, generator=gen)
            opt.zero_grad()
            loss.backward()
            opt.step()
            for k, v in terms.items():
                sums[k] += v
            sums["total"] += float(loss.detach())
            nb += 1
        row = {"epoch": epoch, **{k: v / max(nb, 1) for k, v in sums.items()}}
        trace.append(row)
        log.info("world model epoch %d total %.4f", epoch, row["total"])
        if progress:
            progress(row)
        if max_seconds is not None and time.monotonic() - t0 > max_seconds:
            break
    model.eval()
    return TrainResult(model, stats, trace)


def freeze(model: WorldModel) -> WorldModel:
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def is_frozen(model: WorldModel) -> bool:
    return not any(p.requires_grad for p in model.parameters())


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@torch.no_grad()
def posterior_features(model: WorldModel, data: EpisodeTensors, idx: np.ndarray) -> tuple[LatentBelief, Batch]:
    batch = data.batch(idx)
    post, _, _ = model.observe(batch, sample=False)
    return post, batch


@torch.no_grad()
def one_step_prediction_error(model: WorldModel, episodes: Sequence[Episode], stats: NormStats, chunk: int = 256) -> dict:
    """Masked symlog MSE of decoded one-step prior predictions vs. a last-observation baseline."""
    data = EpisodeTensors(episodes, stats)
    se_model = se_persist = 0.0
    count = 0
    for b in range(0, data.N, chunk):
        idx = np.arange(b, min(b + chunk, data.N))
        post, batch = posterior_features(model, data, idx)
        B, T, D = batch.obs.shape
        if T < 2:
            continue
        prev = LatentBelief(post.h[:, :-1].reshape(-1, model.cfg.hidden), post.z[:, :-1].reshape(-1, model.cfg.latent), post.mean[:, :-1].reshape(-1, model.cfg.latent), post.std[:, :-1].reshape(-1, model.cfg.latent))
        acts = batch.actions[:, :-1].reshape(-1)
        pred_state = model.prior_step(prev, acts, sample=False)
        pred = model.recon_head(pred_state.feat).reshape(B, T - 1, D)
        target = symlog(batch.obs[:, 1:])
        m = batch.masks[:, 1:] * batch.valid[:, 1:].unsqueeze(-1)
        # persistence: last observed value strictly before t, else 0 (the training mean)
        last = torch.zeros(B, D)
        persist = []
        for t in range(T - 1):
            last = torch.where(batch.masks[:, t] > 0, batch.obs[:, t], last)
            persist.append(last.clone())
        persist = symlog(torch.stack(persist, 1))
        se_model += float((((pred - target) ** 2) * m).sum())
        se_persist += float((((persist - target) ** 2) * m).sum())
        count += float(m.sum())
    mse_model = se_model / max(count, 1.0)
    mse_persist = se_persist / max(count, 1.0)
    return {"mse_model": mse_model, "mse_persistence": mse_persist, "relative_improvement": 1.0 - mse_model / mse_persist, "count": count}


@torch.no_grad()
def reward_prediction_error(model: WorldModel, episodes: Sequence[Episode], stats: NormStats, mode: str = "prior", chunk: int = 256) -> float:
    """MSE between decoded reward-head predictions and logged rewards.

    ``mode="prior"`` predicts r_t one step ahead, from h_t and the prior mean
    before o_t is seen; ``mode="posterior"`` scores the filtered state instead.
    """
    if mode not in ("prior", "posterior"):
        raise ValueError(f"unknown mode {mode!r}")
    data = EpisodeTensors(episodes, stats)
    se = 0.0
    n = 0.0
    for b in range(0, data.N, chunk):
        idx = np.arange(b, min(b + chunk, data.N))
        batch = data.batch(idx)
        post, prior_mean, _ = model.observe(batch, sample=False)
        feat = post.feat if mode == "posterior" else torch.cat([post.h, prior_mean], -1)
        pred = model.reward(feat)
        se += float((((pred - batch.rewards) ** 2) * batch.valid).sum())
        n += float(batch.valid.sum())
    return se / max(n, 1.0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = "1"


def save_checkpoint(path, modules: dict[str, nn.Module], meta: dict) -> None:
    """All named tensors of ``modules`` in one safetensors file with JSON metadata."""
    import json

    from safetensors.torch import save_file

    tensors = {}
    for prefix, mod in modules.items():
        for name, t in mod.state_dict().items():
            tensors[f"{prefix}.{name}"] = t.detach().contiguous().clone()
    # one metadata key: safetensors writes a multi-key metadata map in unspecified order
    header = json.dumps({"version": CHECKPOINT_VERSION, "meta": meta}, sort_keys=True)
    save_file(tensors, str(path), metadata={"latentrx": header})


def load_checkpoint(path) -> tuple[dict[str, dict[str, torch.Tensor]], dict]:
    import json

    from safetensors import safe_open

    groups: dict[str, dict[str, torch.Tensor]] = {}
    with safe_open(str(path), framework="pt") as f:
        md = json.loads((f.metadata() or {}).get("latentrx", "{}"))
        if md.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {md.get('version')!r}")
        for key in f.keys():
            prefix, name = key.split(".", 1)
            groups.setdefault(prefix, {})[name] = f.get_tensor(key)
    return groups, md["meta"]


def save_worldmodel(path, model: WorldModel, stats: NormStats, extra: dict | None = None) -> None:
    meta = {"kind": "worldmodel", "config": model.cfg.to_dict(), "stats": stats.to_dict(), **(extra or {})}
    save_checkpoint(path, {"wm": model}, meta)


def load_worldmodel(path) -> tuple[WorldModel, NormStats, dict]:
    groups, meta = load_checkpoint(path)
    if meta.get("kind") != "worldmodel" or "wm" not in groups:
        raise ValueError(f"{path} is not a world-model checkpoint")
    model = WorldModel(WorldModelConfig(**meta["config"]))
    model.load_state_dict({k: v.to(numkit.dtype()) for k, v in groups["wm"].items()})
    model.eval()
    return model, NormStats.from_dict(meta["stats"]), meta
