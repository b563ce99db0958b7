"""Command-line entry point: data generation, training, evaluation and ablations."""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import evalkit, numkit
from .config import ConfigError, RunConfig, load_config
from .episodes import Episode, load_episode_file, load_episodes, save_episodes
from .policy import AgentPolicy, PolicyBundle, PolicyConfig, PosteriorCache, train_phase1, train_phase2
from .synthicu import ClinicianPolicy, discounted_return, simulate, true_policy_value
from .worldmodel import (
    WorldModel,
    freeze,
    load_checkpoint,
    load_worldmodel,
    save_checkpoint,
    save_worldmodel,
    train_worldmodel,
)

log = logging.getLogger("latentrx")

PHASE2_ONLY = ("horizon", "lr_phase2", "epochs_phase2", "start_stride", "phase2_starts")


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# stage hashes: each artifact is named by the config slice that determines it
# ---------------------------------------------------------------------------


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:12]


def data_hash(cfg: RunConfig) -> str:
    r = cfg.resolved()
    return _digest({k: r[k] for k in ("schema", "seed", "data", "sim", "reward")})


def world_hash(cfg: RunConfig) -> str:
    return _digest({"data": data_hash(cfg), "world": asdict(cfg.world), "precision": cfg.precision})


def policy_hash(cfg: RunConfig, phase: int) -> str:
    p = asdict(cfg.policy)
    if phase == 1:
        p = {k: v for k, v in p.items() if k not in PHASE2_ONLY}
    return _digest({"world": world_hash(cfg), "policy": p, "phase": phase})


class Paths:
    def __init__(self, cfg: RunConfig):
        self.root = cfg.output_root()
        self.cfg = cfg
        self.dh, self.wh = data_hash(cfg), world_hash(cfg)

    def data(self, split: str) -> Path:
        return self.root / f"episodes-{split}.{self.dh}.jsonl"

    def truth(self) -> Path:
        return self.root / f"ground-truth.{self.dh}.json"

    def world(self) -> Path:
        return self.root / f"world.{self.wh}.safetensors"

    def world_trace(self) -> Path:
        return self.root / f"world-trace.{self.wh}.csv"

    def policy(self, phase: int, cold: bool = False) -> Path:
        tag = "phase2-cold" if cold else f"phase{phase}"
        return self.root / f"policy-{tag}.{policy_hash(self.cfg, phase)}.safetensors"

    def policy_trace(self, phase: int, cold: bool = False) -> Path:
        tag = "phase2-cold" if cold else f"phase{phase}"
        return self.root / f"policy-trace-{tag}.{policy_hash(self.cfg, phase)}.csv"

    def eval(self, name: str, ext: str = "csv") -> Path:
        return self.root / f"{name}.{self.cfg.hash}.{ext}"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CommandError(f"missing {what}: {path}")
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_synthetic(cfg: RunConfig, args) -> dict:
    paths = Paths(cfg)
    paths.root.mkdir(parents=True, exist_ok=True)
    sim = cfg.sim_config()
    clin = ClinicianPolicy(sim)
    train = simulate(sim, clin, cfg.data.n_train, cfg.reward, seed=cfg.data.seed, id_prefix="train")
    test = simulate(sim, clin, cfg.data.n_test, cfg.reward, seed=cfg.data.seed + 1, id_prefix="test")
    save_episodes(train.episodes, paths.data("train"), sim.feature_names)
    save_episodes(test.episodes, paths.data("test"), sim.feature_names)
    truth = {"train": train.summary(), "test": test.summary(), "sim": sim.to_dict(), "reward": asdict(cfg.reward)}
    evalkit.write_json(paths.truth(), truth)
    return {"train": str(paths.data("train")), "test": str(paths.data("test")), "ground_truth": str(paths.truth())}


def _load_split(cfg: RunConfig, split: str) -> list[Episode]:
    path = _require(Paths(cfg).data(split), f"{split} episodes (run gen-synthetic first)")
    f = load_episode_file(path)
    sim = cfg.sim_config()
    if f.D != sim.D:
        raise CommandError(f"{path}: D={f.D} but config expects D={sim.D}")
    eps = load_episodes(path)
    bad = [ep.id for ep in eps if ep.schema != cfg.schema]
    if bad:
        raise CommandError(f"{path}: episode {bad[0]} has schema mismatching config schema {cfg.schema!r}")
    return eps


def cmd_train_world(cfg: RunConfig, args) -> dict:
    paths = Paths(cfg)
    eps = _load_split(cfg, "train")
    sim = cfg.sim_config()
    wc = cfg.world_config(sim.D, sim.A)
    res = train_worldmodel(eps, wc)
    save_worldmodel(paths.world(), res.model, res.stats)
    cols = ["epoch", "L_rew", "L_con", "L_rec", "L_D"]
    evalkit.write_csv(paths.world_trace(), res.trace, cols)
    return {"checkpoint": str(paths.world()), "trace": str(paths.world_trace()), "final_loss": res.trace[-1]["total"] if res.trace else None}


def _load_world(cfg: RunConfig, path: str | None):
    p = Path(path) if path else Paths(cfg).world()
    model, stats, _ = load_worldmodel(_require(p, "world-model checkpoint (run train-world first)"))
    sim = cfg.sim_config()
    if model.cfg.D != sim.D or model.cfg.A != sim.A:
        raise CommandError(f"{p}: checkpoint (D={model.cfg.D}, A={model.cfg.A}) does not match config (D={sim.D}, A={sim.A})")
    return freeze(model), stats


def save_policy(path: Path, bundle: PolicyBundle) -> None:
    meta = {"kind": "policy", "config": bundle.cfg.to_dict(), "A": bundle.A, "feat_dim": bundle.feat_dim, "phases": bundle.phases_done, "return_range": bundle.normalizer.range}
    save_checkpoint(path, {"actor": bundle.actor, "critic": bundle.critic, "target": bundle.target_critic}, meta)


def load_policy(path: Path) -> PolicyBundle:
    groups, meta = load_checkpoint(_require(Path(path), "policy checkpoint"))
    if meta.get("kind") != "policy":
        raise CommandError(f"{path} is not a policy checkpoint")
    b = PolicyBundle(meta["feat_dim"], meta["A"], PolicyConfig(**meta["config"]))
    dt = numkit.dtype()
    b.actor.load_state_dict({k: v.to(dt) for k, v in groups["actor"].items()})
    b.critic.load_state_dict({k: v.to(dt) for k, v in groups["critic"].items()})
    b.target_critic.load_state_dict({k: v.to(dt) for k, v in groups["target"].items()})
    b.phases_done = list(meta["phases"])
    b.normalizer.range = meta["return_range"]
    return b


POLICY_TRACE_COLS = ["step", "epoch", "actor_loss", "critic_loss", "entropy", "mean_return"]


def run_policy_training(cfg: RunConfig, model: WorldModel, cache: PosteriorCache, phase: str, allow_cold_start: bool, p1_path: Path | None = None):
    """Returns (bundle, phase-1 snapshot or None, {phase: trace}). ``phase`` is "1", "2" or "both"."""
    traces = {}
    snapshot = None
    if phase in ("1", "both"):
        bundle = PolicyBundle(model.cfg.feat_dim, model.cfg.A, cfg.policy)
        traces[1] = train_phase1(cache, model, bundle).trace
        snapshot = copy.deepcopy(bundle)
    else:
        if p1_path is not None and p1_path.exists():
            bundle = load_policy(p1_path)
        elif allow_cold_start:
            bundle = PolicyBundle(model.cfg.feat_dim, model.cfg.A, cfg.policy)
        else:
            raise CommandError(f"phase 2 needs a phase-1 checkpoint ({p1_path}) or --allow-cold-start for the imagination-only variant")
        bundle.cfg = cfg.policy
    if phase in ("2", "both"):
        res = train_phase2(cache, model, bundle, allow_cold_start=allow_cold_start)
        if res.logged_action_reads:
            raise CommandError("phase 2 read logged actions")
        traces[2] = res.trace
    return bundle, snapshot, traces


def cmd_train_policy(cfg: RunConfig, args) -> dict:
    paths = Paths(cfg)
    model, stats = _load_world(cfg, args.checkpoint)
    eps = _load_split(cfg, "train")
    cache = PosteriorCache(model, eps, stats)
    p1 = Path(args.policy) if args.policy else paths.policy(1)
    bundle, snapshot, traces = run_policy_training(cfg, model, cache, args.phase, args.allow_cold_start, p1)
    out = {}
    cold = args.phase == "2" and 1 not in bundle.phases_done
    if snapshot is not None:
        save_policy(paths.policy(1), snapshot)
        evalkit.write_csv(paths.policy_trace(1), traces[1], POLICY_TRACE_COLS)
        out["phase1"] = str(paths.policy(1))
    if 2 in traces:
        save_policy(paths.policy(2, cold), bundle)
        evalkit.write_csv(paths.policy_trace(2, cold), traces[2], POLICY_TRACE_COLS)
        out["phase2"] = str(paths.policy(2, cold))
    return out


def evaluate_bundle(cfg: RunConfig, model: WorldModel, stats, bundle: PolicyBundle, test: list[Episode], pi_b: list[np.ndarray]) -> dict:
    sim = cfg.sim_config()
    agent = AgentPolicy(model, bundle, stats, mode=cfg.evaluate.act_mode, seed=cfg.seed)
    pi = [agent.episode_probs(ep) for ep in test]
    clip = (cfg.evaluate.clip_low, cfg.evaluate.clip_high)
    report = evalkit.evaluate_policy(test, pi, pi_b, cfg.reward.gamma, clip)
    truth = true_policy_value(sim, AgentPolicy(model, bundle, stats, mode=cfg.evaluate.act_mode, seed=cfg.seed), cfg.evaluate.n_true, cfg.reward, seed=cfg.evaluate.true_seed)
    return {"ope": report.to_dict(), "true_value": truth.mean, "true_se": truth.se, "true_mortality": truth.mortality, "pi": pi}


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    paths = Paths(cfg)
    paths.root.mkdir(parents=True, exist_ok=True)
    model, stats = _load_world(cfg, args.checkpoint)
    if args.policy:
        ppath = Path(args.policy)
    else:
        ppath = paths.policy(2) if paths.policy(2).exists() else paths.policy(1)
    bundle = load_policy(ppath)
    train, test = _load_split(cfg, "train"), _load_split(cfg, "test")
    sim = cfg.sim_config()
    schema = sim.action_schema
    behavior = evalkit.fit_behavior(train, sim.A, cfg.behavior)
    pi_b = behavior.probs(test)
    ev = evaluate_bundle(cfg, model, stats, bundle, test, pi_b)
    report = ev["ope"]
    evalkit.write_csv(paths.eval("ope"), [report], list(report))

    returns = np.array([discounted_return(ep.rewards, cfg.reward.gamma) for ep in test])
    died = np.array([ep.outcome == "deceased" for ep in test])
    curve = evalkit.mortality_vs_return(returns, died, cfg.evaluate.bins)
    evalkit.write_csv(paths.eval("mortality-vs-return"), curve.rows(), ["return_center", "mortality", "count"])

    recommended = [p.argmax(-1) for p in ev["pi"]]
    severity_index = cfg.reward.sofa_index if cfg.schema == "sepsis" else 0
    dose = evalkit.dose_difference_table(test, recommended, schema, severity_index)
    evalkit.write_csv(paths.eval("dose-difference"), dose, ["dimension", "stratum", "dose_difference", "mortality", "count"])
    maps = {
        "policy": evalkit.heatmaps_by_stratum(test, recommended, schema, severity_index),
        "clinician": evalkit.heatmaps_by_stratum(test, [ep.actions for ep in test], schema, severity_index),
    }
    rows = [{"source": src, **row} for src, m in maps.items() for row in evalkit.heatmap_rows(m, schema)]
    evalkit.write_csv(paths.eval("action-heatmap"), rows, ["source", "stratum", "action", "levels", "frequency"])

    clin = true_policy_value(sim, ClinicianPolicy(sim), cfg.evaluate.n_true, cfg.reward, seed=cfg.evaluate.true_seed)
    summary = {
        "config_hash": cfg.hash,
        "policy_checkpoint": ppath.name,
        "ope": report,
        "true_value": {"policy": ev["true_value"], "policy_se": ev["true_se"], "policy_mortality": ev["true_mortality"], "clinician": clin.mean, "clinician_se": clin.se, "clinician_mortality": clin.mortality},
        "estimated_mortality": curve.estimate(report["WIS"]),
        "mortality_curve_correlation": curve.correlation,
        "mortality_curve_p_value": curve.p_value,
        "behavior": {"val_accuracy": behavior.val_accuracy, "val_loss": behavior.val_loss, "epochs": behavior.epochs},
        "overrides": list(args.set or []),
    }
    evalkit.write_json(paths.eval("summary", "json"), summary)
    return {"summary": str(paths.eval("summary", "json"))}


ABLATIONS = {
    "afi": [("AFI", {"world.encoder": "afi"}), ("No AFI", {"world.encoder": "plain"})],
    "phase": [("MDP1 Only", {"_phase": "1"}), ("MDP2 Only", {"_phase": "2"}), ("Two-phase", {"_phase": "both"})],
    "tau": [(f"tau={t}", {"policy.tau": t}) for t in (5, 10, 30, 50)],
    "horizon": [(f"H={h}", {"policy.horizon": h}) for h in (5, 15, 25, 35)],
}


def cmd_ablate(cfg: RunConfig, args) -> dict:
    from .config import from_dict

    paths = Paths(cfg)
    paths.root.mkdir(parents=True, exist_ok=True)
    train, test = _load_split(cfg, "train"), _load_split(cfg, "test")
    sim = cfg.sim_config()
    behavior = evalkit.fit_behavior(train, sim.A, cfg.behavior)
    pi_b = behavior.probs(test)
    rows = []
    worlds: dict[str, tuple] = {}
    for name, change in ABLATIONS[args.axis]:
        d = cfg.to_dict()
        phase = change.get("_phase", "both")
        for key, value in change.items():
            if key.startswith("_"):
                continue
            section, field_name = key.split(".")
            d[section][field_name] = value
        if d["policy"]["tau"] >= d["policy"]["batch_length"]:
            # a suffix at least as long as the real prefix needs a longer window
            d["policy"]["batch_length"] = d["policy"]["tau"] + 1
        vcfg = from_dict(d)
        wkey = world_hash(vcfg)
        if wkey not in worlds:
            res = train_worldmodel(train, vcfg.world_config(sim.D, sim.A))
            worlds[wkey] = (freeze(res.model), res.stats)
        model, stats = worlds[wkey]
        cache = PosteriorCache(model, train, stats)
        bundle, _, _ = run_policy_training(vcfg, model, cache, phase, allow_cold_start=(phase == "2"))
        ev = evaluate_bundle(vcfg, model, stats, bundle, test, pi_b)
        o = ev["ope"]
        rows.append({"variant": name, "T": vcfg.policy.batch_length, "tau": vcfg.policy.tau, "H": vcfg.policy.horizon, "WIS": o["WIS"], "WPDIS": o["WPDIS"], "CWPDIS": o["CWPDIS"], "ESS": o["ESS"], "true_value": ev["true_value"], "true_se": ev["true_se"], "true_mortality": ev["true_mortality"]})
    out = paths.eval(f"ablation-{args.axis}")
    evalkit.write_csv(out, rows, list(rows[0]))
    return {"table": str(out)}


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train-world": cmd_train_world,
    "train-policy": cmd_train_policy,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentrx", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", "-c", help="YAML run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. policy.tau=5 (repeatable)")
        sp.add_argument("--output-dir", help="override output_dir")

    common(sub.add_parser("gen-synthetic", help="simulate train/test episode files"))
    sp = sub.add_parser("train-world", help="train the world model")
    common(sp)
    sp = sub.add_parser("train-policy", help="train the actor-critic")
    common(sp)
    sp.add_argument("--checkpoint", help="world-model checkpoint (default: derived from config)")
    sp.add_argument("--policy", help="phase-1 policy checkpoint used by --phase 2")
    sp.add_argument("--phase", choices=["1", "2", "both"], default="both")
    sp.add_argument("--tau", type=int, help="imagined suffix length for phase 1")
    sp.add_argument("--horizon", type=int, help="imagination horizon for phase 2")
    sp.add_argument("--allow-cold-start", action="store_true", help="permit phase 2 without a phase-1 policy")
    sp = sub.add_parser("evaluate", help="off-policy evaluation and analysis tables")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--policy")
    sp = sub.add_parser("ablate", help="ablation comparison table")
    common(sp)
    sp.add_argument("--axis", choices=sorted(ABLATIONS), required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = list(args.set or [])
    if getattr(args, "tau", None) is not None:
        overrides.append(f"policy.tau={args.tau}")
    if getattr(args, "horizon", None) is not None:
        overrides.append(f"policy.horizon={args.horizon}")
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    args.set = overrides
    try:
        if args.config and not Path(args.config).exists():
            raise CommandError(f"config file not found: {args.config}")
        cfg = load_config(args.config, overrides)
        numkit.set_precision(cfg.precision)
        numkit.seed_everything(cfg.seed)
        torch.use_deterministic_algorithms(True)
        result = COMMANDS[args.command](cfg, args)
    except (CommandError, ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
