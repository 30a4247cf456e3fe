"""``proxrl`` command line: simulate, ope, opl, cv, reproduce.

Every subcommand reads an optional JSON config (``--config``), applies
``--set dotted.key=value`` overrides, writes ``resolved_config.json`` to the
output directory and then runs. Exit codes: 0 success, 1 invalid input or
configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import from_dict, set_dotted, to_dict
from .data import load_dataset, write_dataset
from .environment import ConfoundedEnvSpec, rollout, target_policy
from .errors import ConfigurationError, ProxRLError, ValidationError
from .experiments import (DESK_REPLICATIONS, NEAR_BEHAVIOR, NEAR_OPTIMAL, OPE_SWEEP, OPL_COMPARE,
                          PAPER_REPLICATIONS, ExperimentSpec, make_target_policy, run_experiment)
from .ope import EstimatorConfig, evaluate_policy
from .opl import LearnerConfig, config_hash, default_learner, learn_policy, policy_checkpoint
from .policy import PolicyClass, PolicyParams
from .tuning import CvPlan, cross_validate

log = logging.getLogger("proxrl")

# Table-1 desk scale: 10 runs per cell keeps a full reproduction near one hour on one core.
DESK_OPL_REPLICATIONS = 10


@dataclass(frozen=True)
class SimulateSection:
    n: int = 25
    T: int = 25
    gamma: float = 0.9
    policy: str = "behavior"  # or near_behavior / near_optimal


@dataclass(frozen=True)
class DataSection:
    path: str | None = None
    format: str | None = None  # inferred from the file suffix when None
    gamma: float = 0.9
    action_low: float = -1.0
    action_high: float = 1.0


@dataclass(frozen=True)
class TargetSection:
    """Either a named fixture or an explicit ``variant`` + ``zeta``."""
    name: str | None = NEAR_BEHAVIOR
    variant: str | None = None
    zeta: list | None = None


@dataclass(frozen=True)
class TuningSection:
    grid: list | None = None
    k: int = 5
    objective: str = "opl_value"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "proxrl_out"
    workers: int = 1
    log_level: str = "INFO"
    env: ConfoundedEnvSpec = field(default_factory=ConfoundedEnvSpec)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    data: DataSection = field(default_factory=DataSection)
    target: TargetSection = field(default_factory=TargetSection)
    policy_class: str = "gaussian_linear"
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    learner: dict = field(default_factory=dict)
    tuning: TuningSection = field(default_factory=TuningSection)
    experiment: dict = field(default_factory=dict)


def resolve_config(raw: dict) -> RunConfig:
    cfg = from_dict(RunConfig, raw)
    # validate free-form sections now so bad keys fail before any work
    from_dict(LearnerConfig, dict(cfg.learner), "learner")
    from_dict(ExperimentSpec, dict(cfg.experiment), "experiment")
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_raw(args) -> dict:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError("config root must be a JSON object")
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_dotted(raw, key.strip(), _parse_value(value))
    if getattr(args, "data", None):
        set_dotted(raw, "data.path", args.data)
    if getattr(args, "out", None):
        set_dotted(raw, "output_dir", args.out)
    return raw


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_data(cfg: RunConfig):
    if not cfg.data.path:
        raise ConfigurationError("data.path is required (or pass --data)")
    path = Path(cfg.data.path)
    if not path.exists():
        raise ConfigurationError(f"data.path: file not found: {path}")
    return load_dataset(path, cfg.data.format, gamma=cfg.data.gamma,
                        action_interval=(cfg.data.action_low, cfg.data.action_high))


def _target(cfg: RunConfig) -> tuple[PolicyClass, np.ndarray]:
    t = cfg.target
    if t.variant is not None:
        if t.zeta is None:
            raise ConfigurationError("target.zeta is required with target.variant")
        pc = PolicyClass(t.variant)
        zeta = np.asarray(t.zeta, float)
        if zeta.shape != (pc.n_params,):
            raise ConfigurationError(f"target.zeta: expected {pc.n_params} values, got {zeta.size}")
        return pc, zeta
    if t.name is None:
        raise ConfigurationError("target: give a name or variant + zeta")
    return make_target_policy(t.name)


def _learner(cfg: RunConfig, pc: PolicyClass) -> LearnerConfig:
    return default_learner(pc, cfg.estimator, **cfg.learner)


# ----------------------------------------------------------------------------
# subcommands

def cmd_simulate(cfg: RunConfig, out: Path) -> dict:
    s = cfg.simulate
    policy = None
    if s.policy != "behavior":
        if s.policy not in (NEAR_BEHAVIOR, NEAR_OPTIMAL):
            raise ConfigurationError(f"simulate.policy: unknown policy {s.policy!r}")
        policy = target_policy(*make_target_policy(s.policy))
    data = rollout(cfg.env, policy, s.n, s.T, seed=cfg.seed, gamma=s.gamma)
    write_dataset(data, out / "dataset.csv", "csv")
    return {"dataset": str(out / "dataset.csv"), "n": data.n, "T": data.horizon}


def cmd_ope(cfg: RunConfig, out: Path) -> dict:
    data = _load_data(cfg)
    pc, zeta = _target(cfg)
    est = cfg.estimator
    result = evaluate_policy(data, pc, zeta, est)
    blob = result.to_dict()
    blob.update(target={"class": pc.to_dict(), "zeta": [float(v) for v in zeta]}, seed=cfg.seed)
    _write_json(out / "estimator.json", blob)
    return {"J_hat": result.value, "loss": result.loss}


def cmd_opl(cfg: RunConfig, out: Path) -> dict:
    data = _load_data(cfg)
    pc = PolicyClass(cfg.policy_class)
    learner = _learner(cfg, pc)
    zeta, trace = learn_policy(data, pc, learner, seed=cfg.seed)
    _write_json(out / "policy.json", policy_checkpoint(PolicyParams(pc, zeta), trace, learner, cfg.seed))
    trace.write_csv(out / "trace.csv")
    return {"zeta": [float(v) for v in zeta], "best_iteration": trace.best_iteration,
            "J_hat": float(trace.values.max()) if trace.records else None}


def cmd_cv(cfg: RunConfig, out: Path) -> dict:
    data = _load_data(cfg)
    pc = PolicyClass(cfg.policy_class)
    t = cfg.tuning
    kw = {"k": t.k, "objective": t.objective, "seed": cfg.seed}
    if t.grid is not None:
        kw["grid"] = t.grid
    if t.objective == "ope_loss":
        pc, zeta = _target(cfg)  # OPE tuning scores the fixed target's own class
        kw["target_zeta"] = tuple(float(v) for v in zeta)
    result = cross_validate(data, pc, CvPlan(**kw), _learner(cfg, pc))
    result.write_csv(out / "cv_scores.csv")
    return {"lambda_star": result.lambda_star, "mu_star": result.mu_star}


def experiment_spec(cfg: RunConfig, which: str, paper_scale: bool) -> ExperimentSpec:
    """Scale preset, then the run's env/estimator/seed, then explicit ``experiment.*`` keys."""
    base = {"seed": cfg.seed, "workers": cfg.workers, "learner": dict(cfg.learner),
            "env": to_dict(cfg.env), "estimator": to_dict(cfg.estimator)}
    if which == "fig2":
        base.update(kind=OPE_SWEEP, replications=PAPER_REPLICATIONS if paper_scale else DESK_REPLICATIONS)
        if paper_scale:
            base["targets"] = [NEAR_BEHAVIOR, NEAR_OPTIMAL]
    else:
        base.update(kind=OPL_COMPARE,
                    replications=PAPER_REPLICATIONS if paper_scale else DESK_OPL_REPLICATIONS)
        if paper_scale:
            base["policy_classes"] = ["gaussian_mlp", "beta_mlp", "gaussian_linear", "beta_linear"]
    return from_dict(ExperimentSpec, {**base, **cfg.experiment}, "experiment")


def cmd_reproduce(cfg: RunConfig, out: Path, which: str, paper_scale: bool) -> dict:
    spec = experiment_spec(cfg, which, paper_scale)
    result = run_experiment(spec)
    result.write(out)
    return {"summary": str(out / "summary.json"), "cells": len(result.summary),
            "failed_rows": sum(r.status != "ok" for r in result.rows)}


# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="proxrl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry by dotted path; VALUE is parsed as JSON when possible")
    common.add_argument("--out", help="output directory (same as --set output_dir=...)")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate a behaviour dataset -> dataset.csv")
    for name, text in (("ope", "estimate a target policy value -> estimator.json"),
                       ("opl", "learn a policy -> policy.json, trace.csv"),
                       ("cv", "cross-validate (lambda, mu) -> cv_scores.csv")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--data", help="dataset file (same as --set data.path=...)")
    rp = sub.add_parser("reproduce", parents=[common], help="run a simulation study")
    rp.add_argument("study", choices=["fig2", "table1"])
    scale = rp.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", dest="paper_scale", action="store_false",
                       help="reduced replications (default)")
    scale.add_argument("--paper-scale", dest="paper_scale", action="store_true",
                       help="50 replications and the full method/class grid")
    rp.set_defaults(paper_scale=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(_load_raw(args))
        logging.basicConfig(level=getattr(logging, str(cfg.log_level).upper(), logging.INFO),
                            format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
        out = _out_dir(cfg)
        _write_json(out / "resolved_config.json",
                    {"command": args.command, "study": getattr(args, "study", None),
                     "paper_scale": getattr(args, "paper_scale", None), "version": __version__,
                     "config": to_dict(cfg), "config_hash": config_hash(to_dict(cfg))})
        if args.command == "reproduce":
            info = cmd_reproduce(cfg, out, args.study, args.paper_scale)
        else:
            info = {"simulate": cmd_simulate, "ope": cmd_ope, "opl": cmd_opl, "cv": cmd_cv}[args.command](cfg, out)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ProxRLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(info, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
