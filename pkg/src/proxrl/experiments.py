"""Simulation studies: OPE mean-squared-error sweeps and OPL method comparisons.

Every replication draws its dataset from a seed derived from
``(experiment seed, size index, replication)``; all methods in a replication
share that dataset. Oracle truths for fixed target policies are computed once
per experiment and shared by every method.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import to_dict
from .environment import ConfoundedEnvSpec, rollout, true_policy_value
from .errors import ConfigurationError, FixtureError, ProxRLError
from .ope import BridgeProblem, EstimatorConfig, Mode, fit_q
from .opl import config_hash, default_learner, learn_policy
from .policy import PolicyClass, PolicyParams, softplus_inv

log = logging.getLogger(__name__)

OPE_SWEEP = "ope_sweep"
OPL_COMPARE = "opl_compare"
DIAGNOSTIC = "diagnostic"
NEAR_BEHAVIOR = "near_behavior"
NEAR_OPTIMAL = "near_optimal"

DEFAULT_SIZES = ((25, 25), (50, 25), (75, 50), (100, 50))
DESK_REPLICATIONS = 20
PAPER_REPLICATIONS = 50
FIXTURE_DIR = Path(__file__).parent / "fixtures"
NEAR_OPTIMAL_FIXTURE = FIXTURE_DIR / "near_optimal.json"

METHOD_LABELS = {Mode.PROXIMAL: "Proposed", Mode.MDPW: "MDPW", Mode.MDP: "MDP"}
CLASS_LABELS = {"gaussian_mlp": "NN-Gaussian", "beta_mlp": "NN-Beta",
                "gaussian_linear": "Linear-Gaussian", "beta_linear": "Linear-Beta",
                "beta_scaled_linear": "ScaledLinear-Beta"}
EXTERNAL_BASELINES = ("SAC", "CQL", "IQL")


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str = OPE_SWEEP
    sizes: tuple = DEFAULT_SIZES
    replications: int = DESK_REPLICATIONS
    methods: tuple = ("proximal", "mdpw", "mdp")
    policy_classes: tuple = ("gaussian_linear", "beta_linear")  # OPL only
    targets: tuple = (NEAR_BEHAVIOR,)  # OPE only
    seed: int = 0
    gamma: float = 0.9
    env: ConfoundedEnvSpec = field(default_factory=ConfoundedEnvSpec)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    learner: dict = field(default_factory=dict)  # overrides on top of the per-class defaults
    oracle_n_mc: int = 1000
    oracle_tail_tol: float = 1e-3
    workers: int = 1

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        if self.kind not in (OPE_SWEEP, OPL_COMPARE, DIAGNOSTIC):
            raise ConfigurationError(f"unknown experiment kind {self.kind!r}")
        set_("sizes", tuple((int(n), int(T)) for n, T in self.sizes))
        if not self.sizes:
            raise ConfigurationError("sizes must be nonempty")
        if any(n < 1 or T < 1 for n, T in self.sizes):
            raise ConfigurationError("every size needs n >= 1 and T >= 1")
        if self.replications < 1:
            raise ConfigurationError("replications must be >= 1")
        set_("methods", tuple(Mode(m).value for m in self.methods))
        set_("policy_classes", tuple(self.policy_classes))
        for v in self.policy_classes:
            if v not in CLASS_LABELS:
                raise ConfigurationError(f"unknown policy class {v!r}")
        set_("targets", tuple(self.targets))
        for t in self.targets:
            if t not in (NEAR_BEHAVIOR, NEAR_OPTIMAL):
                raise ConfigurationError(f"unknown target policy {t!r}")
        if isinstance(self.env, dict):
            set_("env", ConfoundedEnvSpec(**self.env))
        if isinstance(self.estimator, dict):
            set_("estimator", EstimatorConfig(**self.estimator))
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")

    def to_dict(self) -> dict:
        return to_dict(self)


@dataclass
class ResultRecord:
    method: str
    policy_class: str
    target: str
    n: int
    T: int
    replication: int
    seed: int
    estimate: float
    truth: float
    squared_error: float
    status: str = "ok"
    wall_time: float = 0.0


RESULT_FIELDS = [f for f in ResultRecord.__dataclass_fields__]


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# ----------------------------------------------------------------------------
# target policies

def make_target_policy(name: str, fixture_path: Path | None = None) -> tuple[PolicyClass, np.ndarray]:
    """``near_behavior``: Gaussian-linear with mean ``-o/3`` and sd about 0.4.
    ``near_optimal``: the shipped checkpoint of a long learning run."""
    if name == NEAR_BEHAVIOR:
        pc = PolicyClass("gaussian_linear")
        return pc, np.array([0.0, -1.0 / 3.0, softplus_inv(0.4 - 1e-3), 0.0])
    if name == NEAR_OPTIMAL:
        path = Path(fixture_path or NEAR_OPTIMAL_FIXTURE)
        if not path.exists():
            raise FixtureError(f"missing target-policy fixture {path}; build it with "
                               "proxrl.experiments.build_near_optimal_fixture()")
        try:
            blob = json.loads(path.read_text())
            return PolicyClass.from_dict(blob["class"]), np.asarray(blob["zeta"], float)
        except (KeyError, ValueError) as exc:
            raise FixtureError(f"unreadable fixture {path}: {exc}") from exc
    raise ConfigurationError(f"unknown target policy {name!r}")


def build_near_optimal_fixture(path: Path | None = None, n: int = 200, T: int = 25, seed: int = 20240,
                               max_iter: int = 400, env: ConfoundedEnvSpec | None = None) -> dict:
    """Learn a Gaussian-linear policy on a large behaviour dataset and write its checkpoint."""
    env = env or ConfoundedEnvSpec()
    pc = PolicyClass("gaussian_linear")
    data = rollout(env, None, n, T, seed=seed)
    learner = default_learner(pc, max_iter=max_iter)
    zeta, trace = learn_policy(data, pc, learner, seed=0)
    blob = {"class": pc.to_dict(), "zeta": [float(v) for v in zeta],
            "generating_seed": seed, "n": n, "T": T, "learner": learner.to_dict(),
            "best_iteration": trace.best_iteration, "J_hat": float(trace.values.max())}
    path = Path(path or NEAR_OPTIMAL_FIXTURE)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n")
    return blob


# ----------------------------------------------------------------------------
# cells

def _ope_cell(args):
    spec, size_idx, rep, targets = args
    n, T = spec.sizes[size_idx]
    seed = derive_seed(spec.seed, size_idx, rep)
    rows = []
    t0 = time.perf_counter()
    try:
        data = rollout(spec.env, None, n, T, seed=seed, gamma=spec.gamma)
    except ProxRLError as exc:
        return [ResultRecord(m, "", t, n, T, rep, seed, math.nan, truth, math.nan,
                             f"failed: {type(exc).__name__}") for t, (_, _, truth) in targets.items()
                for m in spec.methods]
    for target, (pc, zeta, truth) in targets.items():
        for method in spec.methods:
            t1 = time.perf_counter()
            cfg = replace(spec.estimator, mode=Mode(method))
            try:
                problem = BridgeProblem(data, cfg)
                q = fit_q(data, pc, zeta, cfg, problem=problem)
                est = problem.value(q, pc, zeta)
                status = "ok" if np.isfinite(est) else "nonfinite"
            except ProxRLError as exc:
                log.warning("OPE cell %s (%d,%d) rep %d failed: %s", method, n, T, rep, exc)
                est, status = math.nan, f"failed: {type(exc).__name__}"
            rows.append(ResultRecord(method, pc.variant, target, n, T, rep, seed, float(est), truth,
                                     float((est - truth) ** 2), status, time.perf_counter() - t1))
    log.info("OPE (%d,%d) rep %d done in %.1fs", n, T, rep, time.perf_counter() - t0)
    return rows


def _opl_cell(args):
    spec, size_idx, rep = args
    n, T = spec.sizes[size_idx]
    seed = derive_seed(spec.seed, size_idx, rep)
    oracle_seed = derive_seed(spec.seed, size_idx, rep, 1)
    rows = []
    try:
        data = rollout(spec.env, None, n, T, seed=seed, gamma=spec.gamma)
    except ProxRLError as exc:
        return [ResultRecord(m, v, "", n, T, rep, seed, math.nan, math.nan, math.nan,
                             f"failed: {type(exc).__name__}")
                for m in spec.methods for v in spec.policy_classes]
    for method in spec.methods:
        cfg = replace(spec.estimator, mode=Mode(method))
        problem = None
        for variant in spec.policy_classes:
            t1 = time.perf_counter()
            pc = PolicyClass(variant)
            try:
                problem = problem or BridgeProblem(data, cfg)
                learner = default_learner(pc, cfg, **spec.learner)
                zeta, _ = learn_policy(data, pc, learner, seed=seed, problem=problem)
                oracle = true_policy_value(spec.env, PolicyParams(pc, zeta), n_mc=spec.oracle_n_mc,
                                           gamma=spec.gamma, tail_tol=spec.oracle_tail_tol, seed=oracle_seed)
                value, status = oracle.value, "ok"
            except ProxRLError as exc:
                log.warning("OPL cell %s/%s (%d,%d) rep %d failed: %s", method, variant, n, T, rep, exc)
                value, status = math.nan, f"failed: {type(exc).__name__}"
            rows.append(ResultRecord(method, variant, "", n, T, rep, seed, float(value), math.nan,
                                     math.nan, status, time.perf_counter() - t1))
            log.info("OPL %s/%s (%d,%d) rep %d: %.3f", method, variant, n, T, rep, value)
    return rows


def _run_cells(fn, tasks, workers):
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, tasks))
    else:
        results = [fn(t) for t in tasks]
    return [row for rows in results for row in rows]


# ----------------------------------------------------------------------------
# drivers

def oracle_truths(spec: ExperimentSpec) -> dict:
    """``{target: (class, zeta, truth)}`` plus ``{target: se}``; one oracle run per target."""
    out, ses = {}, {}
    for i, target in enumerate(spec.targets):
        pc, zeta = make_target_policy(target)
        oracle = true_policy_value(spec.env, PolicyParams(pc, zeta), n_mc=spec.oracle_n_mc,
                                   gamma=spec.gamma, tail_tol=spec.oracle_tail_tol,
                                   seed=derive_seed(spec.seed, 99_991, i))
        out[target] = (pc, zeta, oracle.value)
        ses[target] = oracle.se
    return out, ses


def run_ope_sweep(spec: ExperimentSpec) -> "ExperimentResult":
    if spec.kind == DIAGNOSTIC and spec.env.obs_noise_sd != 0:
        spec = replace(spec, env=replace(spec.env, obs_noise_sd=0.0))
    targets, ses = oracle_truths(spec)
    tasks = [(spec, k, r, targets) for k in range(len(spec.sizes)) for r in range(spec.replications)]
    rows = _run_cells(_ope_cell, tasks, spec.workers)
    truth = {t: {"value": v[2], "se": ses[t]} for t, v in targets.items()}
    return ExperimentResult(spec, rows, ope_summary(rows, spec), truth)


def run_opl_compare(spec: ExperimentSpec) -> "ExperimentResult":
    tasks = [(spec, k, r) for k in range(len(spec.sizes)) for r in range(spec.replications)]
    rows = _run_cells(_opl_cell, tasks, spec.workers)
    return ExperimentResult(spec, rows, opl_summary(rows, spec), {})


def run_experiment(spec: ExperimentSpec) -> "ExperimentResult":
    return run_opl_compare(spec) if spec.kind == OPL_COMPARE else run_ope_sweep(spec)


# ----------------------------------------------------------------------------
# aggregation

def _ok(rows):
    return [r for r in rows if r.status == "ok"]


def ope_summary(rows: list[ResultRecord], spec: ExperimentSpec) -> list[dict]:
    """Per (target, size, method): MSE and log relative MSE (MSE / truth^2) with 95% normal intervals."""
    cells = []
    for target in spec.targets:
        for n, T in spec.sizes:
            for method in spec.methods:
                sel = [r for r in rows if (r.target, r.n, r.T, r.method) == (target, n, T, method)]
                ok = _ok(sel)
                cell = {"target": target, "n": n, "T": T, "method": method,
                        "n_ok": len(ok), "n_failed": len(sel) - len(ok)}
                if ok:
                    truth = ok[0].truth
                    se2 = np.array([r.squared_error for r in ok])
                    est = np.array([r.estimate for r in ok])
                    mse = float(se2.mean())
                    half = 1.96 * float(se2.std(ddof=1) / np.sqrt(len(ok))) if len(ok) > 1 else math.nan
                    rel = mse / truth**2
                    log_half = half / mse if mse > 0 else math.nan
                    cell.update(truth=truth, mean_estimate=float(est.mean()), bias=float(est.mean() - truth),
                                mse=mse, mse_ci_low=max(mse - half, 0.0), mse_ci_high=mse + half,
                                relative_mse=rel, log_relative_mse=math.log(rel),
                                log_relative_mse_ci_low=math.log(rel) - log_half,
                                log_relative_mse_ci_high=math.log(rel) + log_half)
                cells.append(cell)
    return cells


def opl_summary(rows: list[ResultRecord], spec: ExperimentSpec) -> list[dict]:
    cells = []
    for method in spec.methods:
        for variant in spec.policy_classes:
            for n, T in spec.sizes:
                sel = [r for r in rows if (r.method, r.policy_class, r.n, r.T) == (method, variant, n, T)]
                ok = _ok(sel)
                vals = np.array([r.estimate for r in ok])
                cells.append({"method": method, "policy_class": variant, "label": table_label(method, variant),
                              "n": n, "T": T, "n_ok": len(ok), "n_failed": len(sel) - len(ok),
                              "mean": float(vals.mean()) if len(ok) else math.nan,
                              "sd": float(vals.std(ddof=1)) if len(ok) > 1 else math.nan})
    return cells


def table_label(method: str, variant: str) -> str:
    return f"{METHOD_LABELS[Mode(method)]}-{CLASS_LABELS[variant]}"


def table_rows(summary: list[dict], spec: ExperimentSpec) -> list[list[str]]:
    """Method-by-class rows and one column per ``(n, T)``; cells read ``mean (sd)``."""
    header = ["method"] + [f"({n}, {T})" for n, T in spec.sizes]
    out = [header]
    for method in spec.methods:
        for variant in spec.policy_classes:
            line = [table_label(method, variant)]
            for n, T in spec.sizes:
                c = next(c for c in summary if (c["method"], c["policy_class"], c["n"], c["T"])
                         == (method, variant, n, T))
                line.append(f"{c['mean']:.2f} ({c['sd']:.2f})" if c["n_ok"] else "failed")
            out.append(line)
        if Mode(method) is not Mode.PROXIMAL:
            for name in EXTERNAL_BASELINES:
                out.append([f"{METHOD_LABELS[Mode(method)]}-{name}"] + ["external"] * len(spec.sizes))
    return out


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    rows: list[ResultRecord]
    summary: list[dict]
    truth: dict

    def summary_json(self) -> dict:
        """Machine-readable summary; contains no wall-clock fields."""
        cfg = self.spec.to_dict()
        return {"kind": self.spec.kind, "version": __version__, "config_hash": config_hash(cfg),
                "config": cfg, "oracle": self.truth, "cells": self.summary}

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "results.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESULT_FIELDS)
            for r in self.rows:
                w.writerow([_fmt(getattr(r, f)) for f in RESULT_FIELDS])
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if self.spec.kind == OPL_COMPARE:
                w.writerows(table_rows(self.summary, self.spec))
            else:
                keys = list(self.summary[0]) if self.summary else []
                for c in self.summary:
                    keys += [k for k in c if k not in keys]
                w.writerow(keys)
                for c in self.summary:
                    w.writerow([_fmt(c.get(k, "")) for k in keys])
        (out / "summary.json").write_text(json.dumps(_json_safe(self.summary_json()), indent=2,
                                                     sort_keys=True) + "\n")


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def trend_inversions(values) -> int:
    """Number of consecutive pairs that increase."""
    v = list(values)
    return sum(1 for a, b in zip(v, v[1:]) if b > a)
