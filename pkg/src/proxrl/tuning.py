"""K-fold cross-validation over ``(lambda_n, mu_n)``."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

from .data import Dataset, split_kfold
from .errors import ConfigurationError, ProxRLError
from .ope import BridgeProblem, Mode, fit_q
from .opl import LearnerConfig, learn_policy
from .policy import PolicyClass

log = logging.getLogger(__name__)

OPL_VALUE = "opl_value"
OPE_LOSS = "ope_loss"
DEFAULT_LAMBDAS = (1e-6, 1e-5, 1e-4)
DEFAULT_MUS = (1e-4, 1e-3, 1e-2)


def default_grid() -> list[tuple[float, float]]:
    return list(product(DEFAULT_LAMBDAS, DEFAULT_MUS))


@dataclass(frozen=True)
class CvPlan:
    grid: list = field(default_factory=default_grid)
    k: int = 5
    objective: str = OPL_VALUE
    seed: int = 0
    target_zeta: tuple | None = None  # fixed policy for the ope_loss objective

    def __post_init__(self):
        grid = [(float(l), float(m)) for l, m in self.grid]
        if not grid:
            raise ConfigurationError("CV grid is empty")
        if any(m <= 0 for _, m in grid):
            raise ConfigurationError("every grid entry needs mu > 0")
        if any(l < 0 for l, _ in grid):
            raise ConfigurationError("every grid entry needs lambda >= 0")
        if self.objective not in (OPL_VALUE, OPE_LOSS):
            raise ConfigurationError(f"unknown CV objective {self.objective!r}")
        if self.objective == OPE_LOSS and self.target_zeta is None:
            raise ConfigurationError("the ope_loss objective needs target_zeta")
        object.__setattr__(self, "grid", grid)


@dataclass
class CvRow:
    lambda_n: float
    mu_n: float
    fold: int
    objective_value: float
    status: str


@dataclass
class CvResult:
    lambda_star: float
    mu_star: float
    table: list[CvRow]
    objective: str

    def mean_scores(self) -> list[tuple[float, float, float]]:
        return _mean_scores(self.table)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lambda", "mu", "fold", "objective_value", "status"])
            for r in self.table:
                w.writerow([repr(r.lambda_n), repr(r.mu_n), r.fold, repr(r.objective_value), r.status])


def _mean_scores(table: list[CvRow]):
    """Fold-mean per grid entry in first-occurrence order; entries with any failed fold are dropped."""
    order, cells = [], {}
    for r in table:
        key = (r.lambda_n, r.mu_n)
        if key not in cells:
            order.append(key)
            cells[key] = []
        cells[key].append(r)
    out = []
    for key in order:
        rows = cells[key]
        if all(r.status == "ok" for r in rows):
            out.append((key[0], key[1], float(np.mean([r.objective_value for r in rows]))))
    return out


def select(table: list[CvRow], objective: str) -> tuple[float, float]:
    """Argmax (opl_value) or argmin (ope_loss) of the fold means; ties go to the earliest grid entry."""
    scores = _mean_scores(table)
    if not scores:
        raise ProxRLError("cross-validation failed: every grid entry failed in at least one fold")
    sign = 1.0 if objective == OPL_VALUE else -1.0
    best = max(range(len(scores)), key=lambda i: (sign * scores[i][2], -i))
    return scores[best][0], scores[best][1]


def cross_validate(dataset: Dataset, pc: PolicyClass, plan: CvPlan, learner: LearnerConfig) -> CvResult:
    folds = split_kfold(dataset, plan.k, plan.seed)
    table: list[CvRow] = []
    seen: dict = {}
    for cell, (lam, mu) in enumerate(plan.grid):
        if (lam, mu) in seen:
            # identical configuration; reuse the scores so duplicates tie exactly
            table.extend(replace(r) for r in seen[(lam, mu)])
            continue
        rows = []
        est = replace(learner.estimator, lambda_n=lam, mu_n=mu)
        for r, (train, val) in enumerate(folds):
            try:
                value = _fold_score(train, val, pc, plan, replace(learner, estimator=est),
                                    seed=plan.seed * 100_003 + cell * 101 + r)
                rows.append(CvRow(lam, mu, r, value, "ok" if np.isfinite(value) else "nonfinite"))
            except ProxRLError as exc:
                warnings.warn(f"CV entry lambda={lam}, mu={mu}, fold {r} failed: {exc}", RuntimeWarning)
                rows.append(CvRow(lam, mu, r, float("nan"), f"failed: {type(exc).__name__}"))
        seen[(lam, mu)] = rows
        table.extend(rows)
    lam_star, mu_star = select(table, plan.objective)
    return CvResult(lam_star, mu_star, table, plan.objective)


def _fold_score(train, val, pc, plan, learner, seed) -> float:
    if plan.objective == OPL_VALUE:
        zeta, _ = learn_policy(train, pc, learner, seed=seed)
        val_cfg = replace(learner.estimator, mode=Mode.PROXIMAL, optimizer="closed_form", bandwidth=None)
        problem = BridgeProblem(val, val_cfg)
        q = fit_q(val, pc, zeta, val_cfg, problem=problem)
        return problem.value(q, pc, zeta)
    zeta = np.asarray(plan.target_zeta, float)
    est = learner.estimator
    q = fit_q(train, pc, zeta, est, problem=BridgeProblem(train, est))
    val_problem = BridgeProblem(val, est)
    return val_problem.loss(q, pc, zeta)
