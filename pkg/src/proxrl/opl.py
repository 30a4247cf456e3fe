"""Policy-gradient search for the in-class policy maximising the estimated value.

Each outer iteration refits the bridge at the current policy, then takes an
ascent step ``zeta <- zeta + (beta0 / sqrt(j)) * grad J_hat(zeta)``.

Two gradients are available:

``first_term``
    ``E_D[ int grad_zeta pi(a | O_0) q(O_0, W_0, a) da ]`` with the bridge held fixed.
``full_implicit``
    Adds ``E_D[ int pi(a | O_0) grad_zeta q(O_0, W_0, a) da ]`` by differentiating
    the closed-form bridge ``theta*(zeta)`` through its normal equations.
    Only for linear bridges fitted in closed form.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigurationError, EstimationError
from .ope import (BridgeProblem, EstimatorConfig, LinearQ, _solve_normal_equations,
                  closed_form_system, fit_q_sgd)
from .policy import PolicyClass, PolicyParams

log = logging.getLogger(__name__)

FIRST_TERM = "first_term"
FULL_IMPLICIT = "full_implicit"


@dataclass(frozen=True)
class LearnerConfig:
    beta0: float = 0.3
    max_iter: int = 200
    tol: float = 1e-4
    gradient_mode: str = FIRST_TERM
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    init: str = "zeros"  # or "random"
    return_best: bool = True
    warm_start: bool = True

    def __post_init__(self):
        if isinstance(self.estimator, dict):
            object.__setattr__(self, "estimator", EstimatorConfig(**self.estimator))
        if self.beta0 < 0:
            raise ConfigurationError("beta0 must be >= 0")
        if not self.tol > 0:
            raise ConfigurationError("tol must be > 0")
        if self.gradient_mode not in (FIRST_TERM, FULL_IMPLICIT):
            raise ConfigurationError(f"unknown gradient mode {self.gradient_mode!r}")
        if self.init not in ("zeros", "random"):
            raise ConfigurationError(f"unknown init {self.init!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimator"] = self.estimator.to_dict()
        return d


# (beta0, max_iter) per policy family; Beta heads start from a flat U-shaped density
# and need larger and more numerous steps than Gaussian heads.
FAMILY_STEPS = {"gaussian": (0.3, 200), "beta": (3.0, 500)}


def default_learner(pc: PolicyClass, estimator: EstimatorConfig | None = None, **overrides) -> LearnerConfig:
    beta0, max_iter = FAMILY_STEPS[pc.family]
    kw = dict(beta0=beta0, max_iter=max_iter, estimator=estimator or EstimatorConfig())
    kw.update(overrides)
    return LearnerConfig(**kw)


def _check_full_implicit(q, config: EstimatorConfig):
    if not isinstance(q, LinearQ):
        raise ConfigurationError("full_implicit gradients need a linear bridge")
    if config.optimizer != "closed_form":
        raise ConfigurationError("full_implicit gradients need closed-form bridge fitting")


def first_term_grad(problem: BridgeProblem, q, pc: PolicyClass, zeta) -> np.ndarray:
    _, dens_grad = pc.density_and_grad(zeta, problem.o0, problem.nodes0)
    qv = q(problem.X0)  # (n, m)
    return np.einsum("m,nm,nmp->p", problem.rule.weights, qv, dens_grad) / problem.dataset.n


def implicit_grad(problem: BridgeProblem, q: LinearQ, pc: PolicyClass, zeta) -> np.ndarray:
    """``E_D[int pi(a|O_0) psi(O_0, W_0, a) da] . d theta*/d zeta``.

    With ``phi = A theta - b`` and ``H = A'CA + lambda I``, ``H theta* = A'Cb``;
    differentiating gives ``H dtheta_k = dA_k' C (b - A theta*) - A'C dA_k theta*``
    where ``dA_k = -gamma sum_j w_j d_k pi(node_j | O') psi(O', W', node_j)``.
    """
    degree = problem.config.degree
    _, F_next, F0 = problem.features(degree)
    H, _, A, CA = closed_form_system(problem, pc, zeta)
    theta = q.theta
    _, dpi_next = pc.density_and_grad(zeta, problem.tr.o_next, problem.nodes_next)  # (N, m, p)
    w = problem.rule.weights
    dA = -problem.gamma * np.einsum("m,nmk,nmf->knf", w, dpi_next, F_next)
    resid = problem.tr.r - A @ theta  # b - A theta
    Cresid = problem.critic.apply(resid)
    rhs = np.einsum("knf,n->fk", dA, Cresid) - CA.T @ np.einsum("knf,f->nk", dA, theta)
    dtheta = _solve_normal_equations(H, rhs)  # (f, p)
    W0 = problem.init_weights(pc, zeta)
    mean_psi0 = np.einsum("nm,nmf->f", W0, F0) / problem.dataset.n
    return mean_psi0 @ dtheta


def policy_value_grad(zeta, q, dataset: Dataset, pc: PolicyClass, config: EstimatorConfig,
                      mode: str = FIRST_TERM, problem: BridgeProblem | None = None) -> np.ndarray:
    if mode not in (FIRST_TERM, FULL_IMPLICIT):
        raise ConfigurationError(f"unknown gradient mode {mode!r}")
    if mode == FULL_IMPLICIT:
        _check_full_implicit(q, config)
    problem = problem or BridgeProblem(dataset, config, critic=mode == FULL_IMPLICIT)
    grad = first_term_grad(problem, q, pc, zeta)
    if mode == FULL_IMPLICIT:
        grad = grad + implicit_grad(problem, q, pc, zeta)
    return grad


@dataclass
class IterationRecord:
    iteration: int
    value: float
    grad_norm: float
    loss: float
    step_norm: float


@dataclass
class LearnTrace:
    records: list[IterationRecord] = field(default_factory=list)
    best_iteration: int = 0
    converged: bool = False
    seed: int = 0

    @property
    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.records])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "J_hat", "grad_norm", "loss", "step_norm"])
            for r in self.records:
                w.writerow([r.iteration, repr(r.value), repr(r.grad_norm), repr(r.loss), repr(r.step_norm)])


def _fit(problem, pc, zeta, q_prev):
    config = problem.config
    if config.optimizer == "closed_form":
        H, g, _, _ = closed_form_system(problem, pc, zeta)
        return LinearQ(_solve_normal_equations(H, g), config.degree, config.mode)
    q, _ = fit_q_sgd(problem.dataset, pc, zeta, config, q0=q_prev, problem=problem)
    return q


def learn_policy(dataset: Dataset, pc: PolicyClass, learner: LearnerConfig, seed: int = 0,
                 zeta0=None, problem: BridgeProblem | None = None):
    """Alternate bridge refits and gradient ascent; returns ``(zeta, LearnTrace)``.

    ``zeta`` is the iterate with the highest recorded ``J_hat`` unless
    ``learner.return_best`` is False, in which case it is the last iterate.
    """
    config = learner.estimator
    problem = problem or BridgeProblem(dataset, config)
    rng = np.random.default_rng(seed)
    if zeta0 is not None:
        zeta = np.array(zeta0, float)
    elif learner.init == "random" or pc.head == "mlp":
        zeta = pc.init_params(rng)
    else:
        zeta = pc.init_params()
    if learner.gradient_mode == FULL_IMPLICIT and config.optimizer != "closed_form":
        raise ConfigurationError("full_implicit gradients need closed-form bridge fitting")

    trace = LearnTrace(seed=seed)
    q = None
    best_value, best_zeta = -np.inf, zeta.copy()
    for j in range(1, learner.max_iter + 1):
        try:
            q = _fit(problem, pc, zeta, q if learner.warm_start else None)
        except EstimationError as exc:
            raise EstimationError(f"bridge fit failed at outer iteration {j}: {exc}") from exc
        value = problem.value(q, pc, zeta)
        grad = first_term_grad(problem, q, pc, zeta)
        if learner.gradient_mode == FULL_IMPLICIT:
            grad = grad + implicit_grad(problem, q, pc, zeta)
        if not np.all(np.isfinite(grad)) or not np.isfinite(value):
            log.error("non-finite gradient or value at iteration %d; stopping", j)
            trace.records.append(IterationRecord(j, float(value), float("nan"), float("nan"), 0.0))
            break
        if value > best_value:
            best_value, best_zeta, trace.best_iteration = value, zeta.copy(), j
        step = (learner.beta0 / np.sqrt(j)) * grad
        step_norm = float(np.linalg.norm(step))
        trace.records.append(IterationRecord(j, float(value), float(np.linalg.norm(grad)),
                                             problem.loss(q, pc, zeta), step_norm))
        zeta = zeta + step
        if step_norm <= learner.tol:
            trace.converged = True
            break
    if not learner.return_best:
        return zeta, trace
    return best_zeta, trace


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def policy_checkpoint(params: PolicyParams, trace: LearnTrace, learner: LearnerConfig, seed: int) -> dict:
    return {
        "class": params.policy_class.to_dict(),
        "zeta": [float(v) for v in params.zeta],
        "trace": [[r.iteration, r.value] for r in trace.records],
        "config_hash": config_hash(learner.to_dict()),
        "seed": seed,
    }
