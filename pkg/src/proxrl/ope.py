"""Kernel minimax estimation of Q-bridge functions and policy values.

For a target policy ``pi`` the Bellman residual of a candidate bridge ``q``
at tuple ``k`` is ::

    phi_k(q) = q(O_t, W_t, A_t) - R_t - gamma * int pi(a | O_{t+1}) q(O_{t+1}, W_{t+1}, a) da

With a Gaussian-RKHS critic ``f`` over ``(O_{t-1}, A_{t-1}, O_t, A_t)``,
penalised by ``1/2 E_D[f^2] + mu ||f||^2``, the inner maximisation has the
closed form ::

    max_f = phi' K (K + 2 N mu I)^{-1} phi / (2 N)

where ``N = nT`` and ``K`` is the critic kernel matrix.  This equals
``regularized_kernel_quadform(K, mu, phi) / (4 mu N^2)``.  The loss adds
``lambda ||theta||^2``.

Baseline modes reuse the same machinery with remapped inputs:

==========  ==========================  ===============================
mode        bridge input                critic input
==========  ==========================  ===============================
proximal    (o, w, a)                   (o_prev, a_prev, o, a)
mdpw        ((o, w), a)                 ((o, w), a)
mdp         (o, a)                      (o, a)
==========  ==========================  ===============================
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np
import scipy.linalg

from .data import Dataset, Transitions, to_transition_tuples
from .errors import ConfigurationError, DivergenceError, EstimationError
from .numerics import QUADRATURE_RULES, GaussianKernel, make_rule, median_heuristic, polynomial_feature_matrix
from .policy import PolicyClass

log = logging.getLogger(__name__)


class Mode(str, Enum):
    PROXIMAL = "proximal"
    MDPW = "mdpw"
    MDP = "mdp"


@dataclass(frozen=True)
class SgdConfig:
    batch_size: int | None = None  # None: full batch
    lr: float | None = None  # None: 1 / (largest eigenvalue of the full-batch Hessian)
    max_iter: int = 20000
    tol: float = 1e-6
    seed: int = 0
    # step j is lr / sqrt(1 + (j - 1) / decay_offset); decay_offset=1 gives lr / sqrt(j)
    decay_offset: float = 1000.0

    def __post_init__(self):
        if not self.decay_offset > 0:
            raise ConfigurationError("decay_offset must be > 0")
        if self.lr is not None and self.lr < 0:
            raise ConfigurationError("lr must be >= 0")
        if self.max_iter < 0:
            raise ConfigurationError("max_iter must be >= 0")


@dataclass(frozen=True)
class EstimatorConfig:
    lambda_n: float = 1e-5
    mu_n: float = 1e-4
    mode: Mode = Mode.PROXIMAL
    optimizer: str = "closed_form"  # or "sgd"
    sgd: SgdConfig = field(default_factory=SgdConfig)
    bandwidth: float | None = None  # None: median heuristic on the critic inputs
    quad_nodes: int = 21
    quadrature: str = "gauss_legendre"  # or "tanh_sinh"
    degree: int = 2
    gamma: float | None = None  # None: use the dataset's discount
    max_pairs: int = 250_000

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.lambda_n < 0:
            raise ConfigurationError("lambda_n must be >= 0")
        if not self.mu_n > 0:
            raise ConfigurationError("mu_n must be > 0")
        if self.optimizer not in ("closed_form", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.quadrature not in QUADRATURE_RULES:
            raise ConfigurationError(f"unknown quadrature {self.quadrature!r}")
        if isinstance(self.sgd, dict):
            object.__setattr__(self, "sgd", SgdConfig(**self.sgd))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


def bridge_inputs(mode: Mode, o, w, a) -> np.ndarray:
    """Concatenate bridge inputs; ``o``/``w`` have shape (..., d) and ``a`` shape (...)."""
    a = np.asarray(a, float)[..., None]
    if Mode(mode) is Mode.MDP:
        return np.concatenate([o, a], axis=-1)
    return np.concatenate([o, w, a], axis=-1)


def critic_inputs(mode: Mode, tr: Transitions) -> np.ndarray:
    mode = Mode(mode)
    if mode is Mode.PROXIMAL:
        return np.hstack([tr.o_prev, tr.a_prev[:, None], tr.o, tr.a[:, None]])
    if mode is Mode.MDPW:
        return np.hstack([tr.o, tr.w, tr.a[:, None]])
    return np.hstack([tr.o, tr.a[:, None]])


# ----------------------------------------------------------------------------
# Bridge function classes

@dataclass(frozen=True)
class LinearQ:
    """``q(x) = psi(x) . theta`` with monomial features ``psi`` of total degree <= ``degree``."""

    theta: np.ndarray
    degree: int = 2
    mode: Mode = Mode.PROXIMAL

    def __post_init__(self):
        theta = np.array(self.theta, float)
        if not np.all(np.isfinite(theta)):
            raise EstimationError("bridge coefficients are not finite")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "mode", Mode(self.mode))

    @property
    def params(self) -> np.ndarray:
        return self.theta

    def with_params(self, theta) -> "LinearQ":
        return replace(self, theta=theta)

    def features(self, X) -> np.ndarray:
        return polynomial_feature_matrix(X, self.degree)

    def __call__(self, X) -> np.ndarray:
        return self.features(X) @ self.theta

    def backward(self, X, weights) -> np.ndarray:
        """``sum_k weights_k grad_theta q(X_k)`` for ``X`` of shape (..., d) and weights (...)."""
        F = self.features(X)
        return np.tensordot(weights, F, axes=weights.ndim)

    def penalty(self) -> float:
        return float(self.theta @ self.theta)

    @classmethod
    def zeros(cls, n_inputs: int, degree: int = 2, mode: Mode = Mode.PROXIMAL) -> "LinearQ":
        from .numerics import n_monomials
        return cls(np.zeros(n_monomials(n_inputs, degree)), degree, mode)

    def to_dict(self) -> dict:
        return {"kind": "linear", "degree": self.degree, "mode": self.mode.value,
                "theta": [float(v) for v in self.theta]}


@dataclass(frozen=True)
class MlpQ:
    """One-hidden-layer tanh network; parameters flattened as (W1, b1, w2, b2)."""

    theta: np.ndarray
    n_inputs: int
    hidden: int = 32
    mode: Mode = Mode.PROXIMAL

    def __post_init__(self):
        theta = np.array(self.theta, float)
        if theta.shape != (self.n_params(self.n_inputs, self.hidden),):
            raise ConfigurationError("MLP bridge parameter vector has the wrong length")
        if not np.all(np.isfinite(theta)):
            raise EstimationError("bridge coefficients are not finite")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "mode", Mode(self.mode))

    @staticmethod
    def n_params(n_inputs: int, hidden: int) -> int:
        return hidden * n_inputs + 2 * hidden + 1

    @property
    def params(self) -> np.ndarray:
        return self.theta

    def with_params(self, theta) -> "MlpQ":
        return replace(self, theta=theta)

    def _unpack(self):
        H, d = self.hidden, self.n_inputs
        t = self.theta
        return t[:H * d].reshape(H, d), t[H * d:H * d + H], t[H * d + H:H * d + 2 * H], t[-1]

    def __call__(self, X) -> np.ndarray:
        W1, b1, w2, b2 = self._unpack()
        return np.tanh(X @ W1.T + b1) @ w2 + b2

    def backward(self, X, weights) -> np.ndarray:
        W1, b1, w2, _ = self._unpack()
        Xf = X.reshape(-1, X.shape[-1])
        wf = np.asarray(weights, float).reshape(-1)
        h = np.tanh(Xf @ W1.T + b1)
        dpre = (wf[:, None] * (1 - h**2)) * w2
        return np.concatenate([(dpre.T @ Xf).ravel(), dpre.sum(0), wf @ h, [wf.sum()]])

    def penalty(self) -> float:
        W1, _, w2, _ = self._unpack()
        return float(np.sum(W1**2) + np.sum(w2**2))

    @classmethod
    def init(cls, n_inputs: int, hidden: int = 32, mode: Mode = Mode.PROXIMAL, seed: int = 0) -> "MlpQ":
        rng = np.random.default_rng(seed)
        theta = 0.1 * rng.standard_normal(cls.n_params(n_inputs, hidden))
        return cls(theta, n_inputs, hidden, mode)

    def to_dict(self) -> dict:
        return {"kind": "mlp", "n_inputs": self.n_inputs, "hidden": self.hidden,
                "mode": self.mode.value, "theta": [float(v) for v in self.theta]}


def _penalty_grad(q) -> np.ndarray:
    if isinstance(q, LinearQ):
        return 2.0 * q.theta
    W1, _, w2, _ = q._unpack()
    g = np.zeros_like(q.theta)
    H, d = q.hidden, q.n_inputs
    g[:H * d] = 2.0 * W1.ravel()
    g[H * d + H:H * d + 2 * H] = 2.0 * w2
    return g


# ----------------------------------------------------------------------------
# Critic operator

class CriticOperator:
    """Applies ``C = K (K + 2 N mu I)^{-1} / (2 N)`` through a Cholesky factorisation.

    ``phi' C phi`` is the value of the penalised inner maximisation over the
    critic.  ``C`` is symmetric PSD because ``K`` and ``(K + sI)^{-1}`` commute.
    """

    def __init__(self, K: np.ndarray, mu: float):
        N = K.shape[0]
        self.N, self.mu = N, mu
        self.shift = 2.0 * N * mu
        Ks = K + self.shift * np.eye(N)
        try:
            self._chol = scipy.linalg.cho_factor(Ks, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            Ks += 1e-10 * np.trace(K) / N * np.eye(N)
            self._chol = scipy.linalg.cho_factor(Ks, lower=True, check_finite=False)

    def apply(self, X: np.ndarray) -> np.ndarray:
        # K (K + sI)^{-1} = I - s (K + sI)^{-1}
        Y = scipy.linalg.cho_solve(self._chol, X, check_finite=False)
        return (X - self.shift * Y) / (2.0 * self.N)

    def quad(self, phi: np.ndarray) -> float:
        return float(phi @ self.apply(phi))


# ----------------------------------------------------------------------------
# Problem cache

class BridgeProblem:
    """Everything about one (dataset, estimator config) pair that does not depend on the policy.

    Holds the transition tuples, bridge inputs at the observed actions and on
    the quadrature grid, the critic bandwidth and the critic operator.
    """

    def __init__(self, dataset: Dataset, config: EstimatorConfig, critic: bool = True):
        self.dataset, self.config = dataset, config
        self.mode = config.mode
        self.gamma = dataset.gamma if config.gamma is None else float(config.gamma)
        self.rule = make_rule(config.quadrature, config.quad_nodes, dataset.action_interval)
        self.tr = to_transition_tuples(dataset)
        nodes = self.rule.nodes
        m = len(nodes)
        tr = self.tr
        self.X = bridge_inputs(self.mode, tr.o, tr.w, tr.a)
        self.X_next = bridge_inputs(self.mode, np.repeat(tr.o_next[:, None, :], m, 1),
                                    np.repeat(tr.w_next[:, None, :], m, 1),
                                    np.broadcast_to(nodes, (len(tr), m)))
        o0, w0 = dataset.obs[:, 0, :], dataset.proxy[:, 0, :]
        self.o0 = o0
        self.X0 = bridge_inputs(self.mode, np.repeat(o0[:, None, :], m, 1),
                                np.repeat(w0[:, None, :], m, 1),
                                np.broadcast_to(nodes, (dataset.n, m)))
        self.nodes_next = np.broadcast_to(nodes, (len(tr), m))
        self.nodes0 = np.broadcast_to(nodes, (dataset.n, m))
        self.Z = critic_inputs(self.mode, tr)
        self.bandwidth = (config.bandwidth if config.bandwidth is not None
                          else median_heuristic(self.Z, config.max_pairs, seed=0))
        self.kernel = GaussianKernel(self.bandwidth)
        self._critic = None
        self._features = {}
        if critic:
            self.critic

    @property
    def N(self) -> int:
        return len(self.tr)

    @property
    def n_inputs(self) -> int:
        return self.X.shape[1]

    @property
    def critic(self) -> CriticOperator:
        if self._critic is None:
            self._critic = CriticOperator(self.kernel.matrix(self.Z), self.config.mu_n)
        return self._critic

    def kernel_matrix(self) -> np.ndarray:
        return self.kernel.matrix(self.Z)

    def features(self, degree: int):
        """Monomial features at the observed tuples, the next-step grid and the initial grid."""
        if degree not in self._features:
            self._features[degree] = (polynomial_feature_matrix(self.X, degree),
                                      polynomial_feature_matrix(self.X_next, degree),
                                      polynomial_feature_matrix(self.X0, degree))
        return self._features[degree]

    def next_weights(self, pc: PolicyClass, zeta) -> np.ndarray:
        """``w_j pi(node_j | O_{t+1})``, shape (N, m)."""
        return self.rule.weights * pc.density(zeta, self.tr.o_next, self.nodes_next)

    def init_weights(self, pc: PolicyClass, zeta) -> np.ndarray:
        return self.rule.weights * pc.density(zeta, self.o0, self.nodes0)

    # linear-in-features pieces: phi(theta) = A theta - b

    def design(self, pc: PolicyClass, zeta, degree: int):
        F, F_next, _ = self.features(degree)
        Wn = self.next_weights(pc, zeta)
        A = F - self.gamma * np.einsum("nm,nmp->np", Wn, F_next)
        return A, self.tr.r

    def residuals(self, q, pc: PolicyClass, zeta) -> np.ndarray:
        Wn = self.next_weights(pc, zeta)
        return q(self.X) - self.tr.r - self.gamma * np.sum(Wn * q(self.X_next), axis=1)

    def value(self, q, pc: PolicyClass, zeta) -> float:
        W0 = self.init_weights(pc, zeta)
        return float(np.mean(np.sum(W0 * q(self.X0), axis=1)))

    def loss(self, q, pc: PolicyClass, zeta) -> float:
        phi = self.residuals(q, pc, zeta)
        return self.critic.quad(phi) + self.config.lambda_n * q.penalty()

    def loss_grad(self, q, pc: PolicyClass, zeta) -> np.ndarray:
        phi = self.residuals(q, pc, zeta)
        Wn = self.next_weights(pc, zeta)
        g = 2.0 * self.critic.apply(phi)
        grad = q.backward(self.X, g) - self.gamma * q.backward(self.X_next, g[:, None] * Wn)
        return grad + self.config.lambda_n * _penalty_grad(q)

    def zero_q(self):
        return LinearQ.zeros(self.n_inputs, self.config.degree, self.mode)


# ----------------------------------------------------------------------------
# Public operations

def expected_q(pc: PolicyClass, zeta, o, w, q, rule, mode: Mode | None = None) -> np.ndarray | float:
    """``sum_j weight_j pi(node_j | o) q(o, w, node_j)`` for one or many ``(o, w)``."""
    mode = Mode(mode or getattr(q, "mode", Mode.PROXIMAL))
    o, w = np.asarray(o, float), np.asarray(w, float)
    single = o.ndim == 1
    O, W = np.atleast_2d(o), np.atleast_2d(w)
    m = len(rule.nodes)
    nodes = np.broadcast_to(rule.nodes, (O.shape[0], m))
    X = bridge_inputs(mode, np.repeat(O[:, None], m, 1), np.repeat(W[:, None], m, 1), nodes)
    vals = np.sum(rule.weights * pc.density(zeta, O, nodes) * q(X), axis=1)
    return float(vals[0]) if single else vals


def residual_vector(q, dataset: Dataset, pc: PolicyClass, zeta, config: EstimatorConfig) -> np.ndarray:
    return BridgeProblem(dataset, config, critic=False).residuals(q, pc, zeta)


def ustat_loss(q, dataset: Dataset, pc: PolicyClass, zeta, config: EstimatorConfig,
               problem: BridgeProblem | None = None) -> float:
    problem = problem or BridgeProblem(dataset, config)
    return problem.loss(q, pc, zeta)


def ustat_loss_grad(q, dataset: Dataset, pc: PolicyClass, zeta, config: EstimatorConfig,
                    problem: BridgeProblem | None = None) -> np.ndarray:
    problem = problem or BridgeProblem(dataset, config)
    return problem.loss_grad(q, pc, zeta)


def _solve_normal_equations(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    H = 0.5 * (H + H.T)
    for jitter in (0.0, 1e-10):
        try:
            theta = scipy.linalg.solve(H + jitter * np.eye(len(H)), g, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            continue
        if np.all(np.isfinite(theta)):
            return theta
    raise EstimationError("bridge normal equations are singular; increase lambda_n")


def closed_form_system(problem: BridgeProblem, pc: PolicyClass, zeta):
    """Hessian/2 and right-hand side of the quadratic loss in ``theta``: ``(A'CA + lambda I, A'Cb)``."""
    A, b = problem.design(pc, zeta, problem.config.degree)
    CA = problem.critic.apply(A)
    H = A.T @ CA + problem.config.lambda_n * np.eye(A.shape[1])
    g = CA.T @ b
    return H, g, A, CA


def fit_q_closed_form(dataset: Dataset, pc: PolicyClass, zeta, config: EstimatorConfig,
                      problem: BridgeProblem | None = None) -> LinearQ:
    problem = problem or BridgeProblem(dataset, config)
    H, g, _, _ = closed_form_system(problem, pc, zeta)
    return LinearQ(_solve_normal_equations(H, g), config.degree, config.mode)


@dataclass
class SgdReport:
    iterations: int
    converged: bool
    lr: float
    loss_trace: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)


def fit_q_sgd(dataset: Dataset, pc: PolicyClass, zeta, config: EstimatorConfig, q0=None,
              problem: BridgeProblem | None = None, record_every: int = 1):
    """Mini-batch gradient descent on the loss with step ``lr / sqrt(1 + (j-1)/decay_offset)``.

    Each step draws ``batch_size`` tuples without replacement and uses the
    loss restricted to that batch (kernel sub-matrix, frozen bandwidth).
    Returns ``(q, SgdReport)``.
    """
    problem = problem or BridgeProblem(dataset, config, critic=False)
    sgd = config.sgd
    q = q0 if q0 is not None else problem.zero_q()
    N = problem.N
    n0 = N if sgd.batch_size is None else min(int(sgd.batch_size), N)
    full = n0 == N
    Wn_all = problem.next_weights(pc, zeta)
    rng = np.random.default_rng(sgd.seed)

    def batch_terms(idx):
        if full:
            return problem.critic, problem.X, problem.X_next, problem.tr.r, Wn_all
        Kb = problem.kernel.matrix(problem.Z[idx])
        return (CriticOperator(Kb, config.mu_n), problem.X[idx], problem.X_next[idx],
                problem.tr.r[idx], Wn_all[idx])

    def loss_and_grad(q, terms):
        crit, X, Xn, r, Wn = terms
        phi = q(X) - r - problem.gamma * np.sum(Wn * q(Xn), axis=1)
        g = 2.0 * crit.apply(phi)
        grad = q.backward(X, g) - problem.gamma * q.backward(Xn, g[:, None] * Wn)
        grad = grad + config.lambda_n * _penalty_grad(q)
        return float(phi @ g) / 2.0 + config.lambda_n * q.penalty(), grad

    lr = sgd.lr
    if lr is None:
        if isinstance(q, LinearQ):
            H, _, _, _ = closed_form_system(problem, pc, zeta)
            lr = 1.0 / (2.0 * np.linalg.eigvalsh(0.5 * (H + H.T))[-1])
        else:
            lr = 1e-2
    report = SgdReport(0, False, float(lr))
    terms = batch_terms(None) if full else None
    theta = q.params.copy()
    for j in range(1, sgd.max_iter + 1):
        if not full:
            terms = batch_terms(rng.choice(N, n0, replace=False))
        loss, grad = loss_and_grad(q, terms)
        if not np.isfinite(loss) or loss > 1e6:
            raise DivergenceError(f"SGD diverged at iteration {j} (loss={loss:.3g}); use a smaller lr")
        step = (lr / np.sqrt(1.0 + (j - 1) / sgd.decay_offset)) * grad
        theta = theta - step
        q = q.with_params(theta)
        step_norm = float(np.linalg.norm(step))
        report.iterations = j
        if j % record_every == 0:
            report.loss_trace.append(loss)
            report.step_norms.append(step_norm)
        if step_norm <= sgd.tol:
            report.converged = True
            break
    return q, report


def fit_q(dataset: Dataset, pc: PolicyClass, zeta, config: EstimatorConfig, q0=None,
          problem: BridgeProblem | None = None):
    """Dispatch on ``config.optimizer``; always returns a bridge."""
    if config.optimizer == "closed_form":
        return fit_q_closed_form(dataset, pc, zeta, config, problem)
    q, _ = fit_q_sgd(dataset, pc, zeta, config, q0=q0, problem=problem)
    return q


def estimate_policy_value(q, dataset: Dataset, pc: PolicyClass, zeta, config: EstimatorConfig,
                          problem: BridgeProblem | None = None) -> float:
    """Average of ``int pi(a | O_0) q(O_0, W_0, a) da`` over trajectories."""
    problem = problem or BridgeProblem(dataset, config, critic=False)
    return problem.value(q, pc, zeta)


@dataclass
class EstimateResult:
    mode: str
    lambda_n: float
    mu_n: float
    bandwidth: float
    q: object
    value: float
    loss: float
    loss_trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "lambda": self.lambda_n, "mu": self.mu_n,
                "bandwidth": self.bandwidth, "theta": [float(v) for v in self.q.params],
                "bridge": self.q.to_dict(), "loss": self.loss,
                "loss_trace": [float(v) for v in self.loss_trace], "J_hat": self.value}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate_policy(dataset: Dataset, pc: PolicyClass, zeta, config: EstimatorConfig, q0=None) -> EstimateResult:
    """Fit the bridge for ``(pc, zeta)`` and estimate its value."""
    problem = BridgeProblem(dataset, config)
    trace = []
    if config.optimizer == "closed_form":
        q = fit_q_closed_form(dataset, pc, zeta, config, problem)
    else:
        q, report = fit_q_sgd(dataset, pc, zeta, config, q0=q0, problem=problem)
        trace = report.loss_trace
    return EstimateResult(config.mode.value, config.lambda_n, config.mu_n, problem.bandwidth, q,
                          problem.value(q, pc, zeta), problem.loss(q, pc, zeta), trace)
