"""Stochastic policies over a bounded scalar action interval.

Every class is a *head* mapping an observation ``o`` to two raw scores
``z = (z1, z2)`` followed by a *link* mapping the scores to distribution
parameters:

``beta_linear``         z = (zeta1.x, zeta2.x) with x = (1, o);  Beta(softplus z1, softplus z2)
``gaussian_linear``     same head;  tanh-squashed Normal(z1, (softplus z2 + sigma_floor)^2)
``beta_mlp``            z from a one-hidden-layer tanh MLP; Beta link as above
``gaussian_mlp``        MLP head; Gaussian link as above
``beta_scaled_linear``  z = (c1 expit(zeta2.x), c3 expit(zeta4.x));  Beta(1 + z1, 1 + z2)

Beta variants are affinely mapped from ``[0, 1]`` onto the action interval,
the Gaussian variants through ``a = mid + half * tanh(u)``.  Densities are
evaluated in log space.

Vectorised methods take observations of shape ``(N, d_obs)`` and actions of
shape ``(N,)`` or ``(N, m)`` (``m`` actions per observation, e.g. quadrature
nodes).  Gradients are hand-derived.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc, betaincinv, betaln, digamma, expit, ndtr, ndtri

from .errors import ConfigurationError, DomainError

VARIANTS = ("beta_linear", "gaussian_linear", "beta_mlp", "gaussian_mlp", "beta_scaled_linear")
SIGMA_FLOOR = 1e-3
BOUNDARY_EPS = 1e-9
_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


class BoundaryClampWarning(RuntimeWarning):
    """An action on the interval boundary was moved inside before evaluating a density."""


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, float)
    return y + np.log(-np.expm1(-y))


@dataclass(frozen=True)
class PolicyClass:
    variant: str
    obs_dim: int = 1
    hidden: int = 32
    action_interval: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown policy class {self.variant!r}; choose from {VARIANTS}")
        if self.obs_dim < 1 or self.hidden < 1:
            raise ConfigurationError("obs_dim and hidden must be positive")
        lo, hi = (float(v) for v in self.action_interval)
        if not lo < hi:
            raise ConfigurationError(f"empty action interval [{lo}, {hi}]")
        object.__setattr__(self, "action_interval", (lo, hi))

    # -- layout -----------------------------------------------------------

    @property
    def family(self) -> str:
        return "gaussian" if self.variant.startswith("gaussian") else "beta"

    @property
    def head(self) -> str:
        return {"beta_scaled_linear": "scaled"}.get(self.variant, self.variant.split("_")[1])

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        d = self.obs_dim + 1
        if self.head == "linear":
            return [("zeta1", (d,)), ("zeta2", (d,))]
        if self.head == "scaled":
            return [("c1", (1,)), ("zeta2", (d,)), ("c3", (1,)), ("zeta4", (d,))]
        H = self.hidden
        return [("W1", (H, self.obs_dim)), ("b1", (H,)), ("W2", (2, H)), ("b2", (2,))]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout)

    def unpack(self, zeta) -> dict[str, np.ndarray]:
        zeta = np.asarray(zeta, float)
        if zeta.shape != (self.n_params,):
            raise ConfigurationError(f"{self.variant} expects {self.n_params} parameters, got {zeta.shape}")
        out, pos = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = zeta[pos:pos + size].reshape(shape)
            pos += size
        return out

    def init_params(self, rng: np.random.Generator | None = None, scale: float = 0.1) -> np.ndarray:
        """Zeros for linear heads; ``N(0, scale^2)`` entries for MLP heads."""
        if self.head == "mlp":
            rng = rng if rng is not None else np.random.default_rng(0)
            return scale * rng.standard_normal(self.n_params)
        zeta = np.zeros(self.n_params)
        if self.head == "scaled":
            p = self.unpack(zeta)
            zeta[0] = zeta[1 + len(p["zeta2"])] = 1.0
        return zeta

    # -- head -------------------------------------------------------------

    def _head(self, zeta, O, jac: bool):
        """Raw scores ``z`` of shape (N, 2) and, optionally, dz/dzeta of shape (N, 2, p)."""
        P = self.unpack(zeta)
        N = O.shape[0]
        if self.head in ("linear", "scaled"):
            X = np.hstack([np.ones((N, 1)), O])
            d = X.shape[1]
        if self.head == "linear":
            z = np.stack([X @ P["zeta1"], X @ P["zeta2"]], axis=1)
            if not jac:
                return z, None
            J = np.zeros((N, 2, 2 * d))
            J[:, 0, :d] = X
            J[:, 1, d:] = X
            return z, J
        if self.head == "scaled":
            e2, e4 = expit(X @ P["zeta2"]), expit(X @ P["zeta4"])
            c1, c3 = P["c1"][0], P["c3"][0]
            z = np.stack([c1 * e2, c3 * e4], axis=1)
            if not jac:
                return z, None
            J = np.zeros((N, 2, 2 * d + 2))
            J[:, 0, 0] = e2
            J[:, 0, 1:d + 1] = (c1 * e2 * (1 - e2))[:, None] * X
            J[:, 1, d + 1] = e4
            J[:, 1, d + 2:] = (c3 * e4 * (1 - e4))[:, None] * X
            return z, J
        W1, b1, W2, b2 = P["W1"], P["b1"], P["W2"], P["b2"]
        h = np.tanh(O @ W1.T + b1)
        z = h @ W2.T + b2
        if not jac:
            return z, None
        H, dO = W1.shape
        g = 1.0 - h**2  # (N, H)
        blocks = []
        for k in range(2):
            dpre = g * W2[k]  # dz_k / d(pre-activation), (N, H)
            dW1 = (dpre[:, :, None] * O[:, None, :]).reshape(N, H * dO)
            dW2 = np.zeros((N, 2, H))
            dW2[:, k, :] = h
            db2 = np.zeros((N, 2))
            db2[:, k] = 1.0
            blocks.append(np.hstack([dW1, dpre, dW2.reshape(N, 2 * H), db2]))
        return z, np.stack(blocks, axis=1)

    # -- link + log density ------------------------------------------------

    def _dist_params(self, z):
        """Distribution parameters and their derivative w.r.t. the raw scores (elementwise)."""
        if self.family == "gaussian":
            mu, sigma = z[:, 0], softplus(z[:, 1]) + SIGMA_FLOOR
            return mu, sigma, np.ones_like(mu), expit(z[:, 1])
        if self.head == "scaled":
            alpha, beta = 1.0 + z[:, 0], 1.0 + z[:, 1]
            if np.any(alpha <= 0) or np.any(beta <= 0):
                raise DomainError("scaled Beta parameters must stay positive (keep c1, c3 > -1)")
            return alpha, beta, np.ones_like(alpha), np.ones_like(beta)
        return softplus(z[:, 0]), softplus(z[:, 1]), expit(z[:, 0]), expit(z[:, 1])

    def _unit(self, A):
        """Map actions onto the family's reference coordinate; clamp exact boundary hits."""
        lo, hi = self.action_interval
        A = np.asarray(A, float)
        if np.any(A < lo) or np.any(A > hi):
            raise DomainError(f"action outside the interval [{lo}, {hi}]")
        y = (A - lo) / (hi - lo)  # in [0, 1]
        if np.any(y <= 0.0) or np.any(y >= 1.0):
            warnings.warn("action on the interval boundary clamped inside by 1e-9", BoundaryClampWarning,
                          stacklevel=3)
            y = np.clip(y, BOUNDARY_EPS, 1 - BOUNDARY_EPS)
        return y

    def _logpdf(self, z, A, grad: bool):
        """log density (N, m) and d logp / dz (N, m, 2)."""
        lo, hi = self.action_interval
        p1, p2, dp1, dp2 = self._dist_params(z)
        p1, p2, dp1, dp2 = p1[:, None], p2[:, None], dp1[:, None], dp2[:, None]
        y = self._unit(A)
        if self.family == "beta":
            logb, log1mb = np.log(y), np.log1p(-y)
            logp = (p1 - 1) * logb + (p2 - 1) * log1mb - betaln(p1, p2) - np.log(hi - lo)
            if not grad:
                return logp, None
            ds = digamma(p1 + p2)
            g1 = (logb - digamma(p1) + ds) * dp1
            g2 = (log1mb - digamma(p2) + ds) * dp2
        else:
            s = 2.0 * y - 1.0  # tanh(u)
            u = np.arctanh(s)
            r = (u - p1) / p2
            # |da/du| = half * (1 - s^2), half = (hi - lo) / 2; (1 - s^2) = 4 y (1 - y)
            logjac = np.log(0.5 * (hi - lo)) + np.log(4.0) + np.log(y) + np.log1p(-y)
            logp = -0.5 * r**2 - np.log(p2) - _LOG_SQRT_2PI - logjac
            if not grad:
                return logp, None
            g1 = (r / p2) * dp1
            g2 = ((r**2 - 1.0) / p2) * dp2
        return logp, np.stack(np.broadcast_arrays(g1, g2), axis=-1)

    @staticmethod
    def _shape(O, A):
        """Normalise to O (N, d), A (N, m) and return a function restoring the caller's shape.

        A single observation ``o`` (1-D) pairs with a scalar or a vector of
        actions; stacked observations (N, d) pair with actions (N,) or (N, m).
        """
        O, A = np.asarray(O, float), np.asarray(A, float)
        if O.ndim == 1:
            A2 = A.reshape(1, -1)
            restore = (lambda x: float(x[0, 0])) if A.ndim == 0 else (lambda x: x[0])
            return O[None, :], A2, restore
        if A.ndim == 1:
            return O, A[:, None], lambda x: x[:, 0]
        return O, A, lambda x: x

    # -- public API -------------------------------------------------------

    def log_density(self, zeta, O, A):
        O2, A2, restore = self._shape(O, A)
        z, _ = self._head(zeta, O2, jac=False)
        logp, _ = self._logpdf(z, A2, grad=False)
        return restore(logp)

    def density(self, zeta, O, A):
        O2, A2, restore = self._shape(O, A)
        z, _ = self._head(zeta, O2, jac=False)
        logp, _ = self._logpdf(z, A2, grad=False)
        return restore(np.exp(logp))

    def density_and_grad(self, zeta, O, A):
        """Density (N, m) and its zeta-gradient (N, m, p) for observations (N, d) and actions (N, m)."""
        O = np.atleast_2d(np.asarray(O, float))
        A = np.asarray(A, float)
        z, J = self._head(zeta, O, jac=True)
        logp, dz = self._logpdf(z, A, grad=True)
        dens = np.exp(logp)
        # d pi / d zeta = pi * (d log pi / dz) . (dz / d zeta)
        grad = dens[..., None] * np.einsum("nmk,nkp->nmp", dz, J)
        return dens, grad

    def grad_density(self, zeta, O, A) -> np.ndarray:
        """Gradient of the density w.r.t. ``zeta``; a trailing axis of length ``n_params`` is appended."""
        O2, A2, _ = self._shape(O, A)
        _, grad = self.density_and_grad(zeta, O2, A2)
        O, A = np.asarray(O), np.asarray(A)
        if O.ndim == 1:
            return grad[0, 0] if A.ndim == 0 else grad[0]
        return grad[:, 0] if A.ndim == 1 else grad

    def sample_from_uniform(self, zeta, O, U) -> np.ndarray:
        """Inverse-CDF transform of uniforms ``U`` (shape (N,)) into actions."""
        O = np.atleast_2d(np.asarray(O, float))
        U = np.asarray(U, float)
        z, _ = self._head(zeta, O, jac=False)
        p1, p2, _, _ = self._dist_params(z)
        lo, hi = self.action_interval
        if self.family == "beta":
            y = betaincinv(p1, p2, U)
        else:
            y = 0.5 * (np.tanh(p1 + p2 * ndtri(U)) + 1.0)
        return lo + (hi - lo) * y

    def sample(self, zeta, o, rng: np.random.Generator):
        O = np.asarray(o, float)
        single = O.ndim <= 1
        O = np.atleast_2d(O.reshape(1, -1) if single else O)
        a = self.sample_from_uniform(zeta, O, rng.random(O.shape[0]))
        return float(a[0]) if single else a

    def cdf(self, zeta, o, a) -> float:
        """CDF at a single ``(o, a)``, used to check samplers against densities."""
        O = np.atleast_2d(np.asarray(o, float).reshape(1, -1))
        z, _ = self._head(zeta, O, jac=False)
        p1, p2, _, _ = self._dist_params(z)
        lo, hi = self.action_interval
        y = np.clip((np.asarray(a, float) - lo) / (hi - lo), 0.0, 1.0)
        if self.family == "beta":
            return betainc(p1[0], p2[0], y)
        s = np.clip(2 * y - 1, -1 + 1e-15, 1 - 1e-15)
        return ndtr((np.arctanh(s) - p1[0]) / p2[0])

    def to_dict(self) -> dict:
        return {"variant": self.variant, "obs_dim": self.obs_dim, "hidden": self.hidden,
                "action_interval": list(self.action_interval)}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyClass":
        return cls(d["variant"], int(d.get("obs_dim", 1)), int(d.get("hidden", 32)),
                   tuple(d.get("action_interval", (-1.0, 1.0))))


@dataclass(frozen=True)
class PolicyParams:
    """A policy class together with a flat parameter vector."""

    policy_class: PolicyClass
    zeta: np.ndarray = field(repr=False)

    def __post_init__(self):
        zeta = np.array(self.zeta, dtype=float)
        self.policy_class.unpack(zeta)
        if not np.all(np.isfinite(zeta)):
            raise ConfigurationError("policy parameters must be finite")
        zeta.flags.writeable = False
        object.__setattr__(self, "zeta", zeta)

    def to_dict(self) -> dict:
        return {"class": self.policy_class.to_dict(), "zeta": [float(v) for v in self.zeta]}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        return cls(PolicyClass.from_dict(d["class"]), np.asarray(d["zeta"], float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)
