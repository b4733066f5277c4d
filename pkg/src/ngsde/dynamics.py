"""Prior SDE drifts, diffusion, initial state, and Euler-Maruyama simulation.

Drift models expose ``value(x)`` and ``jacobian(x)`` for x with arbitrary
leading batch dimensions (trailing axis is the state dimension).  Parametric
drifts additionally expose a flat parameter vector through ``params`` /
``with_params`` so the learning machinery can treat them uniformly.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import UnsupportedDrift
from .linalg import chol_pd, inv_pd, symmetrize


# ---------------------------------------------------------------------------
# drift models
# ---------------------------------------------------------------------------


class DriftModel:
    """Interface: value(x) -> (..., D); jacobian(x) -> (..., D, D)."""

    dim = None
    kind = "drift"

    def value(self, x):
        raise NotImplementedError

    def jacobian(self, x):
        raise NotImplementedError

    def jac_t_apply(self, x, v):
        """J(x)^T v per batch entry; overridden with closed forms where the
        Jacobian has exploitable structure."""
        return np.einsum("...de,...d->...e", self.jacobian(x), v)

    # parametric-drift hooks; non-parametric models leave these unimplemented
    @property
    def params(self):
        raise UnsupportedDrift(f"{self.kind} drift has no flat parameter vector")

    def with_params(self, theta):
        raise UnsupportedDrift(f"{self.kind} drift has no flat parameter vector")


@dataclass(frozen=True)
class LinearDrift(DriftModel):
    """f(x) = A x + b."""

    A: np.ndarray
    b: np.ndarray
    kind = "linear"

    def __post_init__(self):
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))

    @property
    def dim(self):
        return self.A.shape[0]

    def value(self, x):
        return x @ self.A.T + self.b

    def jacobian(self, x):
        return np.broadcast_to(self.A, x.shape + (self.dim,)).copy()

    def jac_t_apply(self, x, v):
        return v @ self.A

    @property
    def params(self):
        return np.concatenate([self.A.reshape(-1), self.b])

    def with_params(self, theta):
        d = self.dim
        return LinearDrift(A=theta[: d * d].reshape(d, d), b=theta[d * d:])


def monomial_exponents(dim, degree):
    """Exponent tuples of all monomials in ``dim`` variables up to ``degree``.

    Ordered by total degree, then with earlier coordinates first within a
    degree (1, x1, x2, x1^2, x1 x2, x2^2, ...), so a degree-1 basis is
    exactly [1, x_1, ..., x_D].
    """
    exps = []
    for total in range(degree + 1):
        for c in itertools.combinations_with_replacement(range(dim), total):
            e = [0] * dim
            for j in c:
                e[j] += 1
            exps.append(tuple(e))
    return sorted(set(exps), key=lambda e: (sum(e), tuple(-v for v in e)))


@dataclass(frozen=True)
class PolynomialDrift(DriftModel):
    """f(x) = W phi(x) over the monomial basis of total degree <= degree."""

    weights: np.ndarray  # (D, K)
    degree: int = 3
    kind = "polynomial"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        exps = monomial_exponents(w.shape[0], self.degree)
        if w.shape[1] != len(exps):
            raise ValueError(
                f"weights must have {len(exps)} columns for degree {self.degree}"
            )
        object.__setattr__(self, "_exps", np.array(exps))

    @classmethod
    def zeros(cls, dim, degree=3):
        k = len(monomial_exponents(dim, degree))
        return cls(weights=np.zeros((dim, k)), degree=degree)

    @property
    def dim(self):
        return self.weights.shape[0]

    @property
    def n_basis(self):
        return self.weights.shape[1]

    def basis(self, x):
        """phi(x): (..., K) monomial features."""
        x = np.asarray(x, dtype=float)
        powers = x[..., None, :] ** self._exps  # (..., K, D)
        return np.prod(powers, axis=-1)

    def basis_jacobian(self, x):
        """d phi / d x: (..., K, D)."""
        x = np.asarray(x, dtype=float)
        exps = self._exps
        k, d = exps.shape
        out = np.zeros(x.shape[:-1] + (k, d))
        for j in range(d):
            ej = exps[:, j]
            lowered = exps.copy()
            lowered[:, j] = np.maximum(ej - 1, 0)
            mono = np.prod(x[..., None, :] ** lowered, axis=-1)
            out[..., :, j] = ej * mono
        return out

    def value(self, x):
        return self.basis(x) @ self.weights.T

    def jacobian(self, x):
        dphi = self.basis_jacobian(x)
        return np.einsum("dk,...kj->...dj", self.weights, dphi)

    @property
    def params(self):
        return self.weights.reshape(-1)

    def with_params(self, theta):
        return PolynomialDrift(
            weights=np.asarray(theta, dtype=float).reshape(self.weights.shape),
            degree=self.degree,
        )


@dataclass(frozen=True)
class LorenzDrift(DriftModel):
    """Chaotic three-dimensional attractor drift."""

    alpha: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    kind = "lorenz"
    dim = 3

    def value(self, x):
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        return np.stack(
            [self.alpha * (x2 - x1), x1 * (self.rho - x3) - x2,
             x1 * x2 - self.beta * x3],
            axis=-1,
        )

    def jacobian(self, x):
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        J = np.zeros(x.shape + (3,))
        J[..., 0, 0] = -self.alpha
        J[..., 0, 1] = self.alpha
        J[..., 1, 0] = self.rho - x3
        J[..., 1, 1] = -1.0
        J[..., 1, 2] = -x1
        J[..., 2, 0] = x2
        J[..., 2, 1] = x1
        J[..., 2, 2] = -self.beta
        return J

    def jac_t_apply(self, x, v):
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        v0, v1, v2 = v[..., 0], v[..., 1], v[..., 2]
        return np.stack(
            [-self.alpha * v0 + (self.rho - x3) * v1 + x2 * v2,
             self.alpha * v0 - v1 + x1 * v2,
             -x1 * v1 - self.beta * v2],
            axis=-1,
        )


@dataclass(frozen=True)
class EmbeddedLorenzDrift(DriftModel):
    """Lorenz drift in the first three coordinates; remaining dimensions have
    zero drift (latent random walk)."""

    dim_total: int = 3
    alpha: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    kind = "embedded_lorenz"

    def __post_init__(self):
        if self.dim_total < 3:
            raise ValueError("embedded Lorenz needs at least 3 dimensions")

    @property
    def dim(self):
        return self.dim_total

    @property
    def _core(self):
        return LorenzDrift(alpha=self.alpha, rho=self.rho, beta=self.beta)

    def value(self, x):
        out = np.zeros_like(np.asarray(x, dtype=float))
        out[..., :3] = self._core.value(x[..., :3])
        return out

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        J = np.zeros(x.shape + (self.dim_total,))
        J[..., :3, :3] = self._core.jacobian(x[..., :3])
        return J

    def jac_t_apply(self, x, v):
        out = np.zeros(np.broadcast_shapes(np.shape(x), np.shape(v)))
        out[..., :3] = self._core.jac_t_apply(x[..., :3], v[..., :3])
        return out


@dataclass(frozen=True)
class VanDerPolDrift(DriftModel):
    """Relaxation oscillator: f1 = tau*mu*(x1 - x1^3/3 - x2), f2 = tau*x1/mu."""

    tau: float = 10.0
    mu: float = 2.0
    kind = "van_der_pol"
    dim = 2

    def value(self, x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack(
            [self.tau * self.mu * (x1 - x1 ** 3 / 3.0 - x2),
             self.tau * x1 / self.mu],
            axis=-1,
        )

    def jacobian(self, x):
        x1 = x[..., 0]
        J = np.zeros(x.shape + (2,))
        J[..., 0, 0] = self.tau * self.mu * (1.0 - x1 ** 2)
        J[..., 0, 1] = -self.tau * self.mu
        J[..., 1, 0] = self.tau / self.mu
        return J

    def jac_t_apply(self, x, v):
        x1 = x[..., 0]
        v0, v1 = v[..., 0], v[..., 1]
        return np.stack(
            [self.tau * self.mu * (1.0 - x1 ** 2) * v0 + self.tau / self.mu * v1,
             -self.tau * self.mu * v0],
            axis=-1,
        )


@dataclass(frozen=True)
class DuffingDrift(DriftModel):
    """Double-well oscillator: f1 = x2, f2 = alpha*x1 - beta*x1^3 - gamma*x2.

    Stable fixed points at (+-sqrt(alpha/beta), 0) for alpha, beta > 0.
    """

    alpha: float = 2.0
    beta: float = 1.0
    gamma: float = 0.1
    kind = "duffing"
    dim = 2

    def value(self, x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack(
            [x2, self.alpha * x1 - self.beta * x1 ** 3 - self.gamma * x2],
            axis=-1,
        )

    def jacobian(self, x):
        x1 = x[..., 0]
        J = np.zeros(x.shape + (2,))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = self.alpha - 3.0 * self.beta * x1 ** 2
        J[..., 1, 1] = -self.gamma
        return J

    def jac_t_apply(self, x, v):
        x1 = x[..., 0]
        v0, v1 = v[..., 0], v[..., 1]
        return np.stack(
            [(self.alpha - 3.0 * self.beta * x1 ** 2) * v1,
             v0 - self.gamma * v1],
            axis=-1,
        )

    def as_polynomial(self):
        """Exact degree-3 polynomial-basis representation of this drift."""
        poly = PolynomialDrift.zeros(2, degree=3)
        w = poly.weights.copy()
        exps = [tuple(e) for e in poly._exps]
        w[0, exps.index((0, 1))] = 1.0
        w[1, exps.index((1, 0))] = self.alpha
        w[1, exps.index((3, 0))] = -self.beta
        w[1, exps.index((0, 1))] = -self.gamma
        return PolynomialDrift(weights=w, degree=3)


@dataclass(frozen=True)
class ShiftedDrift(DriftModel):
    """f(x) + c for a constant offset c (used for external-input effects)."""

    base: DriftModel
    offset: np.ndarray
    kind = "shifted"

    @property
    def dim(self):
        return self.base.dim

    def value(self, x):
        return self.base.value(x) + self.offset

    def jacobian(self, x):
        return self.base.jacobian(x)


# ---------------------------------------------------------------------------
# diffusion and initial state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionSpec:
    """Time-homogeneous diffusion covariance Sigma (symmetric PD)."""

    Sigma: np.ndarray

    def __post_init__(self):
        S = symmetrize(np.asarray(self.Sigma, dtype=float))
        object.__setattr__(self, "Sigma", S)
        object.__setattr__(self, "_chol", chol_pd(S))
        object.__setattr__(self, "_inv", inv_pd(S))
        sign, logdet = np.linalg.slogdet(S)
        object.__setattr__(self, "_logdet", float(logdet))

    @classmethod
    def isotropic(cls, dim, variance=1.0):
        return cls(Sigma=variance * np.eye(dim))

    @property
    def dim(self):
        return self.Sigma.shape[0]

    @property
    def chol(self):
        return self._chol

    @property
    def inv(self):
        return self._inv

    @property
    def logdet(self):
        return self._logdet


@dataclass(frozen=True)
class InitialState:
    """x(0) ~ N(nu, V)."""

    nu: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nu", np.asarray(self.nu, dtype=float))
        object.__setattr__(self, "V", symmetrize(np.asarray(self.V, dtype=float)))
        chol_pd(self.V)

    @property
    def dim(self):
        return self.nu.shape[0]


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def trial_rng(seed, trial):
    """Counter-based per-trial stream: reproducible regardless of scheduling."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial,)))


def euler_maruyama_sample(drift, diffusion, initial, grid, seed, trials,
                          deterministic=False):
    """Simulate latent paths x_{i+1} = x_i + Delta_i f(x_i) + sqrt(Delta_i) Sigma^{1/2} xi.

    Returns an array of shape (trials, T+1, D).  With ``deterministic`` the
    noise (and the initial-state spread) is switched off and the path starts
    at the initial mean.
    """
    d = initial.dim
    n = grid.num_steps + 1
    out = np.empty((trials, n, d))
    chol_v = chol_pd(initial.V)
    for trial in range(trials):
        rng = trial_rng(seed, trial)
        if deterministic:
            x = initial.nu.copy()
        else:
            x = initial.nu + chol_v @ rng.standard_normal(d)
        out[trial, 0] = x
        if grid.num_steps:
            noise = None if deterministic else rng.standard_normal((grid.num_steps, d))
            for i, dt in enumerate(grid.deltas):
                x = x + dt * drift.value(x)
                if noise is not None:
                    x = x + np.sqrt(dt) * (diffusion.chol @ noise[i])
                out[trial, i + 1] = x
    return out


DRIFT_KINDS = {
    "linear": LinearDrift,
    "polynomial": PolynomialDrift,
    "lorenz": LorenzDrift,
    "embedded_lorenz": EmbeddedLorenzDrift,
    "van_der_pol": VanDerPolDrift,
    "duffing": DuffingDrift,
}
