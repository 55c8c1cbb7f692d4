"""Reversible nucleotide substitution models (JC69, GTR, GTR+Gamma).

Nucleotide order is A, C, G, T everywhere; exchangeabilities are ordered
AC, AG, AT, CG, CT, GT. Rate matrices are scaled to one expected substitution
per unit time, so branch lengths are in expected substitutions per site.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special, stats

from app.core.errors import InvalidInputError, NumericError
from app.schemas.phylo import ModelKind, SubstitutionModelSpec

NUCLEOTIDES = "ACGT"
EXCHANGE_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
UNIFORM_PI = np.full(4, 0.25)
UNIFORM_RHO = np.full(6, 1.0 / 6.0)
CLAMP_TOL = 1e-12
MIN_SPECTRAL_PI = 1e-8
FLAT_ALPHA = 1e10
SPIKE_ALPHA = 1e-10


def _simplex(values, size: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.shape[0] != size:
        raise InvalidInputError(f"{name} must have {size} components")
    if np.any(~(arr > 0)):
        raise InvalidInputError(f"{name} components must be positive")
    if abs(float(arr.sum()) - 1.0) > 1e-10:
        raise InvalidInputError(f"{name} must sum to 1")
    return arr / arr.sum()


@dataclass(frozen=True)
class SubstitutionModel:
    kind: ModelKind
    pi: np.ndarray = field(default_factory=lambda: UNIFORM_PI.copy())
    rho: np.ndarray = field(default_factory=lambda: UNIFORM_RHO.copy())
    alpha: float | None = None
    n_categories: int = 1

    def __post_init__(self) -> None:
        if self.kind is ModelKind.JC69:
            object.__setattr__(self, "pi", UNIFORM_PI.copy())
            object.__setattr__(self, "rho", UNIFORM_RHO.copy())
        else:
            object.__setattr__(self, "pi", _simplex(self.pi, 4, "pi"))
            object.__setattr__(self, "rho", _simplex(self.rho, 6, "rho"))
        if self.n_categories < 1:
            raise InvalidInputError("n_categories must be at least 1")
        if (self.alpha is not None) != (self.n_categories > 1):
            raise InvalidInputError("alpha must be given exactly when n_categories > 1")
        if self.alpha is not None and not self.alpha > 0:
            raise InvalidInputError("gamma shape alpha must be positive")

    @classmethod
    def jc69(cls) -> "SubstitutionModel":
        return cls(kind=ModelKind.JC69)

    @classmethod
    def gtr(cls, pi, rho, alpha: float | None = None, n_categories: int = 4) -> "SubstitutionModel":
        if alpha is None:
            return cls(kind=ModelKind.GTR, pi=pi, rho=rho)
        return cls(kind=ModelKind.GTR_GAMMA, pi=pi, rho=rho, alpha=alpha, n_categories=n_categories)

    @classmethod
    def from_spec(cls, spec: SubstitutionModelSpec) -> "SubstitutionModel":
        if spec.kind is ModelKind.JC69:
            return cls.jc69()
        return cls(
            kind=spec.kind,
            pi=spec.pi if spec.pi is not None else UNIFORM_PI,
            rho=spec.rho if spec.rho is not None else UNIFORM_RHO,
            alpha=spec.alpha,
            n_categories=spec.n_categories,
        )


@dataclass(frozen=True)
class RateMatrix:
    """Unit-rate Q with its symmetrized eigendecomposition.

    Reversibility makes S = diag(pi)^1/2 Q diag(pi)^-1/2 symmetric, so
    exp(Qt) = diag(pi)^-1/2 V exp(Lt) V' diag(pi)^1/2 with a real, orthogonal V.
    """

    q: np.ndarray
    scale: float
    pi: np.ndarray
    eigenvalues: np.ndarray
    left: np.ndarray | None
    right: np.ndarray | None


def build_q(model: SubstitutionModel) -> RateMatrix:
    pi = model.pi
    q = np.zeros((4, 4))
    for rho_ij, (i, j) in zip(model.rho, EXCHANGE_PAIRS):
        q[i, j] = rho_ij * pi[j]
        q[j, i] = rho_ij * pi[i]
    np.fill_diagonal(q, -q.sum(axis=1))
    scale = float(-np.dot(pi, np.diag(q)))
    q /= scale
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))

    sqrt_pi = np.sqrt(pi)
    sym = (sqrt_pi[:, None] * q) / sqrt_pi[None, :]
    sym = 0.5 * (sym + sym.T)
    try:
        eigenvalues, vectors = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition of the rate matrix failed: {exc}") from exc
    # the stationary eigenvalue is exactly 0; all others are negative
    eigenvalues = np.minimum(eigenvalues, 0.0)
    eigenvalues[np.argmax(eigenvalues)] = 0.0
    if float(pi.min()) < MIN_SPECTRAL_PI:
        return RateMatrix(q=q, scale=scale, pi=pi.copy(), eigenvalues=eigenvalues, left=None, right=None)
    left = vectors / sqrt_pi[:, None]
    right = vectors.T * sqrt_pi[None, :]
    return RateMatrix(q=q, scale=scale, pi=pi.copy(), eigenvalues=eigenvalues, left=left, right=right)


def _clamp(p: np.ndarray) -> np.ndarray:
    return np.where((p < 0.0) & (p > -CLAMP_TOL), 0.0, p)


def _expm_matrices(q: np.ndarray, t: np.ndarray) -> np.ndarray:
    flat = t.reshape(-1)
    p = np.stack([linalg.expm(q * ti) for ti in flat]) if flat.size else np.zeros((0, 4, 4))
    return np.clip(p, 0.0, 1.0).reshape(t.shape + (4, 4))


def transition_matrices(rate: RateMatrix, times) -> np.ndarray:
    """P(t) for every entry of ``times``; shape ``times.shape + (4, 4)``.

    Uses the eigendecomposition unless some frequency is too small for the
    diag(pi)^-1/2 rescaling, in which case each P(t) comes from ``expm``.
    """
    t = np.asarray(times, dtype=float)
    if np.any(t < 0):
        raise InvalidInputError("branch lengths must be nonnegative")
    if rate.left is None:
        return _expm_matrices(rate.q, t)
    # I + V (exp(Lt) - 1) V^-1 keeps off-diagonals accurate for short branches
    expo = np.expm1(t[..., None] * rate.eigenvalues)
    p = np.eye(4) + np.einsum("ik,...k,kj->...ij", rate.left, expo, rate.right)
    return _clamp(p)


def transition_matrix(rate: RateMatrix, t: float) -> np.ndarray:
    if t < 0:
        raise InvalidInputError("t must be nonnegative")
    if t == 0:
        return np.eye(4)
    return transition_matrices(rate, np.asarray([t]))[0]


def gamma_category_rates(alpha: float, n: int) -> np.ndarray:
    """Mean rate inside each of n equal-probability bins of Gamma(alpha, rate=alpha)."""
    if not alpha > 0:
        raise InvalidInputError("alpha must be positive")
    if n < 2:
        raise InvalidInputError("at least two categories are required")
    if alpha >= FLAT_ALPHA:
        return np.ones(n)
    if alpha <= SPIKE_ALPHA:
        # all of the mean sits in the top bin
        return np.concatenate([np.zeros(n - 1), [float(n)]])
    edges = stats.gamma.ppf(np.arange(1, n) / n, a=alpha, scale=1.0 / alpha)
    # E[X; X < x] for Gamma(a, rate a) equals P(Gamma(a + 1, rate a) < x)
    upper = np.concatenate([special.gammainc(alpha + 1.0, alpha * edges), [1.0]])
    lower = np.concatenate([[0.0], upper[:-1]])
    rates = n * (upper - lower)
    return rates / rates.mean()


def category_rates(model: SubstitutionModel) -> np.ndarray:
    if model.n_categories == 1:
        return np.ones(1)
    return gamma_category_rates(model.alpha, model.n_categories)
