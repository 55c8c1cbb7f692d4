"""Inflated (perturbed) densities and sample standardization for IDR.

Densities are passed around as batch callbacks: ``log_g(points)`` takes an
``(n, d)`` array and returns the ``(n,)`` unnormalized log-density values.
Wrap a scalar function with :func:`pointwise` when needed.

The inflated density g_Pk keeps g(0) constant on the ball of radius r_k and
pushes the rest of g outward with the radial map

    theta -> theta * (|theta|^d - r_k^d)^(1/d) / |theta|

which preserves volume, so the total mass grows by exactly g(0) * V_d(r_k) = k.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np
from scipy import optimize
from scipy.special import gammaln

from app.core.errors import DegenerateSampleError, InvalidInputError

logger = logging.getLogger(__name__)

LogDensity = Callable[[np.ndarray], np.ndarray]

# Eigenvalues below this fraction of the largest one count as collapsed.
EIGEN_FLOOR = 1e-12


def pointwise(fn: Callable[[np.ndarray], float]) -> LogDensity:
    """Turn a per-point log-density into a batch callback."""

    def _batch(points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.array([fn(p) for p in points], dtype=float)

    return _batch


# ── Ball geometry ─────────────────────────────────────────────────────────────

def log_unit_ball_volume(d: int) -> float:
    return 0.5 * d * math.log(math.pi) - float(gammaln(0.5 * d + 1.0))


def radius_for_log_mass(log_k: float, log_g0: float, d: int) -> float:
    """Radius whose ball, at constant height exp(log_g0), holds mass exp(log_k)."""
    return math.exp((log_k - log_g0 - log_unit_ball_volume(d)) / d)


def radius_for_mass(k: float, g0: float, d: int) -> float:
    if k <= 0 or g0 <= 0:
        raise InvalidInputError("k and g0 must be positive")
    if d < 1:
        raise InvalidInputError("dimension must be at least 1")
    return radius_for_log_mass(math.log(k), math.log(g0), d)


@dataclass(frozen=True)
class InflationConfig:
    """Inflation mass k, its plateau radius and the plateau height.

    The height is kept on the log scale: posterior heights such as e^-7000
    underflow as plain floats.
    """

    k: float
    r_k: float
    d: int
    log_g0: float

    @classmethod
    def for_mass(cls, k: float, log_g0: float, d: int) -> "InflationConfig":
        if k <= 0:
            raise InvalidInputError("inflation mass k must be positive")
        return cls(k=k, r_k=radius_for_log_mass(math.log(k), log_g0, d), d=d, log_g0=log_g0)

    @property
    def g0(self) -> float:
        return math.exp(self.log_g0)


def shrink_points(theta: np.ndarray, r_k: float) -> tuple[np.ndarray, np.ndarray]:
    """Apply the radial shrink map to every row outside the plateau.

    Returns the mapped points and a boolean mask of rows inside the plateau
    (their mapped value is meaningless and left as zero).
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    d = theta.shape[1]
    norms = np.linalg.norm(theta, axis=1)
    inside = norms <= r_k
    mapped = np.zeros_like(theta)
    out = ~inside
    if not out.any():
        return mapped, inside
    if d == 1:
        mapped[out, 0] = np.sign(theta[out, 0]) * (np.abs(theta[out, 0]) - r_k)
        return mapped, inside
    # (|t|^d - r^d)^(1/d) = |t| * (1 - (r/|t|)^d)^(1/d), no overflow in high d
    ratio = (r_k / norms[out]) ** d
    scale = np.exp(np.log1p(-ratio) / d)
    mapped[out] = theta[out] * scale[:, None]
    return mapped, inside


def expand_points(phi: np.ndarray, r_k: float) -> np.ndarray:
    """Inverse of :func:`shrink_points` on the region outside the plateau."""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    d = phi.shape[1]
    norms = np.linalg.norm(phi, axis=1)
    if d == 1:
        return np.sign(phi) * (np.abs(phi) + r_k)
    new_norms = np.empty_like(norms)
    big = norms >= r_k
    new_norms[big] = norms[big] * np.exp(np.log1p((r_k / norms[big]) ** d) / d)
    new_norms[~big] = r_k * np.exp(np.log1p((norms[~big] / r_k) ** d) / d)
    safe = np.where(norms > 0, norms, 1.0)
    return phi * (new_norms / safe)[:, None]


def inflate_log_density_batch(log_g: LogDensity, cfg: InflationConfig, theta: np.ndarray) -> np.ndarray:
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if not np.all(np.isfinite(theta)):
        raise InvalidInputError("points must be finite")
    values = np.full(theta.shape[0], cfg.log_g0, dtype=float)
    mapped, inside = shrink_points(theta, cfg.r_k)
    if (~inside).any():
        values[~inside] = log_g(mapped[~inside])
    return values


def inflate_log_density(log_g: LogDensity, cfg: InflationConfig, theta: np.ndarray) -> float:
    """log g_Pk at a single point."""
    point = np.asarray(theta, dtype=float).reshape(1, -1)
    return float(inflate_log_density_batch(log_g, cfg, point)[0])


# ── Standardization ───────────────────────────────────────────────────────────

@dataclass(frozen=True)
class StandardizationSpec:
    """Affine map z = W (x - mode) with W the inverse square root of the covariance.

    ``log_jacobian`` is log |det dx/dz| = -log |det W|; adding it to log g at
    the de-standardized point keeps the total mass unchanged.
    """

    mode: np.ndarray
    whitening: np.ndarray
    unwhitening: np.ndarray
    log_jacobian: float

    @classmethod
    def identity(cls, d: int) -> "StandardizationSpec":
        eye = np.eye(d)
        return cls(mode=np.zeros(d), whitening=eye, unwhitening=eye, log_jacobian=0.0)

    @property
    def d(self) -> int:
        return self.mode.shape[0]

    def to_standard(self, x: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(x) - self.mode) @ self.whitening.T

    def from_standard(self, z: np.ndarray) -> np.ndarray:
        return np.atleast_2d(z) @ self.unwhitening.T + self.mode

    def adjust(self, log_g: LogDensity) -> LogDensity:
        """Density of z when x has (unnormalized) density g."""

        def _adjusted(z: np.ndarray) -> np.ndarray:
            return log_g(self.from_standard(z)) + self.log_jacobian

        return _adjusted


def _whitening(draws: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    cov = np.atleast_2d(np.cov(draws, rowvar=False))
    eigvals, eigvecs = np.linalg.eigh(cov)
    top = float(eigvals.max())
    collapsed = eigvals <= EIGEN_FLOOR * max(top, 0.0)
    if top <= 0 or collapsed.any():
        directions = eigvecs[:, collapsed].T.tolist() if top > 0 else np.eye(cov.shape[0]).tolist()
        raise DegenerateSampleError(
            f"sample covariance is singular in {len(directions)} direction(s)",
            directions=directions,
        )
    whitening = (eigvecs / np.sqrt(eigvals)) @ eigvecs.T
    unwhitening = (eigvecs * np.sqrt(eigvals)) @ eigvecs.T
    return whitening, unwhitening, 0.5 * float(np.sum(np.log(eigvals)))


def _refine_mode(log_g: LogDensity, start: np.ndarray, start_value: float) -> np.ndarray:
    result = optimize.minimize(
        lambda x: -float(log_g(x[None, :])[0]),
        start,
        method="Nelder-Mead",
        options={"maxiter": 200 * start.shape[0], "xatol": 1e-8, "fatol": 1e-10},
    )
    if np.all(np.isfinite(result.x)) and -result.fun > start_value:
        return np.asarray(result.x, dtype=float)
    logger.debug("mode refinement did not improve on the best draw")
    return start


def standardize(
    draws: np.ndarray,
    log_g: LogDensity,
    log_g_values: np.ndarray | None = None,
    center: Literal["best", "optimize", "mean"] | np.ndarray = "best",
) -> tuple[StandardizationSpec, np.ndarray, LogDensity]:
    """Center the draws on a local mode and whiten them with the sample covariance.

    Returns the spec, the standardized draws and the log-density of the
    standardized variable (same total mass as ``log_g``).
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 1:
        draws = draws[:, None]
    if draws.shape[0] < 2:
        raise InvalidInputError("standardization needs at least two draws")

    whitening, unwhitening, log_jac = _whitening(draws)

    if isinstance(center, np.ndarray):
        mode = np.asarray(center, dtype=float).reshape(-1)
    elif center == "mean":
        mode = draws.mean(axis=0)
    else:
        values = log_g(draws) if log_g_values is None else np.asarray(log_g_values, dtype=float)
        best = int(np.argmax(values))
        mode = draws[best].copy()
        if center == "optimize":
            mode = _refine_mode(log_g, mode, float(values[best]))

    spec = StandardizationSpec(
        mode=mode, whitening=whitening, unwhitening=unwhitening, log_jacobian=log_jac
    )
    return spec, spec.to_standard(draws), spec.adjust(log_g)
