"""Synthetic targets with known normalizing constants, and the IDR check over them.

Each target is an unnormalized density g = c * p with p a density we can
sample exactly, so log c is known by construction.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from app.core.errors import EvidenceError
from app.schemas.evidence import ValidationReport, ValidationTargetResult
from app.services.evidence import IdrContext, LogDensitySample, suggest_k_grid
from app.services.inflation import LogDensity, standardize

logger = logging.getLogger(__name__)

PASS_SIGMAS = 3.0


@dataclass(frozen=True)
class SyntheticTarget:
    name: str
    dimension: int
    true_log_c: float
    log_density: LogDensity
    sampler: Callable[[np.random.Generator, int], np.ndarray]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.asarray(self.sampler(rng, n), dtype=float).reshape(n, self.dimension)


def gaussian_target(name: str, mean: Sequence[float], sd: Sequence[float]) -> SyntheticTarget:
    """exp(-|x - mean|^2 / 2 sd^2) without its normalizer, so c = prod(sd sqrt(2 pi))."""
    mu = np.asarray(mean, dtype=float)
    sigma = np.asarray(sd, dtype=float)
    d = mu.shape[0]

    def _log_g(x: np.ndarray) -> np.ndarray:
        z = (np.atleast_2d(x) - mu) / sigma
        return -0.5 * np.sum(z * z, axis=1)

    def _sample(rng: np.random.Generator, n: int) -> np.ndarray:
        return mu + sigma * rng.standard_normal((n, d))

    log_c = float(np.sum(np.log(sigma)) + 0.5 * d * math.log(2 * math.pi))
    return SyntheticTarget(name, d, log_c, _log_g, _sample)


def skew_normal_target(name: str, d: int, shape: float, log_c: float) -> SyntheticTarget:
    """Independent skew-normal coordinates scaled by exp(log_c)."""
    dist = stats.skewnorm(shape)

    def _log_g(x: np.ndarray) -> np.ndarray:
        return np.sum(dist.logpdf(np.atleast_2d(x)), axis=1) + log_c

    def _sample(rng: np.random.Generator, n: int) -> np.ndarray:
        return dist.rvs(size=(n, d), random_state=rng)

    return SyntheticTarget(name, d, log_c, _log_g, _sample)


def mixture_target(name: str, d: int, separation: float, log_c: float, weight: float = 0.5) -> SyntheticTarget:
    """Two unit-covariance Gaussians at +/- separation/2 along the first axis."""
    shift = np.zeros(d)
    shift[0] = 0.5 * separation
    means = (shift, -shift)
    log_weights = np.log([weight, 1.0 - weight])
    log_norm = -0.5 * d * math.log(2 * math.pi)

    def _log_g(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        parts = np.stack(
            [lw + log_norm - 0.5 * np.sum((x - m) ** 2, axis=1) for lw, m in zip(log_weights, means)]
        )
        return logsumexp(parts, axis=0) + log_c

    def _sample(rng: np.random.Generator, n: int) -> np.ndarray:
        first = rng.random(n) < weight
        centers = np.where(first[:, None], means[0], means[1])
        return centers + rng.standard_normal((n, d))

    return SyntheticTarget(name, d, log_c, _log_g, _sample)


def default_targets() -> list[SyntheticTarget]:
    return [
        gaussian_target("normal-1d", [1.0], [2.0]),
        gaussian_target("normal-100d", np.zeros(100), np.ones(100)),
        skew_normal_target("skewnormal-1d", 1, shape=4.0, log_c=math.log(3.0)),
        skew_normal_target("skewnormal-5d", 5, shape=4.0, log_c=-2.0),
        mixture_target("mixture-2d", 2, separation=3.0, log_c=math.log(8.0)),
        mixture_target("mixture-3d", 3, separation=3.0, log_c=math.log(16.0)),
        mixture_target("mixture-10d", 10, separation=3.0, log_c=0.0),
    ]


def check_target(
    target: SyntheticTarget,
    draws: int,
    rng_seed: int | np.random.SeedSequence,
    k_grid: Sequence[float] | None = None,
    jobs: int = 1,
) -> ValidationTargetResult:
    rng = np.random.default_rng(rng_seed)
    x = target.sample(rng, draws)
    try:
        sample = LogDensitySample(draws=x, log_g=target.log_density(x))
        spec, _, _ = standardize(sample.draws, target.log_density, sample.log_g, center="mean")
        ctx = IdrContext(sample, target.log_density, standardization=spec)
        grid = list(k_grid) if k_grid else suggest_k_grid(target.dimension)
        result, _ = ctx.search(grid, jobs)
    except EvidenceError as exc:
        logger.warning("%s: %s", target.name, exc)
        return ValidationTargetResult(
            name=target.name,
            dimension=target.dimension,
            true_log_c=target.true_log_c,
            passed=False,
            error=str(exc),
        )
    row = result.selected
    passed = abs(row.log_c - target.true_log_c) <= PASS_SIGMAS * row.rmse_delta_ess
    log = logger.info if passed else logger.warning
    log(
        "%s: log c = %.6f (true %.6f), rmse %.2e, k = %.3g, %s",
        target.name, row.log_c, target.true_log_c, row.rmse_delta, row.k,
        "pass" if passed else "FAIL",
    )
    return ValidationTargetResult(
        name=target.name,
        dimension=target.dimension,
        true_log_c=target.true_log_c,
        log_c=row.log_c,
        rmse_delta=row.rmse_delta,
        k_opt=row.k,
        passed=passed,
    )


def iter_validation(
    draws: int,
    seed: int,
    targets: Sequence[SyntheticTarget] | None = None,
    k_grid: Sequence[float] | None = None,
    jobs: int = 1,
) -> Iterator[ValidationTargetResult]:
    targets = list(targets) if targets is not None else default_targets()
    seeds = np.random.SeedSequence(seed).spawn(len(targets))
    for target, child in zip(targets, seeds):
        yield check_target(target, draws, child, k_grid, jobs)


def run_validation(
    draws: int,
    seed: int,
    targets: Sequence[SyntheticTarget] | None = None,
    k_grid: Sequence[float] | None = None,
    jobs: int = 1,
) -> ValidationReport:
    results = list(iter_validation(draws, seed, targets, k_grid, jobs))
    return ValidationReport(draws=draws, seed=seed, targets=results)


def standard_normal_log_density(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    return -0.5 * np.sum(x * x, axis=1) - 0.5 * x.shape[1] * math.log(2 * math.pi)


# Normalized densities that can stand in for a chain's target when the chain
# was not produced by a phylogenetic model (log evidence 0).
ANALYTIC_TARGETS: dict[str, LogDensity] = {
    "normal": standard_normal_log_density,
}
