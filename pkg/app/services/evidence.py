"""Evidence estimators: arithmetic mean, harmonic mean, generic GHM and IDR.

All arithmetic is on the natural-log scale. Relative (natural-scale) errors
are formed from ratios such as exp(log x - log c) so that log-likelihoods of
order 1e4 neither overflow nor underflow.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from app.core.errors import (
    DegenerateInputError,
    EstimatorBreakdownError,
    EstimatorUndefinedError,
    EvidenceError,
    InvalidInputError,
    NoValidKError,
)
from app.schemas.evidence import (
    EstimatorMethod,
    EvidenceEstimate,
    EvidenceReport,
    KGridResult,
    KGridRow,
)
from app.services.inflation import (
    LogDensity,
    StandardizationSpec,
    log_unit_ball_volume,
    radius_for_log_mass,
    shrink_points,
    standardize,
)

logger = logging.getLogger(__name__)

# Lower CI bound used when 2 * rmse >= 1 makes log(1 - 2 * rmse) undefined.
CI_FLOOR = 5.0
BOOTSTRAP_FAILURE_LIMIT = 0.10

Standardization = StandardizationSpec | Literal["auto"] | None


@dataclass(frozen=True)
class LogDensitySample:
    """Posterior draws in unconstrained space with their unnormalized log-target."""

    draws: np.ndarray
    log_g: np.ndarray
    ess: float | None = None

    def __post_init__(self) -> None:
        draws = np.asarray(self.draws, dtype=float)
        if draws.ndim == 1:
            draws = draws[:, None]
        log_g = np.asarray(self.log_g, dtype=float).reshape(-1)
        if draws.ndim != 2 or draws.shape[1] < 1:
            raise InvalidInputError("draws must be a T x d matrix with d >= 1")
        if draws.shape[0] < 2:
            raise InvalidInputError("at least two draws are required")
        if log_g.shape[0] != draws.shape[0]:
            raise InvalidInputError("log_g must have one value per draw")
        if not np.all(np.isfinite(log_g)):
            bad = int(np.flatnonzero(~np.isfinite(log_g))[0])
            raise InvalidInputError(f"log_g is not finite at draw {bad}")
        ess = float(draws.shape[0]) if self.ess is None else float(self.ess)
        if not (1.0 <= ess <= draws.shape[0]):
            raise InvalidInputError(f"ess must lie in [1, {draws.shape[0]}], got {ess}")
        object.__setattr__(self, "draws", draws)
        object.__setattr__(self, "log_g", log_g)
        object.__setattr__(self, "ess", ess)

    @property
    def T(self) -> int:
        return self.draws.shape[0]

    @property
    def d(self) -> int:
        return self.draws.shape[1]


@dataclass
class BootstrapOutcome:
    value: float
    n_replicates: int
    n_failed: int = 0
    unstable: bool = False
    failed_indices: list[int] = field(default_factory=list)


# ── Helpers ───────────────────────────────────────────────────────────────────

def log_mean_exp(values: np.ndarray) -> float:
    """log(mean(exp(values))) shifted by the max; exact for constant input."""
    values = np.asarray(values, dtype=float)
    top = float(np.max(values))
    if top == -math.inf:
        return -math.inf
    return top + math.log(float(np.mean(np.exp(values - top))))


def _log_likelihoods(values: Sequence[float]) -> np.ndarray:
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.shape[0] < 2:
        raise InvalidInputError("at least two log-likelihood values are required")
    if np.any(np.isnan(arr)) or np.any(arr == math.inf):
        raise InvalidInputError("log-likelihood values must be finite or -inf")
    if np.all(arr == -math.inf):
        raise DegenerateInputError("all log-likelihood values are -inf")
    return arr


def _resolve_ess(ess: float | None, n: int) -> float:
    if ess is None:
        return float(n)
    if not (1.0 <= ess <= n):
        raise InvalidInputError(f"ess must lie in [1, {n}], got {ess}")
    return float(ess)


def confidence_interval(log_c: float, rmse: float) -> tuple[float, float]:
    """[log(c(1 - 2 rmse)), log(c(1 + 2 rmse))], lower end floored at log c - 5."""
    if not math.isfinite(rmse):
        return log_c - CI_FLOOR, math.inf
    lower = log_c - CI_FLOOR if 2.0 * rmse >= 1.0 else log_c + max(math.log1p(-2.0 * rmse), -CI_FLOOR)
    return lower, log_c + math.log1p(2.0 * rmse)


def _relative_sd(weights: np.ndarray) -> float:
    if weights.shape[0] < 2:
        return 0.0
    return float(np.std(weights, ddof=1))


def _build_estimate(
    method: EstimatorMethod,
    log_c: float,
    rmse_delta: float,
    n: int,
    ess: float,
    **extra,
) -> EvidenceEstimate:
    rmse_ess = rmse_delta * math.sqrt(n / ess)
    ci_low, ci_high = confidence_interval(log_c, rmse_ess)
    return EvidenceEstimate(
        method=method,
        log_c=log_c,
        rmse_delta=rmse_delta,
        rmse_delta_ess=rmse_ess,
        ci_low=ci_low,
        ci_high=ci_high,
        n_draws=n,
        ess=ess,
        **extra,
    )


# ── Arithmetic / harmonic mean ────────────────────────────────────────────────

def arithmetic_mean(
    log_likelihoods: Sequence[float],
    sampled_from: Literal["prior", "posterior"] = "prior",
    ess: float | None = None,
) -> EvidenceEstimate:
    """Mean likelihood. Over prior draws this is the evidence; over posterior
    draws it is only a surrogate score and is flagged as such."""
    log_l = _log_likelihoods(log_likelihoods)
    n = log_l.shape[0]
    ess = _resolve_ess(ess, n)
    log_c = log_mean_exp(log_l)
    weights = np.exp(log_l - log_c)
    rmse = _relative_sd(weights) / math.sqrt(n)

    if sampled_from == "prior":
        return _build_estimate(EstimatorMethod.AM_PRIOR, log_c, rmse, n, ess)
    if sampled_from == "posterior":
        return _build_estimate(
            EstimatorMethod.AM_POSTERIOR_SURROGATE,
            log_c,
            rmse,
            n,
            ess,
            is_marginal_likelihood=False,
            warnings=["posterior arithmetic mean is a surrogate score, not a marginal likelihood"],
        )
    raise InvalidInputError(f"sampled_from must be 'prior' or 'posterior', got {sampled_from!r}")


def harmonic_mean(
    log_likelihoods: Sequence[float],
    ess: float | None = None,
    literal_formula: bool = False,
) -> EvidenceEstimate:
    """Harmonic mean of the likelihood over posterior draws.

    The delta-method error carries a 1/n factor like the AM one;
    ``literal_formula`` drops it to reproduce the printed variant.
    """
    log_l = _log_likelihoods(log_likelihoods)
    if np.any(log_l == -math.inf):
        index = int(np.flatnonzero(log_l == -math.inf)[0])
        raise InvalidInputError(f"posterior draw {index} has zero likelihood; the harmonic mean needs finite values")
    n = log_l.shape[0]
    ess = _resolve_ess(ess, n)
    log_c = -log_mean_exp(-log_l)
    # c / L(theta): bounded above by n, so no overflow
    weights = np.exp(log_c - log_l)
    rmse = _relative_sd(weights)
    if not literal_formula:
        rmse /= math.sqrt(n)

    warnings = []
    if rmse * math.sqrt(n / ess) > 1.0:
        warnings.append("harmonic mean relative error exceeds 1; estimate is unreliable")
        logger.warning("HM relative error %.3g exceeds 1", rmse)
    return _build_estimate(EstimatorMethod.HM, log_c, rmse, n, ess, warnings=warnings)


# ── Generalized harmonic mean ─────────────────────────────────────────────────

def ghm(sample: LogDensitySample, log_f: LogDensity) -> EvidenceEstimate:
    """1 / mean(f / g) over draws from the normalized target.

    ``log_f`` must be a normalized density whose support lies inside the
    target's; -inf values (outside f's support) are allowed.
    """
    log_f_values = np.asarray(log_f(sample.draws), dtype=float).reshape(-1)
    bad = np.isnan(log_f_values) | (log_f_values == math.inf)
    if bad.any():
        index = int(np.flatnonzero(bad)[0])
        raise EstimatorBreakdownError(f"log_f is not finite at draw {index}", index=index)

    log_ratio = log_f_values - sample.log_g
    log_mean_ratio = log_mean_exp(log_ratio)
    if log_mean_ratio == -math.inf:
        raise EstimatorBreakdownError("f vanishes on every draw; no draw lies in its support")
    log_c = -log_mean_ratio
    weights = np.exp(log_ratio - log_mean_ratio)
    rmse = _relative_sd(weights) / math.sqrt(sample.T)
    return _build_estimate(EstimatorMethod.GHM, log_c, rmse, sample.T, sample.ess)


# ── Inflated density ratio ────────────────────────────────────────────────────

class IdrContext:
    """A standardized sample prepared once and reused for every inflation mass.

    Only g_Pk changes with k, so each grid point costs one batch of density
    evaluations at the shrunk draws.

    With ``relative_k`` (the default) k is measured in units of the target's
    height at the inflation center: g is rescaled to equal 1 there and the
    scale is added back to log c. Otherwise k is an absolute mass.
    """

    def __init__(
        self,
        sample: LogDensitySample,
        log_g: LogDensity,
        standardization: Standardization = None,
        relative_k: bool = True,
    ):
        self.sample = sample
        if standardization is None:
            spec = StandardizationSpec.identity(sample.d)
            z = sample.draws
            target = log_g
        elif isinstance(standardization, StandardizationSpec):
            spec = standardization
            z = spec.to_standard(sample.draws)
            target = spec.adjust(log_g)
        elif standardization == "auto":
            spec, z, target = standardize(sample.draws, log_g, sample.log_g)
        else:
            raise InvalidInputError(f"unknown standardization {standardization!r}")

        self.spec = spec
        self.z = z
        self.target = target
        # Numerator and denominator go through the same callback so that
        # round-off cancels in g_Pk / g - 1 for tiny k.
        self.log_target = np.asarray(target(z), dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.log_target)):
            index = int(np.flatnonzero(~np.isfinite(self.log_target))[0])
            raise EstimatorBreakdownError(
                f"target log-density is not finite at draw {index}", index=index
            )
        self.log_center = float(np.asarray(target(np.zeros((1, sample.d))), dtype=float)[0])
        if not math.isfinite(self.log_center):
            raise EstimatorBreakdownError(
                "target log-density is not finite at the inflation center; "
                "IDR needs full support"
            )
        self.shift = self.log_center if relative_k else 0.0
        self.relative_k = relative_k

    @property
    def d(self) -> int:
        return self.sample.d

    def radius(self, k: float) -> float:
        return radius_for_log_mass(math.log(k), self.log_center - self.shift, self.d)

    def excess_ratios(self, k: float) -> np.ndarray:
        """Per-draw g_Pk / g - 1."""
        if not k > 0:
            raise InvalidInputError("inflation mass k must be positive")
        mapped, inside = shrink_points(self.z, self.radius(k))
        log_inflated = np.full(self.sample.T, self.log_center)
        if (~inside).any():
            log_inflated[~inside] = self.target(mapped[~inside])
        return np.expm1(log_inflated - self.log_target)

    def estimate(self, k: float) -> EvidenceEstimate:
        excess = self.excess_ratios(k)
        mean_excess = float(np.mean(excess))
        if not mean_excess > 0.0:
            raise EstimatorUndefinedError(
                f"mean(ratio) - 1 = {mean_excess:.3g} is not positive at k={k:g}; "
                "k is too small for the sample or the sample does not follow the target"
            )
        log_c = math.log(k) - math.log(mean_excess) + self.shift
        rmse = _relative_sd(excess) / (mean_excess * math.sqrt(self.sample.T))
        return _build_estimate(
            EstimatorMethod.IDR, log_c, rmse, self.sample.T, self.sample.ess, k_opt=k
        )

    def search(self, k_grid: Sequence[float], jobs: int = 1) -> tuple[KGridResult, list[EvidenceEstimate]]:
        grid = [float(k) for k in k_grid]
        if not grid:
            raise InvalidInputError("k grid must be nonempty")
        if any(k <= 0 for k in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise InvalidInputError("k grid must be positive and strictly increasing")

        def _try(k: float) -> EvidenceEstimate | None:
            try:
                return self.estimate(k)
            except EstimatorUndefinedError as exc:
                logger.debug("k=%g skipped: %s", k, exc)
                return None

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_try, grid))
        else:
            results = [_try(k) for k in grid]

        estimates = [e for e in results if e is not None]
        failed = [k for k, e in zip(grid, results) if e is None]
        if not estimates:
            raise NoValidKError(f"IDR is undefined at every k in the grid ({len(grid)} points)")
        rows = [
            KGridRow(
                k=e.k_opt,
                log_c=e.log_c,
                rmse_delta=e.rmse_delta,
                rmse_delta_ess=e.rmse_delta_ess,
                ci_low=e.ci_low,
                ci_high=e.ci_high,
            )
            for e in estimates
        ]
        result = KGridResult(rows=rows, selected_index=select_k(rows), failed_k=failed)
        return result, estimates


def idr(
    sample: LogDensitySample,
    log_g: LogDensity,
    k: float,
    standardization: Standardization = None,
    relative_k: bool = True,
) -> EvidenceEstimate:
    return IdrContext(sample, log_g, standardization, relative_k).estimate(k)


def select_k(rows: Sequence[KGridRow]) -> int:
    """Index of the row with the smallest ESS-corrected rmse; first wins on ties."""
    if not rows:
        raise InvalidInputError("no grid rows to select from")
    scores = np.array([row.rmse_delta_ess for row in rows], dtype=float)
    scores = np.where(np.isnan(scores), math.inf, scores)
    return int(np.argmin(scores))


def idr_k_search(
    sample: LogDensitySample,
    log_g: LogDensity,
    k_grid: Sequence[float],
    standardization: Standardization = None,
    relative_k: bool = True,
    jobs: int = 1,
) -> KGridResult:
    result, _ = IdrContext(sample, log_g, standardization, relative_k).search(k_grid, jobs)
    return result


def suggest_k_grid(d: int, n: int = 25, relative_k: bool = True) -> list[float]:
    """Grid whose plateau radii run from 0.01 sqrt(d) to sqrt(d) in standardized space.

    Assumes a standardized target and, for relative k, unit height at the center.
    """
    radii = np.logspace(math.log10(0.01 * math.sqrt(d)), math.log10(math.sqrt(d)), n)
    log_height = 0.0 if relative_k else -0.5 * d * math.log(2 * math.pi)
    log_k = log_height + log_unit_ball_volume(d) + d * np.log(radii)
    return [float(v) for v in np.exp(log_k)]


def parse_k_grid(text: str) -> list[float]:
    """``auto`` (empty list), ``lo:hi:log[:n]`` or a comma-separated list.

    A log range without ``n`` has one point per decade.
    """
    text = text.strip()
    if text == "auto":
        return []
    try:
        if ":" in text:
            parts = text.split(":")
            if len(parts) not in (3, 4) or parts[2] != "log":
                raise ValueError
            lo, hi = float(parts[0]), float(parts[1])
            if not 0 < lo < hi:
                raise ValueError
            n = int(parts[3]) if len(parts) == 4 else int(round(math.log10(hi / lo))) + 1
            grid = np.logspace(math.log10(lo), math.log10(hi), max(n, 2)).tolist()
        else:
            grid = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InvalidInputError(f"invalid k grid {text!r}") from None
    if not grid or any(k <= 0 for k in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise InvalidInputError("k grid must be positive and strictly increasing")
    return grid


# ── Resampling errors ─────────────────────────────────────────────────────────

def bootstrap_rmse(
    per_draw_statistic: Sequence[float],
    estimator: Callable[[np.ndarray], float],
    B: int,
    ess: float | None = None,
    rng_seed: int | np.random.SeedSequence | None = 0,
) -> BootstrapOutcome:
    """Root-mean-square relative deviation of bootstrap replicates.

    ``estimator`` maps a resampled statistic to a log-scale estimate. Each
    replicate draws round(ess) indices with replacement.
    """
    stat = np.asarray(per_draw_statistic, dtype=float)
    n = stat.shape[0]
    if n < 2:
        raise InvalidInputError("bootstrap needs a statistic of length >= 2")
    if B < 1:
        raise InvalidInputError("B must be at least 1")
    size = max(1, int(round(_resolve_ess(ess, n))))
    full = float(estimator(stat))
    if not math.isfinite(full):
        raise EstimatorUndefinedError("estimator is not finite on the full sample")

    rng = np.random.default_rng(rng_seed)
    deviations = []
    failed = []
    for b in range(B):
        idx = rng.integers(0, n, size=size)
        try:
            value = float(estimator(stat[idx]))
        except EvidenceError:
            failed.append(b)
            continue
        if not math.isfinite(value):
            failed.append(b)
            continue
        deviations.append(value - full)

    unstable = len(failed) > BOOTSTRAP_FAILURE_LIMIT * B
    if unstable:
        logger.warning("bootstrap: %d of %d replicates failed", len(failed), B)
    if not deviations:
        return BootstrapOutcome(math.nan, B, len(failed), True, failed)
    with np.errstate(over="ignore"):
        rel = np.expm1(np.asarray(deviations))
        value = float(np.sqrt(np.mean(rel * rel)))
    return BootstrapOutcome(value, B, len(failed), unstable, failed)


def mc_replicate_rmse(estimates: Sequence[float]) -> float:
    """RMS relative deviation of independent replicate estimates from their mean."""
    logs = np.asarray(estimates, dtype=float).reshape(-1)
    if logs.shape[0] < 2:
        raise InvalidInputError("at least two replicate estimates are required")
    if not np.all(np.isfinite(logs)):
        raise InvalidInputError("replicate estimates must be finite")
    rel = np.exp(logs - log_mean_exp(logs))
    return float(np.sqrt(np.mean((rel - 1.0) ** 2)))


# Log-scale estimators over a per-draw statistic, for bootstrap_rmse.

def hm_statistic_estimator(log_likelihoods: np.ndarray) -> float:
    return -log_mean_exp(-np.asarray(log_likelihoods, dtype=float))


def am_statistic_estimator(log_likelihoods: np.ndarray) -> float:
    return log_mean_exp(np.asarray(log_likelihoods, dtype=float))


def idr_statistic_estimator(k: float, shift: float = 0.0) -> Callable[[np.ndarray], float]:
    def _estimate(excess: np.ndarray) -> float:
        mean_excess = float(np.mean(excess))
        if not mean_excess > 0.0:
            raise EstimatorUndefinedError("mean(ratio) - 1 is not positive on this replicate")
        return math.log(k) - math.log(mean_excess) + shift

    return _estimate


# ── Full summary ──────────────────────────────────────────────────────────────

KNOWN_METHODS = ("idr", "hm", "am")


@dataclass(frozen=True)
class EstimatorConfig:
    methods: tuple[str, ...] = KNOWN_METHODS
    k_grid: tuple[float, ...] | None = None
    bootstrap: int = 0
    seed: int = 0
    jobs: int = 1
    relative_k: bool = True
    literal_hm: bool = False
    standardization: Standardization = "auto"


@dataclass(frozen=True)
class ReplicateInput:
    """An independent replicate chain used for the Monte Carlo RMSE."""

    sample: LogDensitySample
    log_lik: np.ndarray | None = None


def _with_bootstrap(estimate: EvidenceEstimate, outcome: BootstrapOutcome | None) -> EvidenceEstimate:
    if outcome is None:
        return estimate
    warnings = list(estimate.warnings)
    if outcome.unstable:
        warnings.append(
            f"bootstrap unstable: {outcome.n_failed} of {outcome.n_replicates} replicates failed"
        )
    return estimate.model_copy(update={"rmse_boot": outcome.value, "warnings": warnings})


def _safe_bootstrap(stat, estimator, config: EstimatorConfig, ess: float, seed) -> BootstrapOutcome | None:
    if config.bootstrap < 1:
        return None
    try:
        return bootstrap_rmse(stat, estimator, config.bootstrap, ess=ess, rng_seed=seed)
    except EvidenceError as exc:
        logger.warning("bootstrap skipped: %s", exc)
        return BootstrapOutcome(math.nan, config.bootstrap, config.bootstrap, True)


def _idr_log_c(sample: LogDensitySample, log_g: LogDensity, grid, config: EstimatorConfig) -> float:
    ctx = IdrContext(sample, log_g, config.standardization, config.relative_k)
    result, _ = ctx.search(grid, config.jobs)
    return result.selected.log_c


def estimator_summary(
    sample: LogDensitySample,
    log_g: LogDensity | None = None,
    log_lik: Sequence[float] | None = None,
    config: EstimatorConfig = EstimatorConfig(),
    replicates: Sequence[ReplicateInput] = (),
    columns: Sequence[str] = (),
    data_fingerprint: str | None = None,
) -> EvidenceReport:
    """IDR over a k grid, HM and the posterior AM surrogate with every RMSE variant."""
    unknown = set(config.methods) - set(KNOWN_METHODS)
    if unknown:
        raise InvalidInputError(f"unknown estimator(s): {', '.join(sorted(unknown))}")
    if "idr" in config.methods and log_g is None:
        raise InvalidInputError("IDR needs the target log-density to re-evaluate at shrunk draws")
    if {"hm", "am"} & set(config.methods) and log_lik is None:
        raise InvalidInputError("HM and AM need per-draw log-likelihood values (log_lik column)")

    seeds = np.random.SeedSequence(config.seed).spawn(len(KNOWN_METHODS))
    estimates: list[EvidenceEstimate] = []
    grid_result = None
    mc_values: dict[EstimatorMethod, list[float]] = {}

    if "idr" in config.methods:
        ctx = IdrContext(sample, log_g, config.standardization, config.relative_k)
        grid = list(config.k_grid) if config.k_grid else suggest_k_grid(sample.d, relative_k=config.relative_k)
        grid_result, grid_estimates = ctx.search(grid, config.jobs)
        best = grid_estimates[grid_result.selected_index]
        outcome = _safe_bootstrap(
            ctx.excess_ratios(best.k_opt),
            idr_statistic_estimator(best.k_opt, ctx.shift),
            config,
            sample.ess,
            seeds[0],
        )
        estimates.append(_with_bootstrap(best, outcome))
        mc_values[EstimatorMethod.IDR] = [best.log_c]
        for replicate in replicates:
            try:
                mc_values[EstimatorMethod.IDR].append(_idr_log_c(replicate.sample, log_g, grid, config))
            except EvidenceError as exc:
                logger.warning("IDR failed on a replicate chain: %s", exc)

    if "hm" in config.methods:
        hm = harmonic_mean(log_lik, ess=sample.ess, literal_formula=config.literal_hm)
        outcome = _safe_bootstrap(log_lik, hm_statistic_estimator, config, sample.ess, seeds[1])
        estimates.append(_with_bootstrap(hm, outcome))
        mc_values[EstimatorMethod.HM] = [hm.log_c] + [
            hm_statistic_estimator(r.log_lik) for r in replicates if r.log_lik is not None
        ]

    if "am" in config.methods:
        am = arithmetic_mean(log_lik, sampled_from="posterior", ess=sample.ess)
        outcome = _safe_bootstrap(log_lik, am_statistic_estimator, config, sample.ess, seeds[2])
        estimates.append(_with_bootstrap(am, outcome))
        mc_values[EstimatorMethod.AM_POSTERIOR_SURROGATE] = [am.log_c] + [
            am_statistic_estimator(r.log_lik) for r in replicates if r.log_lik is not None
        ]

    if replicates:
        estimates = [
            e.model_copy(update={"rmse_mc": mc_replicate_rmse(mc_values[e.method])})
            if len(mc_values.get(e.method, [])) >= 2
            else e
            for e in estimates
        ]

    return EvidenceReport(
        estimates=estimates,
        k_grid=grid_result,
        n_draws=sample.T,
        dimension=sample.d,
        ess=sample.ess,
        columns=list(columns),
        data_fingerprint=data_fingerprint,
        mc_replicates=1 + len(replicates),
        replicate_log_c=mc_values if replicates else {},
    )
