"""Random-walk Metropolis-Hastings for fixed-topology models, and ESS diagnostics.

The sampler works on the unconstrained vector produced by
``transforms.pack_model``; the target it records (``log_post``) is
log prior + log likelihood + log Jacobian, i.e. the unnormalized density of the
unconstrained coordinates whose integral is the marginal likelihood.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.fft import irfft, rfft
from scipy import stats

from app.core.errors import ChainError, EvidenceError, InvalidInputError
from app.schemas.phylo import ModelKind, PriorSpec
from app.services.evidence import LogDensitySample
from app.services.phylotree import Alignment, PruningLikelihood, Topology, check_branch_lengths
from app.services.substmodel import SubstitutionModel
from app.services.transforms import PhyloParameters, pack_model, packing_layout, unpack_model

logger = logging.getLogger(__name__)

MIN_DRAWS = 100
MIN_ESS_LENGTH = 10
TARGET_ACCEPTANCE = 0.3
# Robbins-Monro step size gamma_t = (t + 1) ** -ADAPT_DECAY
ADAPT_DECAY = 0.6
DEFAULT_PROPOSAL_SCALE = 0.1


# ── Target ────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class PhyloTarget:
    """Unnormalized posterior of one (alignment, topology, model kind) triple."""

    likelihood: PruningLikelihood
    kind: ModelKind
    priors: PriorSpec = field(default_factory=PriorSpec)
    n_categories: int = 4

    @classmethod
    def build(
        cls,
        alignment: Alignment,
        topology: Topology,
        kind: ModelKind,
        priors: PriorSpec | None = None,
        n_categories: int = 4,
    ) -> "PhyloTarget":
        return cls(
            likelihood=PruningLikelihood(alignment, topology),
            kind=kind,
            priors=priors or PriorSpec(),
            n_categories=n_categories if kind.has_gamma else 1,
        )

    @property
    def topology(self) -> Topology:
        return self.likelihood.topology

    @property
    def columns(self) -> list[str]:
        return packing_layout(self.kind, self.topology.n_branches)

    @property
    def dim(self) -> int:
        return len(self.columns)

    def model(self, params: PhyloParameters) -> SubstitutionModel:
        if self.kind is ModelKind.JC69:
            return SubstitutionModel.jc69()
        if self.kind is ModelKind.GTR:
            return SubstitutionModel(kind=ModelKind.GTR, pi=params.pi, rho=params.rho)
        return SubstitutionModel(
            kind=ModelKind.GTR_GAMMA,
            pi=params.pi,
            rho=params.rho,
            alpha=params.alpha,
            n_categories=self.n_categories,
        )

    def log_prior(self, params: PhyloParameters) -> float:
        priors = self.priors
        value = float(np.sum(stats.expon.logpdf(params.branch_lengths, scale=1.0 / priors.branch_length_rate)))
        if self.kind.has_frequencies:
            value += float(stats.dirichlet.logpdf(params.pi, priors.pi_concentration))
            value += float(stats.dirichlet.logpdf(params.rho, priors.rho_concentration))
        if self.kind.has_gamma:
            value += float(stats.expon.logpdf(params.alpha, scale=1.0 / priors.alpha_rate))
        return value

    def evaluate(self, point) -> tuple[float, float]:
        """(log_post, log_lik) at one unconstrained point."""
        params, log_jac = unpack_model(point, self.kind, self.topology.n_branches)
        log_lik = self.likelihood.log_likelihood(params.branch_lengths, self.model(params))
        return self.log_prior(params) + log_lik + log_jac, log_lik

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return np.array([self.evaluate(p)[0] for p in points])

    def initial_point(self, branch_lengths=None) -> np.ndarray:
        """Prior-mean branch lengths unless given, uniform frequencies, alpha = 1."""
        if branch_lengths is None:
            branch_lengths = np.full(self.topology.n_branches, 1.0 / self.priors.branch_length_rate)
        params = PhyloParameters(
            branch_lengths=check_branch_lengths(self.topology, branch_lengths),
            pi=np.full(4, 0.25) if self.kind.has_frequencies else None,
            rho=np.full(6, 1.0 / 6.0) if self.kind.has_frequencies else None,
            alpha=1.0 if self.kind.has_gamma else None,
        )
        vector, _ = pack_model(params, self.kind)
        return vector


def log_posterior(
    point,
    alignment: Alignment,
    topology: Topology,
    kind: ModelKind,
    priors: PriorSpec | None = None,
    n_categories: int = 4,
) -> tuple[float, float]:
    return PhyloTarget.build(alignment, topology, kind, priors, n_categories).evaluate(point)


# ── Sampler ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SamplerOutput:
    draws: np.ndarray
    log_post: np.ndarray
    aux: np.ndarray
    acceptance_rate: float
    proposal_scales: np.ndarray
    block_scale: float


def random_walk_metropolis(
    evaluate: Callable[[np.ndarray], tuple[float, float]],
    x0: np.ndarray,
    draws: int,
    burn_in: int,
    thin: int,
    proposal_scale: float | np.ndarray = DEFAULT_PROPOSAL_SCALE,
    rng_seed: int | np.random.SeedSequence | None = 0,
    target_acceptance: float = TARGET_ACCEPTANCE,
) -> SamplerOutput:
    """Alternate a full-block Gaussian move and a single-coordinate move.

    ``evaluate`` returns (log target, auxiliary value), the auxiliary value
    being stored alongside each draw. During burn-in the per-coordinate
    scales and the block multiplier follow Robbins-Monro updates towards
    ``target_acceptance``; afterwards they are frozen.
    """
    if draws < 2:
        raise InvalidInputError("draws must be at least 2")
    if burn_in < 0 or thin < 1:
        raise InvalidInputError("burn_in must be >= 0 and thin >= 1")
    x = np.asarray(x0, dtype=float).reshape(-1).copy()
    d = x.shape[0]
    rng = np.random.default_rng(rng_seed)
    log_scales = np.log(np.broadcast_to(np.asarray(proposal_scale, dtype=float), (d,))).copy()
    log_block = -0.5 * math.log(d)

    try:
        lp, aux = evaluate(x)
    except EvidenceError as exc:
        raise ChainError(f"target evaluation failed at the initial point: {exc}", draw_index=0) from exc
    if not math.isfinite(lp):
        raise ChainError("target is not finite at the initial point", draw_index=0)

    out_draws = np.empty((draws, d))
    out_lp = np.empty(draws)
    out_aux = np.empty(draws)
    total = burn_in + draws * thin
    accepted = 0
    block_updates = site_updates = 0
    stored = 0

    for it in range(total):
        block_move = it % 2 == 0
        coord = (it // 2) % d
        if block_move:
            proposal = x + math.exp(log_block) * np.exp(log_scales) * rng.standard_normal(d)
        else:
            proposal = x.copy()
            proposal[coord] += math.exp(log_scales[coord]) * rng.standard_normal()
        log_u = math.log(rng.random())

        try:
            lp_new, aux_new = evaluate(proposal)
        except EvidenceError as exc:
            raise ChainError(f"target evaluation failed: {exc}", draw_index=it) from exc
        if math.isnan(lp_new) or lp_new == math.inf:
            raise ChainError(f"target returned {lp_new} at iteration {it}", draw_index=it)

        accept = log_u < lp_new - lp
        if accept:
            x, lp, aux = proposal, lp_new, aux_new

        if it < burn_in:
            signal = (1.0 if accept else 0.0) - target_acceptance
            if block_move:
                log_block += (block_updates + 1) ** -ADAPT_DECAY * signal
                block_updates += 1
            else:
                log_scales[coord] += (site_updates // d + 1) ** -ADAPT_DECAY * signal
                site_updates += 1
            if (it + 1) % 1000 == 0:
                logger.debug("burn-in %d/%d: block scale %.3g", it + 1, burn_in, math.exp(log_block))
            continue

        accepted += accept
        if (it - burn_in + 1) % thin == 0:
            out_draws[stored] = x
            out_lp[stored] = lp
            out_aux[stored] = aux
            stored += 1

    rate = accepted / (draws * thin)
    return SamplerOutput(
        draws=out_draws,
        log_post=out_lp,
        aux=out_aux,
        acceptance_rate=rate,
        proposal_scales=np.exp(log_scales),
        block_scale=math.exp(log_block),
    )


@dataclass(frozen=True)
class Chain:
    draws: np.ndarray
    log_post: np.ndarray
    log_lik: np.ndarray
    acceptance_rate: float
    seed: int
    burn_in: int
    thin: int
    columns: list[str]
    model_kind: ModelKind
    priors: PriorSpec
    n_categories: int = 1
    proposal_scales: list[float] = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.draws.shape[0]

    @property
    def d(self) -> int:
        return self.draws.shape[1]


def run_chain(
    alignment: Alignment,
    topology: Topology,
    kind: ModelKind,
    priors: PriorSpec | None = None,
    draws: int = 5000,
    burn_in: int = 5000,
    thin: int = 5,
    proposal_scale: float = DEFAULT_PROPOSAL_SCALE,
    rng_seed: int = 0,
    n_categories: int = 4,
    initial_lengths=None,
) -> Chain:
    """Adaptive random-walk chain started from ``initial_lengths`` (prior means if absent)."""
    if draws < MIN_DRAWS:
        raise InvalidInputError(f"a chain needs at least {MIN_DRAWS} draws")
    if burn_in >= draws * thin:
        raise InvalidInputError(f"burn-in ({burn_in}) must be shorter than draws x thin ({draws * thin})")
    target = PhyloTarget.build(alignment, topology, kind, priors, n_categories)
    logger.info(
        "sampling %s on %d taxa x %d sites: %d draws, burn-in %d, thin %d, seed %d",
        kind.value, alignment.n_taxa, alignment.n_sites, draws, burn_in, thin, rng_seed,
    )
    out = random_walk_metropolis(
        target.evaluate,
        target.initial_point(initial_lengths),
        draws=draws,
        burn_in=burn_in,
        thin=thin,
        proposal_scale=proposal_scale,
        rng_seed=rng_seed,
    )
    logger.info("chain finished: acceptance rate %.3f", out.acceptance_rate)
    return Chain(
        draws=out.draws,
        log_post=out.log_post,
        log_lik=out.aux,
        acceptance_rate=out.acceptance_rate,
        seed=rng_seed,
        burn_in=burn_in,
        thin=thin,
        columns=target.columns,
        model_kind=kind,
        priors=target.priors,
        n_categories=target.n_categories,
        proposal_scales=[float(s) for s in out.proposal_scales * out.block_scale],
    )


# ── Effective sample size ─────────────────────────────────────────────────────

@dataclass
class EssResult:
    ess: float
    n: int
    degenerate: bool = False


def autocorrelation(series) -> np.ndarray:
    """Sample autocorrelation at lags 0..n-1 (zero-padded FFT, no wraparound)."""
    x = np.asarray(series, dtype=float).reshape(-1)
    n = x.shape[0]
    centered = x - x.mean()
    acov = irfft(np.abs(rfft(centered, 2 * n)) ** 2, 2 * n)[:n]
    return acov / acov[0]


def ess_diagnostics(series) -> EssResult:
    x = np.asarray(series, dtype=float).reshape(-1)
    n = x.shape[0]
    if n < MIN_ESS_LENGTH:
        raise InvalidInputError(f"ESS needs at least {MIN_ESS_LENGTH} values")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("ESS series must be finite")
    if np.ptp(x) == 0.0:
        return EssResult(ess=float(n), n=n, degenerate=True)
    rho = autocorrelation(x)[1:]
    nonpositive = np.flatnonzero(rho <= 0.0)
    cut = nonpositive[0] if nonpositive.size else rho.shape[0]
    tau = 1.0 + 2.0 * float(np.sum(rho[:cut]))
    return EssResult(ess=float(np.clip(n / tau, 1.0, n)), n=n)


def effective_sample_size(series) -> float:
    return ess_diagnostics(series).ess


def chain_ess(draws: np.ndarray, log_post: np.ndarray) -> float:
    """Minimum ESS over log_post and every coordinate; degenerate series are skipped."""
    results = [ess_diagnostics(log_post)] + [ess_diagnostics(col) for col in np.atleast_2d(draws).T]
    informative = [r.ess for r in results if not r.degenerate]
    return min(informative) if informative else float(len(log_post))


def chain_to_sample(chain: Chain) -> LogDensitySample:
    return LogDensitySample(draws=chain.draws, log_g=chain.log_post, ess=chain_ess(chain.draws, chain.log_post))
