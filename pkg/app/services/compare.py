"""Bayes factors between substitution models and between topologies."""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from app.core.errors import DataMismatchError, EvidenceError, InvalidInputError
from app.schemas.evidence import EstimatorMethod, EvidenceEstimate, EvidenceReport
from app.schemas.phylo import (
    BayesFactorReport,
    ModelKind,
    PairwiseBayesFactor,
    PriorSpec,
    ReplicateInterval,
    TopologyEvidence,
    TreeSelectionReport,
)
from app.services.chain_io import derive_seed
from app.services.evidence import EstimatorConfig, ReplicateInput, estimator_summary
from app.services.mcmc import Chain, PhyloTarget, chain_to_sample, run_chain
from app.services.phylotree import Alignment, Topology, emit_newick

logger = logging.getLogger(__name__)

# Upper edges of the evidence-strength bands on the natural-log scale.
JEFFREYS_BANDS = (
    (1.15, "barely worth mentioning"),
    (2.3, "substantial"),
    (3.45, "strong"),
    (4.6, "very strong"),
)
DECISIVE = "decisive"


def jeffreys_category(log_bf: float) -> str:
    strength = abs(log_bf)
    for edge, label in JEFFREYS_BANDS:
        if strength < edge:
            return label
    return DECISIVE


# ── Bayes factors ─────────────────────────────────────────────────────────────

def pairing_matrix(logs_model1: Sequence[float], logs_model0: Sequence[float]) -> np.ndarray:
    logs1 = np.asarray(logs_model1, dtype=float).reshape(-1)
    logs0 = np.asarray(logs_model0, dtype=float).reshape(-1)
    return logs1[:, None] - logs0[None, :]


def replicate_bf_ci(logs_model1: Sequence[float], logs_model0: Sequence[float]) -> ReplicateInterval:
    """Mean of all R x R pairwise log BFs, +/- 2 SD of those pairings.

    The SD over the R replicate-wise differences is reported alongside.
    """
    logs1 = np.asarray(logs_model1, dtype=float).reshape(-1)
    logs0 = np.asarray(logs_model0, dtype=float).reshape(-1)
    if logs1.shape[0] < 2 or logs0.shape[0] < 2:
        raise InvalidInputError("at least two replicates per model are required")
    if logs1.shape[0] != logs0.shape[0]:
        raise InvalidInputError("both models need the same number of replicates")
    if not (np.all(np.isfinite(logs1)) and np.all(np.isfinite(logs0))):
        raise InvalidInputError("replicate log evidences must be finite")
    pairs = pairing_matrix(logs1, logs0)
    mean = float(np.mean(pairs))
    sd_pairings = float(np.std(pairs, ddof=1))
    return ReplicateInterval(
        log_bf_mean=mean,
        sd_pairings=sd_pairings,
        sd_replicates=float(np.std(logs1 - logs0, ddof=1)),
        ci_low=mean - 2.0 * sd_pairings,
        ci_high=mean + 2.0 * sd_pairings,
        n_pairings=int(pairs.size),
    )


def bayes_factor(
    e1: EvidenceEstimate,
    e0: EvidenceEstimate,
    labels: tuple[str, str] = ("M0", "M1"),
    fingerprints: tuple[str | None, str | None] = (None, None),
    replicates: tuple[Sequence[float], Sequence[float]] | None = None,
) -> BayesFactorReport:
    """log BF of M1 against M0; ``labels`` and ``fingerprints`` are ordered (M0, M1).

    With replicate log evidences (M0's, M1's) the interval is the point
    estimate +/- 2 SD over all pairings.
    """
    fp0, fp1 = fingerprints
    if fp0 is not None and fp1 is not None and fp0 != fp1:
        raise DataMismatchError("evidence values were computed on different data")
    if e1.method != e0.method:
        raise InvalidInputError(f"cannot compare a {e1.method.value} estimate with a {e0.method.value} one")

    log_bf = e1.log_c - e0.log_c
    if log_bf > 0:
        favors = labels[1]
    elif log_bf < 0:
        favors = labels[0]
    else:
        favors = "neither"

    interval = matrix = None
    ci_low = ci_high = None
    if replicates is not None:
        logs0, logs1 = replicates
        interval = replicate_bf_ci(logs1, logs0)
        matrix = pairing_matrix(logs1, logs0).tolist()
        ci_low = log_bf - 2.0 * interval.sd_pairings
        ci_high = log_bf + 2.0 * interval.sd_pairings

    return BayesFactorReport(
        log_bf=log_bf,
        method=e1.method,
        category=jeffreys_category(log_bf),
        favors=favors,
        ci_low=ci_low,
        ci_high=ci_high,
        per_model=[e0, e1],
        labels=list(labels),
        replicate_matrix=matrix,
        interval=interval,
    )


# ── Fitting one model ─────────────────────────────────────────────────────────

@dataclass(frozen=True)
class FitSettings:
    """Sampler and estimator settings shared by every candidate model."""

    priors: PriorSpec = field(default_factory=PriorSpec)
    n_categories: int = 4
    draws: int = 5000
    burn_in: int = 5000
    thin: int = 5
    replicates: int = 1
    jobs: int = 1
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)


@dataclass(frozen=True)
class FitResult:
    report: EvidenceReport
    chains: list[Chain]
    seeds: list[int]


def _sample_chain(args) -> Chain:
    alignment, topology, kind, settings, seed, initial_lengths = args
    return run_chain(
        alignment,
        topology,
        kind,
        settings.priors,
        draws=settings.draws,
        burn_in=settings.burn_in,
        thin=settings.thin,
        rng_seed=seed,
        n_categories=settings.n_categories,
        initial_lengths=initial_lengths,
    )


def chain_seeds(seed: int, label: str, replicates: int) -> list[int]:
    return [derive_seed(seed, f"{label}:chain{r}") for r in range(replicates)]


def run_chains(
    alignment: Alignment,
    topology: Topology,
    kind: ModelKind,
    settings: FitSettings,
    seeds: Sequence[int],
    initial_lengths: np.ndarray | None = None,
) -> list[Chain]:
    """One chain per seed, in seed order; processes are used when ``settings.jobs > 1``."""
    jobs = [(alignment, topology, kind, settings, s, initial_lengths) for s in seeds]
    if settings.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=settings.jobs) as pool:
            return list(pool.map(_sample_chain, jobs))
    return [_sample_chain(job) for job in jobs]


def fit_evidence(
    alignment: Alignment,
    topology: Topology,
    kind: ModelKind,
    settings: FitSettings,
    seed: int,
    label: str = "model",
    initial_lengths: np.ndarray | None = None,
) -> FitResult:
    """Run R chains for one model and summarize the evidence of the first,
    using the others as Monte Carlo replicates."""
    seeds = chain_seeds(seed, label, settings.replicates)
    chains = run_chains(alignment, topology, kind, settings, seeds, initial_lengths)

    target = PhyloTarget.build(alignment, topology, kind, settings.priors, settings.n_categories)
    primary, *others = chains
    report = estimator_summary(
        chain_to_sample(primary),
        log_g=target,
        log_lik=primary.log_lik,
        config=settings.estimator,
        replicates=[ReplicateInput(chain_to_sample(c), c.log_lik) for c in others],
        columns=primary.columns,
        data_fingerprint=alignment.fingerprint(),
    )
    return FitResult(report=report, chains=chains, seeds=seeds)


def _replicate_logs(report: EvidenceReport, method: EstimatorMethod) -> list[float] | None:
    logs = report.replicate_log_c.get(method)
    return logs if logs and len(logs) >= 2 else None


def bayes_factor_between(
    fit1: FitResult,
    fit0: FitResult,
    method: EstimatorMethod,
    labels: tuple[str, str],
) -> BayesFactorReport:
    e1, e0 = fit1.report.get(method), fit0.report.get(method)
    if e1 is None or e0 is None:
        raise InvalidInputError(f"estimator {method.value} was not run")
    logs1, logs0 = _replicate_logs(fit1.report, method), _replicate_logs(fit0.report, method)
    replicates = (logs0, logs1) if logs1 and logs0 and len(logs1) == len(logs0) else None
    return bayes_factor(
        e1,
        e0,
        labels=labels,
        fingerprints=(fit0.report.data_fingerprint, fit1.report.data_fingerprint),
        replicates=replicates,
    )


@dataclass(frozen=True)
class ModelComparison:
    reports: dict[EstimatorMethod, BayesFactorReport]
    fit1: FitResult
    fit0: FitResult


def compare_models(
    alignment: Alignment,
    topology: Topology,
    kind1: ModelKind,
    kind0: ModelKind,
    settings: FitSettings,
    seed: int,
) -> ModelComparison:
    """Bayes factor of ``kind1`` against ``kind0`` for every estimator that ran."""
    fit1 = fit_evidence(alignment, topology, kind1, settings, seed, label=kind1.value)
    fit0 = fit_evidence(alignment, topology, kind0, settings, seed, label=kind0.value)
    labels = (kind0.value, kind1.value)
    reports = {
        e.method: bayes_factor_between(fit1, fit0, e.method, labels)
        for e in fit1.report.estimates
        if fit0.report.get(e.method) is not None
    }
    return ModelComparison(reports=reports, fit1=fit1, fit0=fit0)


# ── Topology selection ────────────────────────────────────────────────────────

def posterior_probabilities(log_evidences: Sequence[float]) -> np.ndarray:
    """p_i = c_i / sum_j c_j under equal prior weights, on the log scale."""
    logs = np.asarray(log_evidences, dtype=float)
    return np.exp(logs - logsumexp(logs))


def tree_select(
    alignment: Alignment,
    topologies: Sequence[Topology],
    kind: ModelKind,
    settings: FitSettings,
    seed: int,
    method: EstimatorMethod = EstimatorMethod.IDR,
    initial_lengths: Sequence[np.ndarray] | None = None,
) -> TreeSelectionReport:
    """Evidence for each candidate topology; failures are recorded, not raised.

    ``initial_lengths`` seeds every chain of topology i at those branch lengths.
    """
    names = set(alignment.names)
    for topology in topologies:
        if set(topology.leaf_names) != names:
            raise InvalidInputError("every topology must have the alignment's leaf set")
    if initial_lengths is not None and len(initial_lengths) != len(topologies):
        raise InvalidInputError("initial_lengths needs one entry per topology")

    entries: list[TopologyEvidence] = []
    replicate_logs: dict[int, list[float] | None] = {}
    for i, topology in enumerate(topologies):
        start = initial_lengths[i] if initial_lengths is not None else None
        lengths = start if start is not None else np.full(topology.n_branches, 1.0 / settings.priors.branch_length_rate)
        newick = emit_newick(topology, lengths)
        try:
            fit = fit_evidence(alignment, topology, kind, settings, seed, label=f"tree{i}", initial_lengths=start)
        except EvidenceError as exc:
            logger.warning("topology %d failed: %s", i, exc)
            entries.append(TopologyEvidence(index=i, newick=newick, error=str(exc)))
            continue
        estimate = fit.report.get(method)
        if estimate is None:
            entries.append(TopologyEvidence(index=i, newick=newick, error=f"{method.value} was not run"))
            continue
        replicate_logs[i] = _replicate_logs(fit.report, method)
        entries.append(
            TopologyEvidence(
                index=i,
                newick=newick,
                log_evidence=estimate.log_c,
                estimate=estimate,
                replicate_log_evidence=replicate_logs[i] or [],
            )
        )

    ok = [e for e in entries if e.error is None]
    if ok:
        probs = posterior_probabilities([e.log_evidence for e in ok])
        order = sorted(range(len(ok)), key=lambda j: (-ok[j].log_evidence, ok[j].index))
        ranks = {ok[j].index: r + 1 for r, j in enumerate(order)}
        updated = {
            e.index: e.model_copy(update={"posterior_probability": float(p), "rank": ranks[e.index]})
            for e, p in zip(ok, probs)
        }
        entries = [updated.get(e.index, e) for e in entries]

    pairwise = []
    for a in range(len(ok)):
        for b in range(a + 1, len(ok)):
            i, j = ok[a].index, ok[b].index
            log_bf = ok[a].log_evidence - ok[b].log_evidence
            ci_low = ci_high = None
            logs_i, logs_j = replicate_logs.get(i), replicate_logs.get(j)
            if logs_i and logs_j and len(logs_i) == len(logs_j):
                sd = replicate_bf_ci(logs_i, logs_j).sd_pairings
                ci_low, ci_high = log_bf - 2.0 * sd, log_bf + 2.0 * sd
            pairwise.append(PairwiseBayesFactor(i=i, j=j, log_bf=log_bf, ci_low=ci_low, ci_high=ci_high))

    if len(ok) < len(entries):
        logger.warning("tree selection incomplete: %d of %d topologies failed", len(entries) - len(ok), len(entries))
    return TreeSelectionReport(method=method, model_kind=kind, topologies=entries, pairwise=pairwise)


def log_bf_matrix(log_evidences: Sequence[float]) -> np.ndarray:
    """Entry (i, j) is log BF_ij = log c_i - log c_j."""
    logs = np.asarray(log_evidences, dtype=float)
    if not np.all(np.isfinite(logs)):
        raise InvalidInputError("log evidences must be finite")
    return logs[:, None] - logs[None, :]

