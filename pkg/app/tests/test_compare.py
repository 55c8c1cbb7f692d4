"""Unit tests for Bayes factors and topology selection: run with pytest app/tests/test_compare.py -v"""
import math

import numpy as np
import pytest

from app.core.errors import DataMismatchError, InvalidInputError
from app.schemas.evidence import EstimatorMethod
from app.schemas.phylo import ModelKind
from app.services import compare
from app.services.compare import (
    FitSettings,
    bayes_factor,
    chain_seeds,
    compare_models,
    jeffreys_category,
    log_bf_matrix,
    pairing_matrix,
    posterior_probabilities,
    replicate_bf_ci,
    tree_select,
)
from app.services.evidence import EstimatorConfig
from app.services.phylotree import enumerate_topologies


@pytest.fixture
def quick_settings():
    return FitSettings(
        draws=1000,
        burn_in=500,
        thin=1,
        replicates=2,
        estimator=EstimatorConfig(methods=("idr", "hm"), k_grid=(1e-4, 1e-3, 1e-2, 1e-1)),
    )


class TestBayesFactor:
    def test_decisive_example(self, estimate):
        report = bayes_factor(estimate(-100.0), estimate(-116.2652))
        assert report.log_bf == pytest.approx(16.2652)
        assert report.category == "decisive"
        assert report.favors == "M1"
        assert [e.log_c for e in report.per_model] == [-116.2652, -100.0]

    def test_equal_evidence(self, estimate):
        report = bayes_factor(estimate(-50.0), estimate(-50.0), labels=("jc69", "gtr"))
        assert report.log_bf == 0.0
        assert report.favors == "neither"
        assert report.category == "barely worth mentioning"

    def test_favors_named_model(self, estimate):
        report = bayes_factor(estimate(-52.0), estimate(-50.0), labels=("jc69", "gtr"))
        assert report.favors == "jc69"

    def test_antisymmetric(self, estimate):
        a, b = estimate(-10.3), estimate(-12.9)
        assert bayes_factor(a, b).log_bf == -bayes_factor(b, a).log_bf

    def test_different_data(self, estimate):
        with pytest.raises(DataMismatchError):
            bayes_factor(estimate(-1.0), estimate(-2.0), fingerprints=("aaa", "bbb"))

    def test_one_missing_fingerprint_is_allowed(self, estimate):
        assert bayes_factor(estimate(-1.0), estimate(-2.0), fingerprints=("aaa", None)).log_bf == pytest.approx(1.0)

    def test_different_methods(self, estimate):
        with pytest.raises(InvalidInputError):
            bayes_factor(estimate(-1.0, EstimatorMethod.IDR), estimate(-2.0, EstimatorMethod.HM))

    @pytest.mark.parametrize(
        "log_bf, category",
        [
            (0.5, "barely worth mentioning"),
            (1.15, "substantial"),
            (-2.0, "substantial"),
            (3.0, "strong"),
            (4.0, "very strong"),
            (-4.6, "decisive"),
            (30.0, "decisive"),
        ],
    )
    def test_categories(self, log_bf, category):
        assert jeffreys_category(log_bf) == category

    def test_replicates_give_interval(self, estimate):
        report = bayes_factor(
            estimate(-10.0), estimate(-12.0), replicates=([-12.1, -11.9, -12.05], [-10.0, -10.2, -9.9])
        )
        assert report.ci_low < report.log_bf < report.ci_high
        assert report.ci_high - report.log_bf == pytest.approx(2 * report.interval.sd_pairings)
        assert np.asarray(report.replicate_matrix).shape == (3, 3)


class TestReplicateInterval:
    def test_worked_example(self):
        interval = replicate_bf_ci([1.0, 2.0], [0.0, 0.0])
        assert interval.log_bf_mean == pytest.approx(1.5)
        assert interval.sd_pairings == pytest.approx(0.57735, abs=1e-5)
        assert interval.ci_low == pytest.approx(0.3453, abs=1e-4)
        assert interval.ci_high == pytest.approx(2.6547, abs=1e-4)
        assert interval.sd_replicates == pytest.approx(math.sqrt(0.5))
        assert interval.n_pairings == 4

    def test_identical_replicates(self):
        interval = replicate_bf_ci([3.0, 3.0, 3.0], [1.0, 1.0, 1.0])
        assert interval.sd_pairings == 0.0
        assert interval.ci_low == interval.ci_high == 2.0

    def test_pairing_matrix(self):
        np.testing.assert_array_equal(pairing_matrix([1.0, 2.0], [0.5, 1.0]), [[0.5, 0.0], [1.5, 1.0]])

    @pytest.mark.parametrize(
        "logs1, logs0",
        [([1.0], [0.0]), ([1.0, 2.0], [0.0, 1.0, 2.0]), ([1.0, math.inf], [0.0, 0.0])],
    )
    def test_invalid(self, logs1, logs0):
        with pytest.raises(InvalidInputError):
            replicate_bf_ci(logs1, logs0)


class TestPosteriorProbabilities:
    def test_sum_to_one_and_ratio(self):
        probs = posterior_probabilities([-100.0, -101.0, -103.0])
        assert probs.sum() == pytest.approx(1.0)
        assert probs[0] / probs[1] == pytest.approx(math.e)

    def test_shift_invariant(self):
        logs = np.array([-5000.0, -5002.0, -4999.5])
        np.testing.assert_allclose(posterior_probabilities(logs), posterior_probabilities(logs + 4000.0))
        assert np.all(posterior_probabilities(logs) > 0)

    def test_log_bf_matrix(self):
        logs = [-10.0, -12.5, -11.0]
        m = log_bf_matrix(logs)
        np.testing.assert_allclose(m, -m.T)
        assert m[0, 1] + m[1, 2] == pytest.approx(m[0, 2])
        np.testing.assert_array_equal(np.diag(m), 0.0)

    def test_log_bf_matrix_non_finite(self):
        with pytest.raises(InvalidInputError):
            log_bf_matrix([0.0, -math.inf])


class TestTreeSelect:
    def test_chain_seeds_are_distinct(self):
        seeds = chain_seeds(5, "tree0", 3)
        assert len(set(seeds)) == 3
        assert seeds == chain_seeds(5, "tree0", 3)
        assert seeds != chain_seeds(5, "tree1", 3)

    def test_failures_are_recorded(self, jc69_alignment):
        topologies = enumerate_topologies(jc69_alignment.names)
        settings = FitSettings(draws=50)
        report = tree_select(jc69_alignment, topologies, ModelKind.JC69, settings, seed=1)
        assert not report.complete
        assert len(report.topologies) == 3
        assert all(t.error for t in report.topologies)
        assert report.pairwise == []

    def test_leaf_set_must_match(self, jc69_alignment):
        topologies = enumerate_topologies(["A", "B", "C", "X"])
        with pytest.raises(InvalidInputError):
            tree_select(jc69_alignment, topologies, ModelKind.JC69, FitSettings(), seed=1)

    def test_initial_lengths_seed_every_chain(self, jc69_alignment, monkeypatch):
        topologies = enumerate_topologies(jc69_alignment.names)
        starts = [np.full(5, 0.05 * (i + 1)) for i in range(3)]
        seen = []

        def fake_run_chain(alignment, topology, kind, priors, **kwargs):
            seen.append((topology, kwargs["initial_lengths"]))
            raise InvalidInputError("not sampled")

        monkeypatch.setattr(compare, "run_chain", fake_run_chain)
        settings = FitSettings(draws=200, burn_in=100, thin=1, replicates=2)
        report = tree_select(jc69_alignment, topologies, ModelKind.JC69, settings, seed=1, initial_lengths=starts)
        assert len(report.topologies) == 3
        assert len(seen) == 3
        for (topology, lengths), start, expected in zip(seen, starts, topologies):
            assert topology is expected
            np.testing.assert_array_equal(lengths, start)

    def test_initial_lengths_need_one_entry_per_topology(self, jc69_alignment):
        topologies = enumerate_topologies(jc69_alignment.names)
        with pytest.raises(InvalidInputError):
            tree_select(jc69_alignment, topologies, ModelKind.JC69, FitSettings(), seed=1,
                        initial_lengths=[np.full(5, 0.1)])

    @pytest.mark.slow
    def test_true_topology_ranks_first(self, four_taxon_tree, jc69_alignment, quick_settings):
        topologies = enumerate_topologies(jc69_alignment.names)
        report = tree_select(jc69_alignment, topologies, ModelKind.JC69, quick_settings, seed=3)
        assert report.complete
        probs = [t.posterior_probability for t in report.topologies]
        assert sum(probs) == pytest.approx(1.0)
        best = min(report.topologies, key=lambda t: t.rank)
        true_topology, _ = four_taxon_tree
        assert topologies[best.index].same_shape(true_topology)
        assert len(report.pairwise) == 3


class TestCompareModels:
    @pytest.mark.slow
    def test_report_structure(self, four_taxon_tree, jc69_alignment, quick_settings):
        topology, _ = four_taxon_tree
        comparison = compare_models(jc69_alignment, topology, ModelKind.GTR, ModelKind.JC69, quick_settings, seed=2)
        assert set(comparison.reports) == {EstimatorMethod.IDR, EstimatorMethod.HM}
        report = comparison.reports[EstimatorMethod.IDR]
        assert report.labels == ["jc69", "gtr"]
        assert report.log_bf == pytest.approx(
            comparison.fit1.report.get(EstimatorMethod.IDR).log_c - comparison.fit0.report.get(EstimatorMethod.IDR).log_c
        )
        assert comparison.reports[EstimatorMethod.HM].interval is not None
        assert len(comparison.fit1.chains) == 2

    @pytest.mark.slow
    def test_simpler_true_model_is_favored(self, four_taxon_tree, jc69_alignment):
        topology, _ = four_taxon_tree
        settings = FitSettings(
            draws=4000,
            burn_in=4000,
            thin=2,
            estimator=EstimatorConfig(methods=("idr",)),
        )
        comparison = compare_models(jc69_alignment, topology, ModelKind.JC69, ModelKind.GTR_GAMMA, settings, seed=7)
        report = comparison.reports[EstimatorMethod.IDR]
        assert report.labels == ["gtr-gamma", "jc69"]
        assert report.log_bf > 0
        assert report.favors == "jc69"
