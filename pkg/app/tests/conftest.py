"""Shared fixtures: a four-taxon tree, a JC69 alignment simulated on it, and estimate factories."""
import math

import numpy as np
import pytest

from app.schemas.evidence import EstimatorMethod, EvidenceEstimate
from app.services.phylotree import parse_newick, simulate_alignment
from app.services.substmodel import SubstitutionModel

FOUR_TAXON_NEWICK = "((A:0.1,B:0.2):0.05,C:0.3,D:0.4);"


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def four_taxon_tree():
    return parse_newick(FOUR_TAXON_NEWICK)


@pytest.fixture
def jc69_alignment(four_taxon_tree):
    topology, lengths = four_taxon_tree
    return simulate_alignment(topology, lengths, SubstitutionModel.jc69(), 200, rng_seed=11)


def make_estimate(log_c: float, method: EstimatorMethod = EstimatorMethod.IDR, rmse: float = 0.01) -> EvidenceEstimate:
    return EvidenceEstimate(
        method=method,
        log_c=log_c,
        rmse_delta=rmse,
        rmse_delta_ess=rmse,
        ci_low=log_c + math.log1p(-2 * rmse),
        ci_high=log_c + math.log1p(2 * rmse),
        n_draws=1000,
        ess=1000.0,
    )


@pytest.fixture
def estimate():
    return make_estimate
