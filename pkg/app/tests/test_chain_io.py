"""Unit tests for chain files, sidecars, manifests and seeds: run with pytest app/tests/test_chain_io.py -v"""
import hashlib

import numpy as np
import pandas as pd
import pytest

from app.core.errors import ChainError, DataMismatchError, InvalidInputError
from app.schemas.phylo import ChainMetadata, ModelKind, PriorSpec
from app.schemas.run import RunManifest
from app.services.chain_io import (
    chain_from_csv,
    derive_seed,
    file_sha256,
    manifest_path,
    package_versions,
    read_chain,
    read_manifest,
    resolve_target,
    sidecar_path,
    table_sample,
    write_chain,
    write_manifest,
)
from app.services.mcmc import Chain, PhyloTarget
from app.services.transforms import packing_layout
from app.services.validation import standard_normal_log_density
from app.tests.conftest import FOUR_TAXON_NEWICK


def make_chain(rng: np.random.Generator, kind: ModelKind = ModelKind.JC69, n: int = 60) -> Chain:
    columns = packing_layout(ModelKind.JC69, 5)
    return Chain(
        draws=rng.standard_normal((n, len(columns))) * 0.3 - 2.0,
        log_post=rng.standard_normal(n) - 700.0,
        log_lik=rng.standard_normal(n) - 720.0,
        acceptance_rate=0.31,
        seed=7,
        burn_in=100,
        thin=2,
        columns=columns,
        model_kind=kind,
        priors=PriorSpec(),
        proposal_scales=[0.1] * len(columns),
    )


class TestChainFiles:
    def test_round_trip_is_exact(self, tmp_path, rng):
        chain = make_chain(rng)
        path = tmp_path / "chains" / "jc69.csv"
        write_chain(chain, path, tree_newick=FOUR_TAXON_NEWICK, data_fingerprint="abc")
        table = read_chain(path)
        np.testing.assert_array_equal(table.draws, chain.draws)
        np.testing.assert_array_equal(table.log_post, chain.log_post)
        np.testing.assert_array_equal(table.log_lik, chain.log_lik)
        assert table.columns == chain.columns
        assert table.T == 60

    def test_sidecar_contents(self, tmp_path, rng):
        path = tmp_path / "run.csv"
        meta = write_chain(make_chain(rng), path, tree_newick=FOUR_TAXON_NEWICK, data_fingerprint="abc")
        assert sidecar_path(path).exists()
        loaded = read_chain(path).metadata
        assert loaded == meta
        assert loaded.seed == 7
        assert loaded.model_kind is ModelKind.JC69
        assert loaded.tree_newick == FOUR_TAXON_NEWICK
        assert loaded.packing_version == "1"

    def test_import_without_sidecar(self, tmp_path, rng):
        path = tmp_path / "imported.csv"
        pd.DataFrame({"x": rng.standard_normal(20), "y": rng.standard_normal(20), "log_post": rng.standard_normal(20)}).to_csv(
            path, index=False
        )
        table = read_chain(path)
        assert table.metadata is None
        assert table.log_lik is None
        assert table.columns == ["x", "y"]

    def test_missing_log_post(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,y\n1,2\n3,4\n", encoding="utf-8")
        with pytest.raises(ChainError):
            read_chain(path)

    def test_non_finite_row_is_reported(self, tmp_path):
        path = tmp_path / "nan.csv"
        path.write_text("x,log_post\n1.0,0.5\n2.0,\n3.0,0.1\n", encoding="utf-8")
        with pytest.raises(ChainError) as info:
            read_chain(path)
        assert info.value.draw_index == 1

    def test_single_draw(self, tmp_path):
        path = tmp_path / "one.csv"
        path.write_text("x,log_post\n1.0,0.5\n", encoding="utf-8")
        with pytest.raises(ChainError):
            read_chain(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ChainError):
            chain_from_csv(tmp_path / "nowhere.csv")

    def test_sidecar_column_mismatch(self, tmp_path, rng):
        path = tmp_path / "run.csv"
        meta = write_chain(make_chain(rng), path)
        wrong = meta.model_copy(update={"columns": ["a", "b", "c", "d", "e"]})
        with pytest.raises(ChainError):
            chain_from_csv(path, wrong)

    def test_table_sample(self, tmp_path, rng):
        path = tmp_path / "run.csv"
        write_chain(make_chain(rng), path)
        table = read_chain(path)
        sample = table_sample(table)
        np.testing.assert_array_equal(sample.log_g, table.log_post)
        assert sample.ess == table.ess


class TestReproducibility:
    def test_derive_seed(self):
        assert derive_seed(42, "sample") == derive_seed(42, "sample")
        assert derive_seed(42, "sample") != derive_seed(42, "evidence")
        assert derive_seed(42, "sample") != derive_seed(43, "sample")
        assert 0 <= derive_seed(0, "x") < 2**32

    def test_negative_master_seed(self):
        with pytest.raises(InvalidInputError):
            derive_seed(-1, "sample")

    def test_manifest_round_trip(self, tmp_path):
        manifest = RunManifest(
            command="evidence",
            argv=["evidence", "--chain", "c.csv"],
            seed=3,
            derived_seeds={"bootstrap": derive_seed(3, "bootstrap")},
            inputs={"c.csv": "00"},
            outputs=["evidence.json"],
            versions=package_versions(),
        )
        path = manifest_path(tmp_path, "evidence")
        write_manifest(manifest, path)
        assert path.name == "evidence.manifest.json"
        assert read_manifest(path) == manifest

    def test_file_hash(self, tmp_path):
        path = tmp_path / "data.txt"
        path.write_bytes(b"ACGT" * 1000)
        assert file_sha256(path) == hashlib.sha256(b"ACGT" * 1000).hexdigest()

    def test_package_versions(self):
        versions = package_versions()
        assert set(versions) == {"numpy", "scipy", "pandas", "biopython", "pydantic"}
        assert versions["numpy"] != "unknown"


class TestResolveTarget:
    def test_rebuilds_phylogenetic_target(self, tmp_path, rng, jc69_alignment):
        path = tmp_path / "run.csv"
        write_chain(make_chain(rng), path, FOUR_TAXON_NEWICK, jc69_alignment.fingerprint())
        target, fingerprint = resolve_target(read_chain(path), jc69_alignment)
        assert isinstance(target, PhyloTarget)
        assert target.kind is ModelKind.JC69
        assert fingerprint == jc69_alignment.fingerprint()

    def test_other_alignment_is_rejected(self, tmp_path, rng, jc69_alignment):
        path = tmp_path / "run.csv"
        write_chain(make_chain(rng), path, FOUR_TAXON_NEWICK, "not-this-data")
        with pytest.raises(DataMismatchError):
            resolve_target(read_chain(path), jc69_alignment)

    def test_model_columns_must_match(self, tmp_path, rng, jc69_alignment):
        path = tmp_path / "run.csv"
        write_chain(make_chain(rng, kind=ModelKind.GTR), path, FOUR_TAXON_NEWICK, jc69_alignment.fingerprint())
        with pytest.raises(DataMismatchError):
            resolve_target(read_chain(path), jc69_alignment)

    def test_named_analytic_target(self, tmp_path, rng):
        path = tmp_path / "run.csv"
        write_chain(make_chain(rng), path)
        target, fingerprint = resolve_target(read_chain(path), target_name="normal")
        assert target is standard_normal_log_density
        assert fingerprint is None

    def test_unknown_target_name(self, tmp_path, rng):
        path = tmp_path / "run.csv"
        write_chain(make_chain(rng), path)
        with pytest.raises(InvalidInputError):
            resolve_target(read_chain(path), target_name="banana")

    def test_no_target_keeps_fingerprint(self, tmp_path, rng):
        path = tmp_path / "run.csv"
        write_chain(make_chain(rng), path, FOUR_TAXON_NEWICK, "abc")
        assert resolve_target(read_chain(path)) == (None, "abc")

    def test_sidecar_metadata_type(self, tmp_path, rng):
        path = tmp_path / "run.csv"
        write_chain(make_chain(rng), path)
        assert isinstance(read_chain(path).metadata, ChainMetadata)
