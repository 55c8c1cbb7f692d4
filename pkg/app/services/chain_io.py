"""Chain CSV files, their JSON sidecars, run manifests and seed derivation."""
import hashlib
import logging
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path
from typing import BinaryIO

import numpy as np
import pandas as pd

from app.core.errors import ChainError, DataMismatchError, InvalidInputError
from app.schemas.phylo import ChainMetadata
from app.schemas.run import RunManifest
from app.services.evidence import LogDensitySample
from app.services.inflation import LogDensity
from app.services.mcmc import Chain, PhyloTarget, chain_ess
from app.services.phylotree import Alignment, parse_newick
from app.services.transforms import PACKING_VERSION
from app.services.validation import ANALYTIC_TARGETS

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
LOG_POST = "log_post"
LOG_LIK = "log_lik"
TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "biopython", "pydantic")


@dataclass(frozen=True)
class ChainTable:
    """A chain read back from disk; ``log_lik`` is absent for imported chains without it."""

    draws: np.ndarray
    log_post: np.ndarray
    log_lik: np.ndarray | None
    columns: list[str]
    metadata: ChainMetadata | None = None

    @property
    def T(self) -> int:
        return self.draws.shape[0]

    @property
    def ess(self) -> float:
        return chain_ess(self.draws, self.log_post)


def sidecar_path(path: Path) -> Path:
    return Path(path).with_suffix(".json")


def write_chain(
    chain: Chain,
    path: str | Path,
    tree_newick: str | None = None,
    data_fingerprint: str | None = None,
) -> ChainMetadata:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(chain.draws, columns=chain.columns)
    frame[LOG_POST] = chain.log_post
    frame[LOG_LIK] = chain.log_lik
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)

    meta = ChainMetadata(
        model_kind=chain.model_kind,
        columns=list(chain.columns),
        packing_version=PACKING_VERSION,
        seed=chain.seed,
        priors=chain.priors,
        n_categories=chain.n_categories,
        acceptance_rate=chain.acceptance_rate,
        draws=chain.T,
        burn_in=chain.burn_in,
        thin=chain.thin,
        proposal_scales=chain.proposal_scales,
        tree_newick=tree_newick,
        data_fingerprint=data_fingerprint,
    )
    sidecar_path(path).write_text(meta.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info("wrote %d draws to %s", chain.T, path)
    return meta


def read_chain(path: str | Path) -> ChainTable:
    path = Path(path)
    return chain_from_csv(path, _read_sidecar(path), label=str(path))


def chain_from_csv(
    source: str | Path | BinaryIO,
    meta: ChainMetadata | None = None,
    label: str = "chain",
) -> ChainTable:
    try:
        frame = pd.read_csv(source, float_precision="round_trip")
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ChainError(f"{label}: {exc}") from exc
    return chain_from_frame(frame, meta, source=label)


def chain_from_frame(frame: pd.DataFrame, meta: ChainMetadata | None = None, source: str = "chain") -> ChainTable:
    if LOG_POST not in frame.columns:
        raise ChainError(f"{source}: missing required column {LOG_POST!r}")
    columns = [c for c in frame.columns if c not in (LOG_POST, LOG_LIK)]
    if not columns:
        raise ChainError(f"{source}: no parameter columns")
    if meta is not None and meta.columns != columns:
        raise ChainError(f"{source}: columns do not match the packing order in the sidecar")
    values = frame[columns + [LOG_POST]].to_numpy(dtype=float)
    bad_rows = np.flatnonzero(~np.all(np.isfinite(values), axis=1))
    if bad_rows.size:
        raise ChainError(f"{source}: non-finite value in row {bad_rows[0]}", draw_index=int(bad_rows[0]))
    if frame.shape[0] < 2:
        raise ChainError(f"{source}: at least two draws are required")
    log_lik = frame[LOG_LIK].to_numpy(dtype=float) if LOG_LIK in frame.columns else None
    return ChainTable(
        draws=values[:, :-1],
        log_post=values[:, -1],
        log_lik=log_lik,
        columns=columns,
        metadata=meta,
    )


def _read_sidecar(path: Path) -> ChainMetadata | None:
    sidecar = sidecar_path(path)
    if not sidecar.exists():
        logger.info("%s has no sidecar; treating it as an imported chain", path)
        return None
    return ChainMetadata.model_validate_json(sidecar.read_text(encoding="utf-8"))


# ── Reproducibility ───────────────────────────────────────────────────────────

def derive_seed(master: int, label: str) -> int:
    """Deterministic child seed for a named stage of a run."""
    if master < 0:
        raise InvalidInputError("master seed must be nonnegative")
    sequence = np.random.SeedSequence([master, *label.encode("utf-8")])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def package_versions() -> dict[str, str]:
    versions = {}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def manifest_path(out_dir: str | Path, command: str) -> Path:
    return Path(out_dir) / f"{command}.manifest.json"


def write_manifest(manifest: RunManifest, path: str | Path) -> None:
    Path(path).write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> RunManifest:
    return RunManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))


# ── Evidence inputs ───────────────────────────────────────────────────────────

def table_sample(table: ChainTable) -> LogDensitySample:
    return LogDensitySample(draws=table.draws, log_g=table.log_post, ess=table.ess)


def resolve_target(
    table: ChainTable,
    alignment: Alignment | None = None,
    target_name: str | None = None,
) -> tuple[LogDensity | None, str | None]:
    """The log-density IDR re-evaluates, and the data fingerprint, for a chain.

    A chain with a sidecar is rebuilt into its phylogenetic target from the
    alignment; otherwise a named analytic target may stand in.
    """
    meta = table.metadata
    if alignment is not None and meta is not None and meta.tree_newick:
        if meta.data_fingerprint and meta.data_fingerprint != alignment.fingerprint():
            raise DataMismatchError("the alignment is not the one the chain was sampled on")
        topology, _ = parse_newick(meta.tree_newick)
        target = PhyloTarget.build(alignment, topology, meta.model_kind, meta.priors, meta.n_categories)
        if target.columns != table.columns:
            raise DataMismatchError("chain columns do not match the model's packing order")
        return target, alignment.fingerprint()
    if target_name is not None:
        if target_name not in ANALYTIC_TARGETS:
            raise InvalidInputError(f"unknown target {target_name!r}")
        return ANALYTIC_TARGETS[target_name], None
    return None, meta.data_fingerprint if meta else None
