"""Alignment and tree files: FASTA, relaxed PHYLIP and Newick."""
import io
import logging
from pathlib import Path
from typing import TextIO

import numpy as np
from Bio import AlignIO, SeqIO
from Bio.Seq import Seq
from Bio.SeqRecord import SeqRecord

from app.core.errors import AlignmentError
from app.services.phylotree import Alignment, Topology, parse_newick, parse_newick_many

logger = logging.getLogger(__name__)


def detect_format(text: str) -> str:
    for line in text.splitlines():
        if line.strip():
            return "fasta" if line.lstrip().startswith(">") else "phylip-relaxed"
    raise AlignmentError("alignment is empty")


def parse_alignment(handle: TextIO, fmt: str, source: str = "alignment") -> Alignment:
    try:
        records = AlignIO.read(handle, fmt)
    except ValueError as exc:
        raise AlignmentError(f"{source}: {exc}") from exc
    return Alignment(
        tuple(record.id for record in records),
        tuple(str(record.seq) for record in records),
    )


def alignment_from_text(text: str, fmt: str | None = None, source: str = "alignment") -> Alignment:
    try:
        fmt = fmt or detect_format(text)
    except AlignmentError as exc:
        raise AlignmentError(f"{source}: {exc}") from exc
    return parse_alignment(io.StringIO(text), fmt, source)


def read_alignment(path: str | Path, fmt: str | None = None) -> Alignment:
    """FASTA or relaxed PHYLIP, told apart by the first non-blank line."""
    path = Path(path)
    alignment = alignment_from_text(path.read_text(encoding="utf-8"), fmt, source=str(path))
    logger.info("read %d taxa x %d sites from %s", alignment.n_taxa, alignment.n_sites, path)
    return alignment


def write_fasta(alignment: Alignment, path: str | Path) -> None:
    records = [
        SeqRecord(Seq(seq), id=name, description="")
        for name, seq in zip(alignment.names, alignment.sequences)
    ]
    with open(path, "w", encoding="utf-8") as handle:
        SeqIO.write(records, handle, "fasta")


def read_newick(path: str | Path) -> tuple[Topology, np.ndarray]:
    text = Path(path).read_text(encoding="utf-8").strip()
    return parse_newick(text)


def read_newick_many(path: str | Path) -> list[tuple[Topology, np.ndarray]]:
    """One tree per ';'-terminated statement."""
    return parse_newick_many(Path(path).read_text(encoding="utf-8"))
