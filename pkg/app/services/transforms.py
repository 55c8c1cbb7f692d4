"""Constrained <-> unconstrained maps for phylogenetic parameters.

Every ``log_jacobian`` returned here is the log |det| of the *inverse* map
(unconstrained -> constrained), i.e. the term added to a constrained log-density
to obtain the density of the unconstrained coordinates.

Packing order (version ``PACKING_VERSION``): branch lengths (log), pi (alr),
rho (alr), alpha (log), as applicable to the model kind.
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import logsumexp

from app.core.errors import BlockConstraintError, InvalidInputError
from app.schemas.phylo import ModelKind

PACKING_VERSION = "1"
SIMPLEX_TOL = 1e-12


class BlockKind(str, Enum):
    POSITIVE = "positive"
    SIMPLEX = "simplex"


@dataclass(frozen=True)
class ParameterBlock:
    name: str
    kind: BlockKind
    constrained: np.ndarray
    unconstrained: np.ndarray
    log_jacobian: float


@dataclass(frozen=True)
class PhyloParameters:
    """Constrained parameters of a fixed-topology model."""

    branch_lengths: np.ndarray
    pi: np.ndarray | None = None
    rho: np.ndarray | None = None
    alpha: float | None = None


# ── Positive reals ────────────────────────────────────────────────────────────

def log_transform(values) -> tuple[np.ndarray, float]:
    x = np.asarray(values, dtype=float).reshape(-1)
    if np.any(~(x > 0)):
        raise InvalidInputError("log transform needs strictly positive values")
    y = np.log(x)
    return y, float(np.sum(y))


def exp_transform(y) -> tuple[np.ndarray, float]:
    y = np.asarray(y, dtype=float).reshape(-1)
    return np.exp(y), float(np.sum(y))


# ── Simplices ─────────────────────────────────────────────────────────────────

def _check_simplex(x: np.ndarray) -> None:
    if x.shape[0] < 2:
        raise InvalidInputError("a simplex needs at least two components")
    if np.any(~(x > 0)):
        raise InvalidInputError("simplex components must be strictly positive")
    if abs(float(np.sum(x)) - 1.0) > SIMPLEX_TOL * x.shape[0]:
        raise InvalidInputError(f"simplex components sum to {np.sum(x)!r}, not 1")


def alr(simplex, reference: int = -1) -> tuple[np.ndarray, float]:
    """Additive log-ratio y_i = log(x_i / x_ref) over the non-reference components."""
    x = np.asarray(simplex, dtype=float).reshape(-1)
    _check_simplex(x)
    ref = reference % x.shape[0]
    logs = np.log(x)
    y = np.delete(logs, ref) - logs[ref]
    return y, float(np.sum(logs))


def alr_inv(y, reference: int = -1) -> np.ndarray:
    """Additive logistic map back to the simplex, stable for |y| up to ~700."""
    y = np.asarray(y, dtype=float).reshape(-1)
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("alr coordinates must be finite")
    dim = y.shape[0] + 1
    ref = reference % dim
    full = np.insert(y, ref, 0.0)
    return np.exp(full - logsumexp(full))


def alr_inv_log_jacobian(y, reference: int = -1) -> tuple[np.ndarray, float]:
    y = np.asarray(y, dtype=float).reshape(-1)
    dim = y.shape[0] + 1
    full = np.insert(y, reference % dim, 0.0)
    logs = full - logsumexp(full)
    return np.exp(logs), float(np.sum(logs))


# ── Whole-model packing ───────────────────────────────────────────────────────

def packing_layout(kind: ModelKind, n_branches: int) -> list[str]:
    """Column names of the unconstrained vector, in packing order."""
    names = [f"bl.{i}" for i in range(n_branches)]
    if kind.has_frequencies:
        names += [f"pi.alr.{i}" for i in range(3)]
        names += [f"rho.alr.{i}" for i in range(5)]
    if kind.has_gamma:
        names.append("log.alpha")
    return names


def dimension(kind: ModelKind, n_branches: int) -> int:
    return len(packing_layout(kind, n_branches))


def pack_blocks(params: PhyloParameters, kind: ModelKind, reference: int = -1) -> list[ParameterBlock]:
    blocks: list[ParameterBlock] = []

    def _add(name: str, block_kind: BlockKind, values, fn, *args):
        try:
            y, jac = fn(values, *args)
        except InvalidInputError as exc:
            raise BlockConstraintError(str(exc), block=name) from exc
        blocks.append(ParameterBlock(name, block_kind, np.asarray(values, dtype=float).reshape(-1), y, jac))

    _add("branch_lengths", BlockKind.POSITIVE, params.branch_lengths, log_transform)
    if kind.has_frequencies:
        for name in ("pi", "rho"):
            value = getattr(params, name)
            if value is None:
                raise BlockConstraintError("missing for this model kind", block=name)
            _add(name, BlockKind.SIMPLEX, value, alr, reference)
        if np.asarray(params.pi).shape[0] != 4:
            raise BlockConstraintError("expected 4 stationary frequencies", block="pi")
        if np.asarray(params.rho).shape[0] != 6:
            raise BlockConstraintError("expected 6 exchangeabilities", block="rho")
    if kind.has_gamma:
        if params.alpha is None:
            raise BlockConstraintError("missing for this model kind", block="alpha")
        _add("alpha", BlockKind.POSITIVE, [params.alpha], log_transform)
    return blocks


def pack_model(params: PhyloParameters, kind: ModelKind, reference: int = -1) -> tuple[np.ndarray, float]:
    blocks = pack_blocks(params, kind, reference)
    vector = np.concatenate([b.unconstrained for b in blocks])
    return vector, float(sum(b.log_jacobian for b in blocks))


def unpack_model(
    vector, kind: ModelKind, n_branches: int, reference: int = -1
) -> tuple[PhyloParameters, float]:
    v = np.asarray(vector, dtype=float).reshape(-1)
    expected = dimension(kind, n_branches)
    if v.shape[0] != expected:
        raise InvalidInputError(f"expected {expected} coordinates for {kind.value}, got {v.shape[0]}")

    branch_lengths, log_jac = exp_transform(v[:n_branches])
    pos = n_branches
    pi = rho = None
    alpha = None
    if kind.has_frequencies:
        pi, jac_pi = alr_inv_log_jacobian(v[pos:pos + 3], reference)
        rho, jac_rho = alr_inv_log_jacobian(v[pos + 3:pos + 8], reference)
        log_jac += jac_pi + jac_rho
        pos += 8
    if kind.has_gamma:
        alpha = float(np.exp(v[pos]))
        log_jac += float(v[pos])
    return PhyloParameters(branch_lengths=branch_lengths, pi=pi, rho=rho, alpha=alpha), log_jac
