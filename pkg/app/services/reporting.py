"""Plain-text tables for the CLI: k grid, estimator summary, Bayes factors, topologies."""
import pandas as pd

from app.schemas.evidence import EvidenceReport, KGridResult, ValidationReport
from app.schemas.phylo import BayesFactorReport, TreeSelectionReport


def _fmt(value, spec: str = ".6f") -> str:
    if value is None:
        return "-"
    return format(value, spec)


def _render(frame: pd.DataFrame) -> str:
    return frame.to_string(index=False)


def k_grid_table(result: KGridResult) -> str:
    rows = []
    for i, row in enumerate(result.rows):
        rows.append({
            "": "*" if i == result.selected_index else "",
            "k": _fmt(row.k, ".3g"),
            "log c": _fmt(row.log_c, ".4f"),
            "rmse": _fmt(row.rmse_delta, ".3e"),
            "rmse (ESS)": _fmt(row.rmse_delta_ess, ".3e"),
            "CI": f"[{row.ci_low:.4f}, {row.ci_high:.4f}]",
        })
    text = _render(pd.DataFrame(rows))
    if result.failed_k:
        skipped = ", ".join(format(k, ".3g") for k in result.failed_k)
        text += f"\nundefined at k = {skipped}"
    return text


def summary_table(report: EvidenceReport) -> str:
    rows = [
        {
            "method": e.method.value,
            "log c": _fmt(e.log_c, ".4f"),
            "rmse": _fmt(e.rmse_delta, ".3e"),
            "rmse (ESS)": _fmt(e.rmse_delta_ess, ".3e"),
            "rmse (boot)": _fmt(e.rmse_boot, ".3e"),
            "rmse (MC)": _fmt(e.rmse_mc, ".3e"),
            "k": _fmt(e.k_opt, ".3g"),
        }
        for e in report.estimates
    ]
    header = f"T = {report.n_draws}, d = {report.dimension}, ESS = {report.ess:.1f}"
    lines = [header, _render(pd.DataFrame(rows))]
    for e in report.estimates:
        lines.extend(f"warning ({e.method.value}): {w}" for w in e.warnings)
    return "\n".join(lines)


def bayes_factor_table(report: BayesFactorReport) -> str:
    rows = [
        {"model": label, "log c": _fmt(e.log_c, ".4f"), "rmse (ESS)": _fmt(e.rmse_delta_ess, ".3e")}
        for label, e in zip(report.labels, report.per_model)
    ]
    lines = [
        _render(pd.DataFrame(rows)),
        f"log BF({report.labels[1]} vs {report.labels[0]}) = {report.log_bf:.4f} "
        f"[{report.method.value}]: {report.category}, favors {report.favors}",
    ]
    if report.interval is not None:
        iv = report.interval
        lines.append(
            f"interval {report.ci_low:.4f} .. {report.ci_high:.4f} "
            f"(SD over {iv.n_pairings} pairings {iv.sd_pairings:.4f}, "
            f"SD over replicates {iv.sd_replicates:.4f}, pairing mean {iv.log_bf_mean:.4f})"
        )
    return "\n".join(lines)


def topology_table(report: TreeSelectionReport) -> str:
    rows = [
        {
            "rank": _fmt(t.rank, "d"),
            "tree": t.index,
            "log evidence": _fmt(t.log_evidence, ".4f"),
            "P(tree | X)": _fmt(t.posterior_probability, ".4f"),
            "newick": t.newick if t.error is None else f"FAILED: {t.error}",
        }
        for t in sorted(report.topologies, key=lambda t: (t.rank is None, t.rank or 0, t.index))
    ]
    lines = [_render(pd.DataFrame(rows))]
    for pair in report.pairwise:
        interval = "" if pair.ci_low is None else f" [{pair.ci_low:.4f}, {pair.ci_high:.4f}]"
        lines.append(f"log BF({pair.i},{pair.j}) = {pair.log_bf:.4f}{interval}")
    return "\n".join(lines)


def validation_table(report: ValidationReport) -> str:
    rows = [
        {
            "target": t.name,
            "d": t.dimension,
            "true log c": _fmt(t.true_log_c, ".4f"),
            "log c": _fmt(t.log_c, ".4f"),
            "rmse": _fmt(t.rmse_delta, ".2e"),
            "k": _fmt(t.k_opt, ".3g"),
            "result": "pass" if t.passed else f"FAIL{': ' + t.error if t.error else ''}",
        }
        for t in report.targets
    ]
    return _render(pd.DataFrame(rows))
