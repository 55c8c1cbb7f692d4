"""Command-line front end.

    python -m app.cli simulate --tree true.nwk --model jc69 --sites 200 --seed 1 --out run/
    python -m app.cli sample   --alignment run/alignment.fasta --tree true.nwk --model jc69 --out run/
    python -m app.cli evidence --chain run/chain.csv --alignment run/alignment.fasta --out run/
    python -m app.cli compare  --alignment run/alignment.fasta --tree true.nwk --models jc69 gtr-gamma
    python -m app.cli trees    --alignment run/alignment.fasta --model jc69
    python -m app.cli validate --draws 100000 --seed 1
    python -m app.cli replay   --manifest run/evidence.manifest.json

Exit status: 0 on success, 1 when validation targets fail, 2 on errors.
Every command except ``replay`` writes ``<out>/<command>.manifest.json``.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from pydantic import BaseModel, ValidationError

from app.core.config import settings
from app.core.errors import DataMismatchError, EvidenceError, InvalidInputError
from app.core.logging import configure_logging
from app.schemas.evidence import EstimatorMethod
from app.schemas.phylo import ModelKind, PriorSpec
from app.schemas.run import RunConfig, RunManifest
from app.services import chain_io, evidence, reporting
from app.services.compare import FitSettings, chain_seeds, compare_models, run_chains, tree_select
from app.services.evidence import EstimatorConfig, ReplicateInput, estimator_summary
from app.services.phylotree import emit_newick, enumerate_topologies, simulate_alignment
from app.services.seqio import read_alignment, read_newick, read_newick_many, write_fasta
from app.services.substmodel import SubstitutionModel
from app.services.validation import ANALYTIC_TARGETS, run_validation

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_ERROR = 2

METHOD_BY_NAME = {
    "idr": EstimatorMethod.IDR,
    "hm": EstimatorMethod.HM,
    "am": EstimatorMethod.AM_POSTERIOR_SURROGATE,
}


# ── Argument types ────────────────────────────────────────────────────────────

def parse_k_grid(text: str) -> list[float]:
    try:
        return evidence.parse_k_grid(text)
    except InvalidInputError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def parse_estimators(text: str) -> list[str]:
    names = [v.strip().lower() for v in text.split(",") if v.strip()]
    unknown = set(names) - set(METHOD_BY_NAME)
    if unknown or not names:
        raise argparse.ArgumentTypeError(f"estimators must be among {', '.join(METHOD_BY_NAME)}")
    return names


# ── Parser ────────────────────────────────────────────────────────────────────

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="master seed (default: $EVIDENCED_SEED, else 0)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--jobs", type=int, default=settings.DEFAULT_JOBS, help="parallel workers")
    p.add_argument("--log-level", default=None, help="logging level (default: $LOG_LEVEL)")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", type=ModelKind, choices=list(ModelKind), default=ModelKind.JC69)
    p.add_argument("--categories", type=int, default=settings.GAMMA_CATEGORIES, help="gamma rate categories")
    p.add_argument("--branch-rate", type=float, default=settings.BRANCH_LENGTH_RATE, help="exponential prior rate on branch lengths")
    p.add_argument("--alpha-rate", type=float, default=settings.ALPHA_RATE, help="exponential prior rate on gamma shape")


def _add_sampler(p: argparse.ArgumentParser) -> None:
    p.add_argument("--draws", type=int, default=settings.DEFAULT_DRAWS, help="stored draws per chain")
    p.add_argument("--burn-in", type=int, default=settings.DEFAULT_BURN_IN, help="adaptation iterations")
    p.add_argument("--thin", type=int, default=settings.DEFAULT_THIN)
    p.add_argument("--replicates", type=int, default=settings.DEFAULT_REPLICATES, help="independent chains R")


def _add_estimators(p: argparse.ArgumentParser, default_grid: str) -> None:
    p.add_argument("--estimators", type=parse_estimators, default=["idr", "hm", "am"], help="comma-separated: idr,hm,am")
    p.add_argument("--k-grid", type=parse_k_grid, default=parse_k_grid(default_grid), help='e.g. "1e-10:1e-2:log" or "auto"')
    p.add_argument("--bootstrap", type=int, default=settings.DEFAULT_BOOTSTRAP, help="bootstrap replicates B (0 = off)")
    p.add_argument("--literal-hm", action="store_true", help="HM error without the 1/n factor")
    p.add_argument("--absolute-k", action="store_true", help="k as an absolute mass instead of relative to the center height")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evidenced",
        description="Marginal likelihoods and Bayes factors for phylogenetic models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate an alignment along a tree")
    p.add_argument("--tree", type=Path, required=True)
    p.add_argument("--sites", type=int, default=200)
    p.add_argument("--pi", type=parse_floats, default=None, help="A,C,G,T frequencies")
    p.add_argument("--rho", type=parse_floats, default=None, help="AC,AG,AT,CG,CT,GT exchangeabilities")
    p.add_argument("--alpha", type=float, default=None, help="gamma shape (gtr-gamma)")
    _add_model(p)
    _add_common(p)

    p = sub.add_parser("sample", help="sample the posterior of a fixed-topology model")
    p.add_argument("--alignment", type=Path, required=True)
    p.add_argument("--tree", type=Path, required=True)
    _add_model(p)
    _add_sampler(p)
    _add_common(p)

    p = sub.add_parser("evidence", help="estimate the marginal likelihood from chain CSV files")
    p.add_argument("--chain", type=Path, nargs="+", required=True, help="first chain is primary, others are replicates")
    p.add_argument("--alignment", type=Path, default=None, help="alignment the chain was sampled on (needed for IDR)")
    p.add_argument("--target", choices=sorted(ANALYTIC_TARGETS), default=None, help="analytic target for non-phylogenetic chains")
    _add_estimators(p, settings.DEFAULT_K_GRID)
    _add_common(p)

    p = sub.add_parser("compare", help="Bayes factor between two substitution models")
    p.add_argument("--alignment", type=Path, required=True)
    p.add_argument("--tree", type=Path, required=True)
    p.add_argument("--models", type=ModelKind, nargs=2, default=[ModelKind.JC69, ModelKind.GTR_GAMMA], help="M1 M0")
    _add_model(p)
    _add_sampler(p)
    _add_estimators(p, settings.DEFAULT_K_GRID)
    _add_common(p)

    p = sub.add_parser("trees", help="evidence and posterior probabilities of candidate topologies")
    p.add_argument("--alignment", type=Path, required=True)
    p.add_argument("--trees", type=Path, default=None, help="Newick file with candidates (default: all 4-taxon topologies)")
    _add_model(p)
    _add_sampler(p)
    _add_estimators(p, settings.DEFAULT_K_GRID)
    _add_common(p)

    p = sub.add_parser("validate", help="IDR on synthetic targets with known constants")
    p.add_argument("--draws", type=int, default=settings.VALIDATE_DRAWS)
    p.add_argument("--k-grid", type=parse_k_grid, default=[], help='"auto" or an explicit grid')
    _add_common(p)

    p = sub.add_parser("replay", help="rerun a command from its manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--log-level", default=None)
    return parser


# ── Run bookkeeping ───────────────────────────────────────────────────────────

class _Run:
    """Collects the manifest while a command runs and writes outputs under ``out``."""

    def __init__(self, command: str, argv: Sequence[str], master_seed: int, out: Path):
        self.out = out
        self.master_seed = master_seed
        self.manifest = RunManifest(
            command=command,
            argv=list(argv),
            seed=master_seed,
            versions=chain_io.package_versions(),
        )
        out.mkdir(parents=True, exist_ok=True)

    def record_input(self, path: Path) -> None:
        self.manifest.inputs[str(path)] = chain_io.file_sha256(path)

    def derive(self, label: str) -> int:
        seed = chain_io.derive_seed(self.master_seed, label)
        self.manifest.derived_seeds[label] = seed
        return seed

    def output(self, name: str) -> Path:
        path = self.out / name
        self.manifest.outputs.append(str(path))
        return path

    def write_json(self, name: str, payload: BaseModel | list[BaseModel] | dict) -> Path:
        path = self.output(name)
        if isinstance(payload, BaseModel):
            text = payload.model_dump_json(indent=2)
        elif isinstance(payload, list):
            text = json.dumps([p.model_dump(mode="json") for p in payload], indent=2)
        else:
            text = json.dumps(
                {k: v.model_dump(mode="json") for k, v in payload.items()}, indent=2
            )
        path.write_text(text + "\n", encoding="utf-8")
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.output(name)
        path.write_text(text + "\n", encoding="utf-8")
        return path

    def finish(self) -> None:
        chain_io.write_manifest(self.manifest, chain_io.manifest_path(self.out, self.manifest.command))


def _master_seed(args: argparse.Namespace) -> int:
    if args.seed is not None:
        return args.seed
    if settings.EVIDENCED_SEED is not None:
        return settings.EVIDENCED_SEED
    logger.info("no --seed or EVIDENCED_SEED given; using master seed 0")
    return 0


def _config(args: argparse.Namespace, seed: int) -> RunConfig:
    trees = [p for p in [getattr(args, "tree", None), getattr(args, "trees", None)] if p]
    return RunConfig(
        subcommand=args.command,
        alignment=getattr(args, "alignment", None),
        trees=trees,
        chains=getattr(args, "chain", None) or [],
        out=args.out,
        model=getattr(args, "model", ModelKind.JC69),
        models=getattr(args, "models", None) or [],
        priors=_priors(args),
        n_categories=getattr(args, "categories", settings.GAMMA_CATEGORIES),
        estimators=getattr(args, "estimators", ["idr", "hm", "am"]),
        k_grid=getattr(args, "k_grid", []) or [],
        draws=getattr(args, "draws", settings.DEFAULT_DRAWS),
        burn_in=getattr(args, "burn_in", settings.DEFAULT_BURN_IN),
        thin=getattr(args, "thin", settings.DEFAULT_THIN),
        seed=seed,
        replicates=getattr(args, "replicates", 1),
        bootstrap=getattr(args, "bootstrap", 0),
        jobs=args.jobs,
        sites=getattr(args, "sites", 200),
        literal_hm=getattr(args, "literal_hm", False),
    )


def _priors(args: argparse.Namespace) -> PriorSpec:
    return PriorSpec(
        branch_length_rate=getattr(args, "branch_rate", settings.BRANCH_LENGTH_RATE),
        alpha_rate=getattr(args, "alpha_rate", settings.ALPHA_RATE),
    )


def _estimator_config(config: RunConfig, args: argparse.Namespace, seed: int) -> EstimatorConfig:
    return EstimatorConfig(
        methods=tuple(config.estimators),
        k_grid=tuple(config.k_grid) or None,
        bootstrap=config.bootstrap,
        seed=seed,
        jobs=config.jobs,
        relative_k=not args.absolute_k,
        literal_hm=config.literal_hm,
    )


def _fit_settings(config: RunConfig, estimator: EstimatorConfig) -> FitSettings:
    return FitSettings(
        priors=config.priors,
        n_categories=config.n_categories,
        draws=config.draws,
        burn_in=config.burn_in,
        thin=config.thin,
        replicates=config.replicates,
        jobs=config.jobs,
        estimator=estimator,
    )


def _sim_model(args: argparse.Namespace) -> SubstitutionModel:
    if args.model is ModelKind.JC69:
        return SubstitutionModel.jc69()
    pi = args.pi or [0.25] * 4
    rho = args.rho or [1.0 / 6.0] * 6
    if args.model is ModelKind.GTR:
        return SubstitutionModel.gtr(pi, rho)
    return SubstitutionModel.gtr(pi, rho, alpha=args.alpha or 1.0, n_categories=args.categories)


# ── Commands ──────────────────────────────────────────────────────────────────

def cmd_simulate(args: argparse.Namespace, config: RunConfig, run: _Run) -> int:
    topology, lengths = read_newick(args.tree)
    run.record_input(args.tree)
    alignment = simulate_alignment(topology, lengths, _sim_model(args), config.sites, run.derive("simulate"))
    write_fasta(alignment, run.output("alignment.fasta"))
    print(f"simulated {alignment.n_taxa} taxa x {alignment.n_sites} sites")
    return EXIT_OK


def cmd_sample(args: argparse.Namespace, config: RunConfig, run: _Run) -> int:
    alignment = read_alignment(config.alignment)
    topology, lengths = read_newick(args.tree)
    run.record_input(config.alignment)
    run.record_input(args.tree)
    settings_ = _fit_settings(config, EstimatorConfig())
    seeds = chain_seeds(run.master_seed, config.model.value, config.replicates)
    for r, seed in enumerate(seeds):
        run.manifest.derived_seeds[f"{config.model.value}:chain{r}"] = seed
    chains = run_chains(alignment, topology, config.model, settings_, seeds)
    newick = emit_newick(topology, lengths)
    for r, chain in enumerate(chains):
        name = "chain.csv" if r == 0 else f"chain.{r}.csv"
        chain_io.write_chain(chain, run.output(name), tree_newick=newick, data_fingerprint=alignment.fingerprint())
        run.manifest.outputs.append(str(chain_io.sidecar_path(run.out / name)))
        print(f"{name}: {chain.T} draws, acceptance {chain.acceptance_rate:.3f}")
    run.manifest.packing_order = chains[0].columns
    return EXIT_OK


def cmd_evidence(args: argparse.Namespace, config: RunConfig, run: _Run) -> int:
    tables = []
    for path in config.chains:
        run.record_input(path)
        tables.append(chain_io.read_chain(path))
    alignment = None
    if config.alignment is not None:
        run.record_input(config.alignment)
        alignment = read_alignment(config.alignment)
    primary, *others = tables
    if any(t.columns != primary.columns for t in others):
        raise InvalidInputError("replicate chains must have the same columns as the primary chain")
    log_g, fingerprint = chain_io.resolve_target(primary, alignment, args.target)

    report = estimator_summary(
        chain_io.table_sample(primary),
        log_g=log_g,
        log_lik=primary.log_lik,
        config=_estimator_config(config, args, run.derive("bootstrap")),
        replicates=[ReplicateInput(chain_io.table_sample(t), t.log_lik) for t in others],
        columns=primary.columns,
        data_fingerprint=fingerprint,
    )
    run.manifest.packing_order = primary.columns
    run.write_json("evidence.json", report)
    sections = []
    if report.k_grid is not None:
        sections.append(reporting.k_grid_table(report.k_grid))
    sections.append(reporting.summary_table(report))
    text = "\n\n".join(sections)
    run.write_text("evidence.txt", text)
    print(text)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace, config: RunConfig, run: _Run) -> int:
    alignment = read_alignment(config.alignment)
    topology, _ = read_newick(args.tree)
    run.record_input(config.alignment)
    run.record_input(args.tree)
    kind1, kind0 = config.models
    estimator = _estimator_config(config, args, run.derive("bootstrap"))
    comparison = compare_models(alignment, topology, kind1, kind0, _fit_settings(config, estimator), run.derive("chains"))
    reports = {method.value: report for method, report in comparison.reports.items()}
    run.write_json("compare.json", reports)
    text = "\n\n".join(reporting.bayes_factor_table(r) for r in comparison.reports.values())
    run.write_text("compare.txt", text)
    print(text)
    return EXIT_OK


def cmd_trees(args: argparse.Namespace, config: RunConfig, run: _Run) -> int:
    alignment = read_alignment(config.alignment)
    run.record_input(config.alignment)
    if args.trees is not None:
        run.record_input(args.trees)
        parsed = read_newick_many(args.trees)
        topologies = [t for t, _ in parsed]
        lengths = [l for _, l in parsed]
    else:
        topologies = enumerate_topologies(alignment.names)
        lengths = None
    estimator = _estimator_config(config, args, run.derive("bootstrap"))
    method = METHOD_BY_NAME[config.estimators[0]]
    report = tree_select(
        alignment, topologies, config.model, _fit_settings(config, estimator), run.derive("chains"),
        method=method, initial_lengths=lengths,
    )
    run.write_json("trees.json", report)
    text = reporting.topology_table(report)
    run.write_text("trees.txt", text)
    print(text)
    return EXIT_OK if report.complete else EXIT_ERROR


def cmd_validate(args: argparse.Namespace, config: RunConfig, run: _Run) -> int:
    report = run_validation(args.draws, run.master_seed, k_grid=config.k_grid or None, jobs=config.jobs)
    run.write_json("validation.json", report)
    text = reporting.validation_table(report)
    run.write_text("validation.txt", text)
    print(text)
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_replay(args: argparse.Namespace) -> int:
    manifest = chain_io.read_manifest(args.manifest)
    for path, digest in manifest.inputs.items():
        if not Path(path).exists() or chain_io.file_sha256(path) != digest:
            raise DataMismatchError(f"input {path} is missing or differs from the recorded version")
    logger.info("replaying %s %s", manifest.command, " ".join(manifest.argv))
    return main(manifest.argv)


COMMANDS = {
    "simulate": cmd_simulate,
    "sample": cmd_sample,
    "evidence": cmd_evidence,
    "compare": cmd_compare,
    "trees": cmd_trees,
    "validate": cmd_validate,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        if args.command == "replay":
            return cmd_replay(args)
        seed = _master_seed(args)
        config = _config(args, seed)
        run = _Run(args.command, argv, seed, config.out)
        status = COMMANDS[args.command](args, config, run)
        run.finish()
        return status
    except ValidationError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except EvidenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
