import argparse
import hashlib
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from fedcox.data.loader import load_dataset
from fedcox.data.simulate import SimConfig, generate_dataset, write_dataset_csv
from fedcox.errors import EXIT_OK, EXIT_SOLVER, FedCoxError, InvalidArgumentError, exit_code_for
from fedcox.evaluation import reproduce
from fedcox.experiment_tracker import ExperimentTracker
from fedcox.federation.gel import GelTrace, gel_iterate
from fedcox.federation.services.CoordinatorService import FederatedCohort, partition
from fedcox.hazard import breslow, kernel_hazard
from fedcox.inference import infer_linear_functional, test_coordinate
from fedcox.lasso import LambdaSchedule
from fedcox.settings import setup_logging
from fedcox.survival import SurvivalDataset
from fedcox.utils.evaluation import compare_experiments, list_experiments

logger = logging.getLogger(__name__)


class OutputFile(BaseModel):
    path: str
    sha256: str


class RunManifest(BaseModel):
    command: str
    config_path: Optional[str] = None
    seed: int
    content_hash: str
    outputs: list[OutputFile] = Field(default_factory=list)
    wall_time_seconds: float = 0.0
    comm: dict = Field(default_factory=dict)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _content_hash(config_path: Optional[str], data: Optional[SurvivalDataset] = None) -> str:
    digest = hashlib.sha256()
    if config_path:
        digest.update(Path(config_path).read_bytes())
    if data is not None:
        digest.update(data.content_hash().encode())
    return digest.hexdigest()


def _sim_config(args, **extra) -> SimConfig:
    overrides = {"K": args.k, "seed": args.seed, "rounds": args.rounds, "transport": args.transport, **extra}
    if args.config:
        return SimConfig.from_file(args.config, **overrides)
    return SimConfig(**{k: v for k, v in overrides.items() if v is not None})


def _load(args) -> tuple[SimConfig, SurvivalDataset]:
    """Config plus the dataset to analyse; without --data one replication is simulated."""
    if not args.data:
        cfg = _sim_config(args)
        logger.info(f"No --data given, simulating n={cfg.n}, p={cfg.p}")
        return cfg, generate_dataset(cfg, 0)

    data = load_dataset(args.data, args.format, seed=args.seed or 0)
    # the design fields describe the file, not a simulation
    cfg = _sim_config(args, n=data.n, p=data.p, beta_star=[], test_coord=0)
    return cfg, data


def _fit(cfg: SimConfig, data: SurvivalDataset) -> tuple[FederatedCohort, GelTrace]:
    cohort = partition(
        data, cfg.K, seed=cfg.seed, transport=cfg.transport, centering=cfg.centering
    )
    schedule = LambdaSchedule.theory(
        cohort.principal_data, cohort.n, c0=cfg.c0_lambda, kind=cfg.schedule, rho=cfg.rho
    )
    trace = gel_iterate(cohort, cfg.rounds, schedule)
    return cohort, trace


def _parse_loading(text: str, p: int) -> np.ndarray:
    text = text.strip()
    if text.startswith("e"):
        try:
            j = int(text[1:])
        except ValueError:
            raise InvalidArgumentError(f"cannot parse loading vector {text!r}") from None
        if not 1 <= j <= p:
            raise InvalidArgumentError(f"unit loading e{j} outside e1..e{p}")
        c = np.zeros(p)
        c[j - 1] = 1.0
        return c
    try:
        c = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise InvalidArgumentError(f"cannot parse loading vector {text!r}") from None
    if c.shape != (p,):
        raise InvalidArgumentError(f"loading vector has {c.size} entries, expected {p}")
    return c


class Run:
    """Collects outputs of one command and writes its manifest."""

    def __init__(self, args):
        self.args = args
        self.out_dir = Path(args.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.outputs: list[Path] = []
        self.start = time.time()

    def path(self, name: str) -> Path:
        path = self.out_dir / name
        self.outputs.append(path)
        return path

    def finish(self, seed: int, content_hash: str, comm: Optional[dict] = None):
        manifest = RunManifest(
            command=self.args.command,
            config_path=self.args.config,
            seed=seed,
            content_hash=content_hash,
            outputs=[OutputFile(path=str(p), sha256=_sha256(p)) for p in self.outputs],
            wall_time_seconds=time.time() - self.start,
            comm=comm or {},
        )
        path = self.out_dir / "manifest.json"
        path.write_text(manifest.model_dump_json(indent=2))
        logger.info(f"Wrote manifest with {len(self.outputs)} output(s) to {path}")


def cmd_estimate(args) -> int:
    cfg, data = _load(args)
    run = Run(args)
    cohort, trace = _fit(cfg, data)
    with cohort:
        trace.to_frame().to_csv(run.path("beta_trace.csv"), index=False, float_format="%.17g")
        run.finish(cfg.seed, _content_hash(args.config, data), cohort.ledger.snapshot())
    print(f"Wrote {trace.rounds + 1} iterates to {run.out_dir / 'beta_trace.csv'}")
    if trace.error is not None:
        logger.error(f"Estimation stopped early: {trace.error}")
        return EXIT_SOLVER
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg, data = _load(args)
    run = Run(args)
    cohort, trace = _fit(cfg, data)
    with cohort:
        if trace.error is not None:
            raise trace.error
        c = _parse_loading(args.c, cohort.p)
        report = infer_linear_functional(
            cohort, trace, c, args.alpha, c0=cfg.c0_omega, target=args.c
        )
        run.path("inference.json").write_text(report.to_json())
        run.finish(cfg.seed, _content_hash(args.config, data), cohort.ledger.snapshot())
    print(report.to_json())
    return EXIT_OK


def cmd_test(args) -> int:
    cfg, data = _load(args)
    run = Run(args)
    cohort, trace = _fit(cfg, data)
    with cohort:
        if trace.error is not None:
            raise trace.error
        if not 1 <= args.coord <= cohort.p:
            raise InvalidArgumentError(f"--coord must lie in 1..{cohort.p}")
        report = test_coordinate(cohort, trace, args.coord - 1, args.alpha, c0=cfg.c0_w)
        run.path("test.json").write_text(report.to_json())
        run.finish(cfg.seed, _content_hash(args.config, data), cohort.ledger.snapshot())
    decision = "reject H0" if report.reject else "do not reject H0"
    print(f"z = {report.statistic:.4f}, p-value = {report.p_value:.4g}: {decision} at alpha={args.alpha}")
    return EXIT_OK


def cmd_hazard(args) -> int:
    cfg, data = _load(args)
    run = Run(args)
    cohort, trace = _fit(cfg, data)
    with cohort:
        beta = trace.iterates[-1]
        bins = None
        if args.bins:
            bins = np.linspace(0.0, max(d.study_end for d in cohort.datasets), args.bins + 1)[1:]
        step = breslow(cohort, beta, bins=bins)
        step.to_frame().to_csv(run.path("breslow.csv"), index=False, float_format="%.17g")
        curve = kernel_hazard(cohort, beta, h=args.h, kernel=args.kernel)
        curve.to_frame().to_csv(run.path("kernel_hazard.csv"), index=False, float_format="%.17g")
        run.finish(cfg.seed, _content_hash(args.config, data), cohort.ledger.snapshot())
    print(f"Breslow estimate with {step.knots.size} jumps, kernel hazard on {curve.grid.size} points (h={curve.bandwidth:.4f})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _sim_config(args, n=args.n, p=args.p, nu_star=args.nu_star)
    run = Run(args)
    data = generate_dataset(cfg, args.rep)
    write_dataset_csv(data, str(run.path("simulated.csv")))
    run.finish(cfg.seed, _content_hash(args.config, data))
    return EXIT_OK


def cmd_reproduce(args) -> int:
    run = Run(args)
    base = SimConfig.from_file(args.config).model_dump() if args.config else {}
    design = ("n", "p", "K", "beta_star", "censor_scale", "nu_star", "replications", "seed", "transport")
    paths = reproduce(
        args.study,
        args.out_dir,
        scale=args.scale,
        replications=args.replications,
        threads=args.threads,
        seed=args.seed if args.seed is not None else base.get("seed", 0),
        transport=args.transport or base.get("transport", "inproc"),
        cindex_data=args.data,
        base={k: v for k, v in base.items() if k not in design},
    )
    run.outputs.extend(paths)
    run.finish(args.seed or 0, _content_hash(args.config))
    for path in paths:
        print(path)
    return EXIT_OK


def cmd_experiments(args) -> int:
    tracker = ExperimentTracker(args.experiments_dir)
    if args.names:
        if not compare_experiments(args.names, tracker):
            raise InvalidArgumentError(f"no saved experiments match {args.names}")
    else:
        list_experiments(tracker)
    return EXIT_OK


def _shared(parser: argparse.ArgumentParser):
    parser.add_argument("--data", type=str, default=None, help="Dataset file (default: simulate)")
    parser.add_argument("--format", type=str, default="csv", choices=["csv", "dlbcl"])
    parser.add_argument("--config", type=str, default=None, help="TOML or JSON SimConfig")
    parser.add_argument("--k", type=int, default=None, help="Number of centers")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--rounds", type=int, default=None, help="GEL rounds T")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--transport", type=str, default=None, choices=["inproc", "stream", "jsonl"])
    parser.add_argument("--out-dir", type=str, default="fedcox_out")
    parser.add_argument("--log-level", type=str, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedcox",
        description="Distributed sparse Cox estimation and inference across K centers",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    estimate = commands.add_parser("estimate", help="Run the GEL iteration and write the beta trace")
    _shared(estimate)
    estimate.set_defaults(handler=cmd_estimate)

    infer = commands.add_parser("infer", help="Debiased estimate and CI for c'beta")
    _shared(infer)
    infer.add_argument("--c", type=str, default="e1", help="e<j> or comma-separated loading")
    infer.add_argument("--alpha", type=float, default=0.05)
    infer.set_defaults(handler=cmd_infer)

    test = commands.add_parser("test", help="Decorrelated score test of one coordinate")
    _shared(test)
    test.add_argument("--coord", type=int, default=1, help="1-based coordinate to test")
    test.add_argument("--alpha", type=float, default=0.05)
    test.set_defaults(handler=cmd_test)

    hazard = commands.add_parser("hazard", help="Breslow and kernel baseline hazard")
    _shared(hazard)
    hazard.add_argument("--h", type=float, default=None, help="Bandwidth (default tau * n^-1/5)")
    hazard.add_argument("--kernel", type=str, default="epanechnikov", choices=["epanechnikov", "gaussian"])
    hazard.add_argument("--bins", type=int, default=None, help="Ship per-bin sums on this many bins")
    hazard.set_defaults(handler=cmd_hazard)

    simulate = commands.add_parser("simulate", help="Write a simulated dataset as CSV")
    _shared(simulate)
    simulate.add_argument("--n", type=int, default=None)
    simulate.add_argument("--p", type=int, default=None)
    simulate.add_argument("--nu-star", type=float, default=None)
    simulate.add_argument("--rep", type=int, default=0)
    simulate.set_defaults(handler=cmd_simulate)

    reproduce_cmd = commands.add_parser("reproduce", help="Run the simulation studies behind a figure or table")
    _shared(reproduce_cmd)
    reproduce_cmd.add_argument("study", choices=["fig1", "fig2", "fig3", "fig4", "table1", "appendix"])
    reproduce_cmd.add_argument("--scale", type=float, default=1.0, help="Fraction of the default replication count")
    reproduce_cmd.add_argument("--replications", type=int, default=None)
    reproduce_cmd.set_defaults(handler=cmd_reproduce)

    experiments = commands.add_parser("experiments", help="List saved experiments, or compare the named ones")
    experiments.add_argument("names", nargs="*", help="Experiment names or ids to compare")
    experiments.add_argument("--experiments-dir", type=str, default=None)
    experiments.add_argument("--log-level", type=str, default=None)
    experiments.set_defaults(handler=cmd_experiments)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)

    try:
        return args.handler(args)
    except (FedCoxError, FileNotFoundError, ValidationError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
