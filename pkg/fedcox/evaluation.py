import hashlib
import json
import logging
import time
import uuid
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from fedcox.data.loader import drop_remainder, load_dlbcl_dataset
from fedcox.data.simulate import SimConfig, generate_dataset, replication_rng
from fedcox.experiment_tracker import ExperimentTracker
from fedcox.federation.gel import baseline_estimators, gel_iterate
from fedcox.federation.services.CoordinatorService import FederatedCohort, partition
from fedcox.inference import (
    InferenceReport,
    LinearFunctionalTarget,
    average_debiased_inference,
    infer_linear_functional,
    test_coordinate,
)
from fedcox.lasso import LambdaSchedule, fit_l1_cox, theory_lambda
from fedcox.survival import SurvivalDataset, screen_top
from fedcox.utils.evaluation import (
    _print_results,
    anderson_normal,
    c_index_ipw,
    estimation_error,
    ks_uniform,
    median_with_se,
    proportion_with_se,
)

logger = logging.getLogger(__name__)

Study = Literal["estimation", "test_size", "test_power", "ci_coverage", "cindex"]
STUDIES = ("estimation", "test_size", "test_power", "ci_coverage", "cindex")
PROCEDURES = ("iterated", "full", "one_center", "average_debiased")


class ExperimentReport(BaseModel):
    id: str
    name: str
    study: str
    created_at: str
    config: dict
    records: list[dict] = Field(default_factory=list)
    failures: list[dict] = Field(default_factory=list)
    exclusions: dict[str, int] = Field(default_factory=dict)
    aggregates: dict = Field(default_factory=dict)
    lambda_rule: str = ""
    elapsed_time_seconds: float = 0.0

    def fingerprint(self) -> str:
        """Hash of everything that must be reproducible: config, records, aggregates."""
        payload = json.dumps(
            {"config": self.config, "records": self.records, "aggregates": self.aggregates},
            sort_keys=True,
            default=str,
        )
        return hashlib.sha256(payload.encode()).hexdigest()

    def records_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records)


def _derived_seed(cfg: SimConfig, rep: int, stream: int) -> int:
    return int(replication_rng(cfg.seed + stream, rep).integers(2**31))


class ExperimentEvaluator:
    """Runs one replication of a study and returns its record."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.beta_star = cfg.beta_vector()

    def _schedule(self, data: SurvivalDataset, n_total: int) -> LambdaSchedule:
        return LambdaSchedule.theory(
            data, n_total, c0=self.cfg.c0_lambda, kind=self.cfg.schedule, rho=self.cfg.rho
        )

    def _full_lambda(self, data: SurvivalDataset) -> float:
        bound = float(np.abs(data.covariates).max())
        return theory_lambda(self.cfg.c0_lambda, bound, data.p, data.n)

    def _cohort(self, data: SurvivalDataset, rep: int) -> FederatedCohort:
        return partition(
            data,
            self.cfg.K,
            seed=_derived_seed(self.cfg, rep, 1),
            transport=self.cfg.transport,
            centering=self.cfg.centering,
        )

    def _single(self, data: SurvivalDataset) -> FederatedCohort:
        return FederatedCohort([data], transport="inproc")

    def _single_trace(self, cohort: FederatedCohort):
        lam = self._full_lambda(cohort.principal_data)
        return gel_iterate(cohort, 1, LambdaSchedule(base=lam, rule=f"theory_scale(c0={self.cfg.c0_lambda})"))

    def _fit(self, cohort: FederatedCohort, rounds: int):
        trace = gel_iterate(cohort, rounds, self._schedule(cohort.principal_data, cohort.n))
        if trace.error is not None:
            raise trace.error
        return trace

    def estimation(self, rep: int) -> dict:
        data = generate_dataset(self.cfg, rep)
        record = {"replication": rep}
        with self._cohort(data, rep) as cohort:
            trace = self._fit(cohort, self.cfg.rounds)
            for t, beta in enumerate(trace.iterates):
                record[f"err_t{t}"] = estimation_error(beta, self.beta_star)
            record["comm_floats"] = cohort.ledger.total_floats

            lam_local = self._full_lambda(cohort.principal_data)
            for which in ("one_center", "average", "average_debiased"):
                beta = baseline_estimators(cohort, which, lam=lam_local)
                record[f"err_{which}"] = estimation_error(beta, self.beta_star)

        full, _ = fit_l1_cox(data, self._full_lambda(data))
        record["err_full"] = estimation_error(full, self.beta_star)
        return record

    def _inference_reports(self, data: SurvivalDataset, rep: int, kind: str) -> dict[str, InferenceReport]:
        coord = self.cfg.test_coord
        alpha = self.cfg.alpha

        def run(cohort, trace):
            if kind == "test":
                return test_coordinate(cohort, trace, coord, alpha, c0=self.cfg.c0_w)
            c = LinearFunctionalTarget.unit(coord, cohort.p, alpha).c
            return infer_linear_functional(cohort, trace, c, alpha, c0=self.cfg.c0_omega)

        reports = {}
        with self._cohort(data, rep) as cohort:
            reports["iterated"] = run(cohort, self._fit(cohort, self.cfg.rounds))
            lam_local = self._full_lambda(cohort.principal_data)
            reports["average_debiased"] = average_debiased_inference(
                cohort, coord, alpha, lam=lam_local
            )
            principal = cohort.principal_data
        with self._single(principal) as single:
            reports["one_center"] = run(single, self._single_trace(single))
        with self._single(data) as pooled:
            reports["full"] = run(pooled, self._single_trace(pooled))
        return reports

    def test(self, rep: int) -> dict:
        reports = self._inference_reports(generate_dataset(self.cfg, rep), rep, "test")
        record = {"replication": rep}
        for name, report in reports.items():
            record[f"p_{name}"] = report.p_value
            record[f"z_{name}"] = report.statistic
            record[f"reject_{name}"] = report.reject
        return record

    def ci_coverage(self, rep: int) -> dict:
        truth = self.beta_star[self.cfg.test_coord]
        reports = self._inference_reports(generate_dataset(self.cfg, rep), rep, "ci")
        record = {"replication": rep}
        for name, report in reports.items():
            record[f"estimate_{name}"] = report.estimate
            record[f"covered_{name}"] = bool(report.ci_low <= truth <= report.ci_high)
            record[f"width_{name}"] = report.ci_high - report.ci_low
            se = np.sqrt(report.variance / report.n)
            record[f"standardized_{name}"] = (report.estimate - truth) / se if se > 0 else float("nan")
        return record

    def _cindex_data(self, rep: int) -> SurvivalDataset:
        if self.cfg.cindex_data:
            return load_dlbcl_dataset(self.cfg.cindex_data)
        return generate_dataset(self.cfg, rep)

    def cindex(self, rep: int) -> dict:
        data = self._cindex_data(rep)
        order = replication_rng(self.cfg.seed + 2, rep).permutation(data.n)
        n_train = int(self.cfg.train_fraction * data.n)
        train = drop_remainder(data.subset(np.sort(order[:n_train])), self.cfg.K, seed=rep)
        test = data.subset(np.sort(order[n_train:]))

        columns = screen_top(train, self.cfg.screen_top)
        train, test = train.select_features(columns), test.select_features(columns)

        betas = {}
        with self._cohort(train, rep) as cohort:
            betas["iterated"] = self._fit(cohort, self.cfg.rounds).beta_hat
            lam_local = self._full_lambda(cohort.principal_data)
            betas["one_center"] = baseline_estimators(cohort, "one_center", lam=lam_local)
            betas["average_debiased"] = baseline_estimators(cohort, "average_debiased", lam=lam_local)
        betas["full"], _ = fit_l1_cox(train, self._full_lambda(train))

        record = {"replication": rep}
        for name, beta in betas.items():
            record[f"cindex_{name}"] = c_index_ipw(train, test, beta)
        return record


def run_replication(cfg: SimConfig, study: Study, rep: int) -> dict:
    """One replication; failures come back as a record with an `error` key."""
    evaluator = ExperimentEvaluator(cfg)
    handler = {
        "estimation": evaluator.estimation,
        "test_size": evaluator.test,
        "test_power": evaluator.test,
        "ci_coverage": evaluator.ci_coverage,
        "cindex": evaluator.cindex,
    }[study]
    try:
        return handler(rep)
    except Exception as e:
        logger.error(f"Error in replication {rep}: {e}")
        return {"replication": rep, "error": str(e), "error_type": type(e).__name__}


def _aggregate(cfg: SimConfig, study: str, frame: pd.DataFrame) -> dict:
    aggregates = {"replications_used": int(len(frame))}
    if frame.empty:
        return aggregates

    def med(column):
        value, se = median_with_se(frame[column], cfg.bootstrap, cfg.seed)
        return {"value": value, "se": se}

    def rate(column):
        value, se = proportion_with_se(frame[column].astype(float))
        return {"value": value, "se": se}

    if study == "estimation":
        for column in frame.columns:
            if column.startswith("err_"):
                aggregates[f"median_{column}"] = med(column)
    elif study in ("test_size", "test_power"):
        for name in PROCEDURES:
            aggregates[f"rejection_{name}"] = rate(f"reject_{name}")
        statistic, p_value = ks_uniform(frame["p_iterated"])
        aggregates["ks_statistic_iterated"] = statistic
        aggregates["ks_pvalue_iterated"] = p_value
    elif study == "ci_coverage":
        for name in PROCEDURES:
            aggregates[f"coverage_{name}"] = rate(f"covered_{name}")
            aggregates[f"median_width_{name}"] = med(f"width_{name}")
        standardized = frame["standardized_iterated"].dropna()
        if len(standardized) >= 5:
            statistic, normal = anderson_normal(standardized)
            aggregates["anderson_statistic_iterated"] = statistic
            aggregates["anderson_normal_at_1pct"] = normal
    elif study == "cindex":
        for name in PROCEDURES:
            aggregates[f"median_cindex_{name}"] = med(f"cindex_{name}")
    return aggregates


def _figure_data(study: str, frame: pd.DataFrame, aggregates: dict) -> Optional[pd.DataFrame]:
    if frame.empty:
        return None
    if study == "estimation":
        rounds = sorted(
            int(c[len("median_err_t"):]) for c in aggregates if c.startswith("median_err_t")
        )
        return pd.DataFrame(
            {
                "t": rounds,
                "median_error": [aggregates[f"median_err_t{t}"]["value"] for t in rounds],
                "se": [aggregates[f"median_err_t{t}"]["se"] for t in rounds],
            }
        )
    if study in ("test_size", "test_power"):
        observed = np.sort(frame["p_iterated"].to_numpy())
        expected = (np.arange(1, observed.size + 1) - 0.5) / observed.size
        return pd.DataFrame({"expected": expected, "observed": observed})
    if study == "ci_coverage":
        return frame[["replication"] + [f"width_{name}" for name in PROCEDURES]]
    return None


def run_experiment(
    cfg: SimConfig,
    study: Study,
    threads: int = 1,
    tracker: Optional[ExperimentTracker] = None,
    name: Optional[str] = None,
    save: bool = True,
    print_results: bool = True,
) -> ExperimentReport:
    if study not in STUDIES:
        raise ValueError(f"unknown study: {study}")
    if study == "test_size" and cfg.nu_star != 0.0:
        cfg = cfg.model_copy(update={"nu_star": 0.0})
    if study == "test_power" and cfg.beta_vector()[cfg.test_coord] == 0.0:
        logger.warning(f"test_power with beta_{cfg.test_coord} = 0 measures size, not power")

    name = name or f"{study}_n{cfg.n}_p{cfg.p}_K{cfg.K}"
    experiment_id = f"{name}_{datetime.now().strftime('%Y%m%d_%H%M%S')}_{str(uuid.uuid4())[:8]}"
    logger.info(f"🔬 Starting experiment: {name} ({cfg.replications} replications)")

    start_time = time.time()
    reps = range(cfg.replications)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_replication, [cfg] * len(reps), [study] * len(reps), reps))
    else:
        results = []
        for rep in reps:
            results.append(run_replication(cfg, study, rep))
            if (rep + 1) % 10 == 0:
                logger.info(f"Processed {rep + 1}/{cfg.replications} replications...")
    elapsed_time = time.time() - start_time

    records = [r for r in results if "error" not in r]
    failures = [r for r in results if "error" in r]
    exclusions = dict(sorted(Counter(f["error_type"] for f in failures).items()))
    frame = pd.DataFrame(records)
    aggregates = _aggregate(cfg, study, frame)

    report = ExperimentReport(
        id=experiment_id,
        name=name,
        study=study,
        created_at=datetime.now().isoformat(),
        config=cfg.model_dump(),
        records=records,
        failures=failures,
        exclusions=exclusions,
        aggregates=aggregates,
        lambda_rule=f"theory_scale(c0_lambda={cfg.c0_lambda}, c0_omega={cfg.c0_omega}, c0_w={cfg.c0_w}), {cfg.schedule}",
        elapsed_time_seconds=elapsed_time,
    )

    if save:
        tracker = tracker or ExperimentTracker()
        tracker.save_experiment(report.model_dump())
        if records:
            tracker.save_records(experiment_id, frame)
        figure = _figure_data(study, frame, aggregates)
        if figure is not None:
            tracker.save_figure_data(experiment_id, study, figure)

    if print_results:
        _print_results(aggregates, exclusions, name)
    return report


def _replications(default: int, scale: float, replications: Optional[int]) -> int:
    return replications if replications else max(1, int(round(default * scale)))


MAIN_DESIGN = dict(n=1000, p=50, beta_star=[0.0, 2.0, 2.0, 2.0], censor_scale=3 / 7)
APPENDIX_DESIGN = dict(n=240, p=300, K=2, beta_star=[0.0, 2.0, 2.0, 2.0], censor_scale=1.0)
CENTER_COUNTS = (2, 4, 8)


def _estimation_rows(report: ExperimentReport, **labels) -> list[dict]:
    rows = []
    for key, value in report.aggregates.items():
        if key.startswith("median_err_"):
            rows.append({**labels, "estimator": key[len("median_err_"):], "median_error": value["value"], "se": value["se"]})
    return rows


def _rate_rows(report: ExperimentReport, prefix: str, column: str, **labels) -> list[dict]:
    return [
        {**labels, "procedure": name, column: report.aggregates[f"{prefix}_{name}"]["value"],
         "se": report.aggregates[f"{prefix}_{name}"]["se"]}
        for name in PROCEDURES
        if f"{prefix}_{name}" in report.aggregates
    ]


def reproduce(
    study: Literal["fig1", "fig2", "fig3", "fig4", "table1", "appendix"],
    out_dir: str,
    scale: float = 1.0,
    replications: Optional[int] = None,
    threads: int = 1,
    seed: int = 0,
    transport: str = "inproc",
    cindex_data: Optional[str] = None,
    base: Optional[dict] = None,
) -> list[Path]:
    """Run the simulation studies behind one figure or table and write its CSV tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables: dict[str, list[dict]] = {}
    common = dict(base or {})
    common.update(seed=seed, transport=transport)

    def main_cfg(K, **extra):
        values = {**MAIN_DESIGN, **common, "K": K, **extra}
        values["replications"] = _replications(400, scale, replications)
        return SimConfig(**values)

    def run(cfg, name, kind):
        return run_experiment(cfg, kind, threads=threads, name=name, print_results=False)

    if study == "fig1":
        for K in CENTER_COUNTS:
            report = run(main_cfg(K), f"fig1_K{K}", "estimation")
            tables.setdefault("estimation_error", []).extend(_estimation_rows(report, K=K))
    elif study in ("fig2", "fig3"):
        for K in CENTER_COUNTS:
            report = run(main_cfg(K), f"{study}_size_K{K}", "test_size")
            ks_pvalue = report.aggregates.get("ks_pvalue_iterated")
            tables.setdefault("test_size", []).extend(
                _rate_rows(report, "rejection", "rate", K=K, ks_pvalue_iterated=ks_pvalue)
            )
            if study == "fig3":
                report = run(main_cfg(K, nu_star=0.15), f"fig3_power_K{K}", "test_power")
                tables.setdefault("test_power", []).extend(_rate_rows(report, "rejection", "rate", K=K))
    elif study == "fig4":
        for K in CENTER_COUNTS:
            report = run(main_cfg(K), f"fig4_K{K}", "ci_coverage")
            tables.setdefault("ci_coverage", []).extend(_rate_rows(report, "coverage", "coverage", K=K))
            tables.setdefault("ci_width", []).extend(_rate_rows(report, "median_width", "median_width", K=K))
    elif study == "table1":
        values = {**MAIN_DESIGN, **common, "K": 2, "cindex_data": cindex_data}
        values["replications"] = 1 if cindex_data else _replications(100, scale, replications)
        report = run(SimConfig(**values), "table1", "cindex")
        tables["cindex"] = _rate_rows(report, "median_cindex", "cindex")
    elif study == "appendix":
        reps = _replications(200, scale, replications)
        cfg = SimConfig(**{**APPENDIX_DESIGN, **common, "replications": reps})
        tables["estimation_error"] = _estimation_rows(run(cfg, "appendix_estimation", "estimation"), K=cfg.K)
        tables["test_size"] = _rate_rows(run(cfg, "appendix_size", "test_size"), "rejection", "rate", K=cfg.K)
        power_cfg = cfg.model_copy(update={"nu_star": 0.5})
        tables["test_power"] = _rate_rows(run(power_cfg, "appendix_power", "test_power"), "rejection", "rate", K=cfg.K)
        ci = run(cfg, "appendix_ci", "ci_coverage")
        tables["ci_coverage"] = _rate_rows(ci, "coverage", "coverage", K=cfg.K)
        tables["ci_width"] = _rate_rows(ci, "median_width", "median_width", K=cfg.K)
    else:
        raise ValueError(f"unknown reproduction target: {study}")

    paths = []
    for table, rows in tables.items():
        path = out / f"{table}.csv"
        pd.DataFrame(rows).to_csv(path, index=False)
        logger.info(f"Wrote {len(rows)} rows to {path}")
        paths.append(path)
    return paths
