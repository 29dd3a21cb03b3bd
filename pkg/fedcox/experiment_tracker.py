import json
import logging
from pathlib import Path
from typing import Any, Optional

import pandas as pd

from fedcox.errors import InvalidArgumentError
from fedcox.settings import experiments_dir as default_experiments_dir

logger = logging.getLogger(__name__)


def _summary(report: dict[str, Any]) -> dict[str, Any]:
    return {
        "id": report["id"],
        "name": report["name"],
        "study": report.get("study", ""),
        "created_at": report["created_at"],
        "replications": len(report.get("records", [])),
        "failures": len(report.get("failures", [])),
        "lambda_rule": report.get("lambda_rule", ""),
        "metrics": report.get("aggregates", {}),
    }


class ExperimentTracker:
    """Stores experiment reports: aggregates as JSON, records as CSV, figure data as TSV."""

    def __init__(self, experiments_dir: Optional[str] = None):
        self.experiments_dir = Path(experiments_dir or default_experiments_dir())
        self.experiments_dir.mkdir(exist_ok=True, parents=True)

    def _path(self, experiment_id: str, suffix: str) -> Path:
        return self.experiments_dir / f"{experiment_id}{suffix}"

    def save_experiment(self, report: dict[str, Any]) -> str:
        experiment_id = report["id"]
        self._path(experiment_id, ".json").write_text(json.dumps(report, indent=2, default=str))
        logger.info(f"💾 Saved experiment: {experiment_id}")
        return experiment_id

    def save_records(self, experiment_id: str, records: pd.DataFrame) -> Path:
        path = self._path(experiment_id, ".csv")
        records.to_csv(path, index=False)
        return path

    def save_figure_data(self, experiment_id: str, family: str, frame: pd.DataFrame) -> Path:
        """Whitespace-separated table with a commented header, readable by gnuplot."""
        path = self._path(experiment_id, f"_{family}.tsv")
        with open(path, "w") as f:
            f.write("# " + "\t".join(frame.columns) + "\n")
            frame.to_csv(f, sep="\t", index=False, header=False)
        return path

    def list_experiments(self) -> list[dict[str, Any]]:
        summaries = [
            _summary(json.loads(path.read_text()))
            for path in self.experiments_dir.glob("*.json")
        ]
        return sorted(summaries, key=lambda s: s["created_at"], reverse=True)

    def get_experiment(self, experiment_id: str) -> dict[str, Any]:
        path = self._path(experiment_id, ".json")
        if not path.exists():
            raise InvalidArgumentError(f"Experiment {experiment_id} not found in {self.experiments_dir}")
        return json.loads(path.read_text())

    def compare_experiments(self, experiment_names_or_ids: list[str]) -> dict[str, Any]:
        """Line up the aggregates of the named experiments, metric by metric."""
        saved = self.list_experiments()
        chosen = []
        for wanted in experiment_names_or_ids:
            match = next((s for s in saved if wanted in (s["id"], s["name"])), None)
            if match is None:
                logger.warning(f"No experiment found matching: {wanted}")
            else:
                chosen.append(match)

        metrics = sorted({key for s in chosen for key in s["metrics"]})
        return {
            "experiments": chosen,
            "metrics_comparison": {
                metric: [{"experiment": s["name"], "value": s["metrics"].get(metric)} for s in chosen]
                for metric in metrics
            },
        }
