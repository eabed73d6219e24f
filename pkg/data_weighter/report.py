"""
Run reports and the files they are written to.

An output directory holds:
    metrics.jsonl   one JSON record per epoch, without wall-clock fields
    summary.csv     one row per epoch, wall-clock seconds included
    beta_table.csv  final per-instance weights (a, b for Beta tables)
    final.json      config and end-of-run summary
"""
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

LOGGER = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.csv"
TABLE_FILE = "beta_table.csv"
FINAL_FILE = "final.json"

SUMMARY_COLUMNS = ["epoch", "lr", "batches", "train_loss", "meta_loss", "test_loss", "test_accuracy",
                   "val_accuracy", "active", "pruned", "mean_weight", "wall_seconds"]
TABLE_COLUMNS = ["instance", "domain", "a", "b", "expected_weight", "active"]


@dataclass
class EpochRecord:
    """
    Metrics after one epoch (after that epoch's pruning).

    train_loss is None for an epoch without batches; the accuracies are None
    on epochs without a linear readout.
    """
    epoch: int
    lr: float
    batches: int
    train_loss: Optional[float]
    meta_loss: Optional[float]
    test_loss: float
    test_accuracy: Optional[float]
    active: int
    pruned: int
    mean_weight: float
    domain_weight: Dict[str, Optional[float]] = field(default_factory=dict)
    domain_active: Dict[str, int] = field(default_factory=dict)
    wall_seconds: float = 0.0
    val_accuracy: Optional[float] = None

    def to_dict(self, timing: bool = True) -> Dict[str, Any]:
        out = {
            "epoch": self.epoch,
            "lr": self.lr,
            "batches": self.batches,
            "train_loss": self.train_loss,
            "meta_loss": self.meta_loss,
            "test_loss": self.test_loss,
            "test_accuracy": self.test_accuracy,
            "val_accuracy": self.val_accuracy,
            "active": self.active,
            "pruned": self.pruned,
            "mean_weight": self.mean_weight,
            "domain_weight": dict(self.domain_weight),
            "domain_active": dict(self.domain_active),
        }
        if timing:
            out["wall_seconds"] = self.wall_seconds
        return out

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "EpochRecord":
        return cls(**{k: values[k] for k in cls.__dataclass_fields__ if k in values})


@dataclass
class WeightSnapshot:
    """Final per-instance weight state of the source set."""
    domain_tags: Optional[np.ndarray]
    expected_weight: np.ndarray
    active: np.ndarray
    a: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.expected_weight)


@dataclass
class MetricsReport:
    config: Dict[str, Any]
    records: List[EpochRecord] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)
    weights: Optional[WeightSnapshot] = None

    @property
    def active_counts(self) -> List[int]:
        return [r.active for r in self.records]


def format_time(seconds: float) -> str:
    """Format seconds into a human-readable string."""
    seconds = int(seconds)
    if seconds < 60:
        return f"{seconds}s"
    minutes, seconds = divmod(seconds, 60)
    if minutes < 60:
        return f"{minutes}m {seconds}s"
    hours, minutes = divmod(minutes, 60)
    return f"{hours}h {minutes}m {seconds}s"


def ensure_directory(directory: Path) -> None:
    """Ensure that a directory exists, creating it if necessary."""
    directory.mkdir(parents=True, exist_ok=True)


def _domains(records: List[EpochRecord]) -> List[str]:
    names = set()
    for r in records:
        names.update(r.domain_weight)
        names.update(r.domain_active)
    return sorted(names)


def _cell(value) -> str:
    if value is None:
        return ""
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def export_report(report: MetricsReport, path: Union[str, Path]) -> Path:
    """
    Write the four report files into a directory.

    Args:
        report: Records, summary and final weights of one run.
        path: Output directory, created when missing.

    Returns:
        The output directory.

    Raises:
        ValueError: If a record or the summary holds a NaN or infinite value,
            which strict JSON cannot carry.
    """
    out = Path(path).expanduser()
    ensure_directory(out)

    with open(out / METRICS_FILE, "w", encoding="utf-8") as f:
        for record in report.records:
            f.write(json.dumps(record.to_dict(timing=False), sort_keys=True, allow_nan=False) + "\n")

    domains = _domains(report.records)
    header = SUMMARY_COLUMNS + [f"weight_{d}" for d in domains] + [f"active_{d}" for d in domains]
    with open(out / SUMMARY_FILE, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for record in report.records:
            values = record.to_dict()
            row = [_cell(values[c]) for c in SUMMARY_COLUMNS]
            row += [_cell(record.domain_weight.get(d)) for d in domains]
            row += [_cell(record.domain_active.get(d)) for d in domains]
            writer.writerow(row)

    if report.weights is not None:
        w = report.weights
        with open(out / TABLE_FILE, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(TABLE_COLUMNS)
            for i in range(len(w)):
                writer.writerow([
                    i,
                    "" if w.domain_tags is None else str(w.domain_tags[i]),
                    "" if w.a is None else _cell(w.a[i]),
                    "" if w.b is None else _cell(w.b[i]),
                    _cell(w.expected_weight[i]),
                    int(bool(w.active[i])),
                ])

    with open(out / FINAL_FILE, "w", encoding="utf-8") as f:
        json.dump({"config": report.config, "summary": report.summary}, f, indent=2, sort_keys=True,
                  allow_nan=False)
    LOGGER.info("Report written to %s", out)
    return out


def _float_or_none(text: str) -> Optional[float]:
    return float(text) if text != "" else None


def _read_table(path: Path) -> Optional[WeightSnapshot]:
    if not path.exists():
        return None
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    tags = [r["domain"] for r in rows]
    has_ab = bool(rows) and rows[0]["a"] != ""
    return WeightSnapshot(
        domain_tags=np.asarray(tags, dtype=object) if any(tags) else None,
        expected_weight=np.asarray([float(r["expected_weight"]) for r in rows]),
        active=np.asarray([r["active"] == "1" for r in rows], dtype=bool),
        a=np.asarray([float(r["a"]) for r in rows]) if has_ab else None,
        b=np.asarray([float(r["b"]) for r in rows]) if has_ab else None,
    )


def load_report(path: Union[str, Path]) -> MetricsReport:
    """Read a report directory written by export_report."""
    directory = Path(path).expanduser()
    if not directory.is_dir():
        raise FileNotFoundError(f"The report directory '{directory}' does not exist")

    records = []
    with open(directory / METRICS_FILE, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(EpochRecord.from_dict(json.loads(line)))

    # wall-clock seconds only live in the CSV
    summary_path = directory / SUMMARY_FILE
    if summary_path.exists():
        with open(summary_path, encoding="utf-8", newline="") as f:
            seconds = {int(r["epoch"]): _float_or_none(r["wall_seconds"]) for r in csv.DictReader(f)}
        for record in records:
            if seconds.get(record.epoch) is not None:
                record.wall_seconds = seconds[record.epoch]

    config, summary = {}, {}
    final_path = directory / FINAL_FILE
    if final_path.exists():
        with open(final_path, encoding="utf-8") as f:
            final = json.load(f)
        config, summary = final.get("config", {}), final.get("summary", {})
    return MetricsReport(config, records, summary, _read_table(directory / TABLE_FILE))
