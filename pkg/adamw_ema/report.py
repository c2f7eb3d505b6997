# adamw_ema/report.py
"""
RunRecord and its on-disk forms:

    <out>/runs/<run_id>.json              full record with provenance
    <out>/runs/<run_id>_trace.csv         t, eta, loss per step
    <out>/runs/<run_id>_magnitudes.csv    mean |W| per layer per record interval
    <out>/summary.csv, <out>/summary.json one row per run
    <out>/series.json                    series the `best` column was ranked within
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from adamw_ema import __version__
from adamw_ema.errors import AdamwEmaError, ConfigError
from adamw_ema.utils import ensure_dir

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["eta0", "lam", "tau_iter", "tau_epoch", "final_train_loss", "final_test_loss",
                   "final_train_accuracy", "final_test_accuracy", "diverged", "best"]


@dataclass
class RunRecord:
    run_id: str
    config: Dict[str, Any]
    tau_iter: float
    tau_epoch: float
    steps: List[int] = field(default_factory=list)
    etas: List[float] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    magnitude_steps: List[int] = field(default_factory=list)
    magnitudes: List[Dict[str, float]] = field(default_factory=list)
    global_magnitudes: List[float] = field(default_factory=list)
    final_train_loss: Optional[float] = None
    final_test_loss: Optional[float] = None
    final_train_accuracy: Optional[float] = None
    final_test_accuracy: Optional[float] = None
    diverged: bool = False
    diverged_at: Optional[int] = None
    axis: Dict[str, Any] = field(default_factory=dict)
    version: str = __version__

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunRecord":
        return cls(**d)

    @property
    def final_magnitude(self) -> float:
        if not self.global_magnitudes:
            raise ConfigError(f"run {self.run_id} recorded no weight magnitudes")
        return self.global_magnitudes[-1]

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.steps, "eta": self.etas, "loss": self.losses})

    def magnitude_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.magnitudes)
        df.insert(0, "global_mean", self.global_magnitudes)
        df.insert(0, "t", self.magnitude_steps)
        return df

    def summary_row(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "eta0": self.config["eta0"],
            "lam": self.config["lam"],
            "tau_iter": self.tau_iter,
            "tau_epoch": self.tau_epoch,
            "final_train_loss": self.final_train_loss,
            "final_test_loss": self.final_test_loss,
            "final_train_accuracy": self.final_train_accuracy,
            "final_test_accuracy": self.final_test_accuracy,
            "diverged": self.diverged,
            # grid values win: a width sweep reports lam_base under "lam"
            **self.axis,
        }


# ---------- summary ----------
def summarize(records: Sequence[RunRecord], series: Sequence[str] = ()) -> pd.DataFrame:
    """One row per record; `best` marks the lowest final test loss per series (diverged runs excluded)."""
    if not records:
        raise ConfigError("cannot summarize an empty record set")
    axis_cols: List[str] = []
    for r in records:
        axis_cols += [k for k in r.axis if k not in axis_cols]
    rest = [c for c in SUMMARY_COLUMNS if c not in axis_cols]
    df = pd.DataFrame([r.summary_row() for r in records])
    for col in axis_cols:
        if col not in df:
            df[col] = np.nan
    df["best"] = False
    ok = df[~df["diverged"]].dropna(subset=["final_test_loss"])
    if not ok.empty:
        groups = ok.groupby(list(series), sort=False) if series else [(None, ok)]
        for _, part in groups:
            df.loc[part["final_test_loss"].idxmin(), "best"] = True
    return df[["run_id"] + axis_cols + rest]


def read_summary(path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


# ---------- files ----------
def _write(path: Path, content: str):
    try:
        path.write_text(content, encoding="utf-8")
    except OSError as e:
        raise AdamwEmaError(f"cannot write {path}: {e}") from e


def _write_csv(df: pd.DataFrame, path: Path):
    try:
        df.to_csv(path, index=False)
    except OSError as e:
        raise AdamwEmaError(f"cannot write {path}: {e}") from e


def write_record(record: RunRecord, out_dir) -> Path:
    runs = ensure_dir(Path(out_dir) / "runs")
    path = runs / f"{record.run_id}.json"
    _write(path, json.dumps(record.to_dict(), indent=2))
    _write_csv(record.trace_frame(), runs / f"{record.run_id}_trace.csv")
    if record.magnitudes:
        _write_csv(record.magnitude_frame(), runs / f"{record.run_id}_magnitudes.csv")
    return path


def load_records(out_dir) -> List[RunRecord]:
    runs = Path(out_dir) / "runs"
    if not runs.is_dir():
        raise ConfigError(f"no runs directory under {out_dir}")
    return [RunRecord.from_dict(json.loads(p.read_text(encoding="utf-8")))
            for p in sorted(runs.glob("*.json"))]


def read_series(out_dir) -> List[str]:
    """Series saved by the last report written under out_dir; empty when none was saved."""
    path = Path(out_dir) / "series.json"
    if not path.is_file():
        return []
    try:
        series = json.loads(path.read_text(encoding="utf-8"))["series"]
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"unreadable {path}: {e}") from e
    return [str(s) for s in series]


def write_report(records: Sequence[RunRecord], out_dir, series: Sequence[str] = ()) -> pd.DataFrame:
    """Per-run files plus summary.csv and summary.json; returns the summary table."""
    out = ensure_dir(out_dir)
    for r in records:
        write_record(r, out)
    df = summarize(records, series)
    _write_csv(df, out / "summary.csv")
    _write(out / "series.json", json.dumps({"series": list(series)}))
    by_id = {r.run_id: r for r in records}
    rows = json.loads(df.to_json(orient="records", double_precision=15))
    for row in rows:
        rec = by_id[row["run_id"]]
        row["config"] = rec.config
        row["version"] = rec.version
    _write(out / "summary.json", json.dumps(rows, indent=2))
    logger.info("wrote %d runs to %s", len(records), out)
    return df
