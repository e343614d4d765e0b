"""
SACF Report Generation
Evaluation, scenario, agreement and dataset-distribution reports as JSON / CSV / console tables
"""

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd
from pydantic import BaseModel

from .gate_sca import SweepRow
from .metrics import REPORT_COLUMNS, AgreementResult, EvalReport, ModeComparison
from .pipeline import ScenarioRow
from .scene_model import CATEGORY_ORDER, SPLITS, Category, Dataset

NULL_MARKER = "null"


# ============== REPORT DATA MODELS ==============

class DistributionRow(BaseModel):
    """One line of the gaze-target distribution table."""

    target: str
    count: int
    percent: float
    train: int
    val: int
    test: int


class EvalBundle(BaseModel):
    """Everything `eval` writes for a run: one report per mode plus comparisons."""

    reports: List[EvalReport]
    comparisons: List[ModeComparison] = []


# ============== DATASET STATISTICS ==============

def category_table(dataset: Dataset) -> List[DistributionRow]:
    """Per-category counts with the binary Face / Not-face roll-up and a total line."""
    counts: Dict[str, Dict[str, int]] = {c.value: {s: 0 for s in SPLITS} for c in CATEGORY_ORDER}
    for a in dataset.annotations:
        counts[a.target_category.value][a.split] += 1
    total = len(dataset)

    def row(name: str, per_split: Dict[str, int]) -> DistributionRow:
        n = sum(per_split.values())
        return DistributionRow(target=name, count=n, percent=100.0 * n / total if total else 0.0, **per_split)

    rows = [row(c.label, counts[c.value]) for c in CATEGORY_ORDER if sum(counts[c.value].values()) > 0]
    face = counts[Category.FACE.value]
    not_face = {s: counts[Category.OBJECT.value][s] + counts[Category.PERSON_NON_FACE.value][s] for s in SPLITS}
    rows.append(row("Face (binary)", face))
    rows.append(row("Not Face (binary)", not_face))
    rows.append(row("Total", {s: sum(counts[c.value][s] for c in CATEGORY_ORDER) for s in SPLITS}))
    return rows


def format_table(rows: Sequence[BaseModel], float_format: str = "{:.4f}") -> str:
    if not rows:
        return "(empty)"
    frame = pd.DataFrame([r.model_dump() for r in rows])
    for name in frame.columns:
        if pd.api.types.is_float_dtype(frame[name]):
            frame[name] = frame[name].map(lambda v: v if pd.isna(v) else float_format.format(v))
    # None survives in object columns, where na_rep does not apply
    frame = frame.astype(object).where(frame.notna(), NULL_MARKER)
    return frame.to_string(index=False)


# ============== WRITERS ==============

def _write_json(payload, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def _write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, na_rep=NULL_MARKER, lineterminator="\n")
    return path


def write_eval_reports(bundle: EvalBundle, json_path: Union[str, Path], csv_path: Union[str, Path]) -> List[Path]:
    """EvalReport JSON plus the flat CSV (one row per mode)."""
    frame = pd.DataFrame([r.csv_row() for r in bundle.reports], columns=list(REPORT_COLUMNS))
    return [_write_json(bundle.model_dump(mode="json"), json_path), _write_csv(frame, csv_path)]


def write_scenario_csv(rows: Sequence[ScenarioRow], path: Union[str, Path]) -> Path:
    frame = pd.DataFrame(
        [{"scenario": r.scenario, "count": r.count, "aware_l2": r.aware_l2, "agnostic_l2": r.agnostic_l2,
          "aware_l2_median": r.aware_l2_median, "agnostic_l2_median": r.agnostic_l2_median, "winner": r.winner}
         for r in rows],
        columns=["scenario", "count", "aware_l2", "agnostic_l2", "aware_l2_median", "agnostic_l2_median", "winner"],
    )
    return _write_csv(frame, path)


def write_agreement(result: AgreementResult, csv_path: Union[str, Path], json_path: Union[str, Path]) -> List[Path]:
    """Agreement curve CSV plus the kappa / confusion JSON sidecar."""
    frame = pd.DataFrame({"threshold": result.thresholds, "agreement_rate": result.agreement_rate})
    sidecar = {
        "kappa": result.kappa,
        "categories": result.categories,
        "confusion": result.confusion,
        "n_pairs": result.n_pairs,
        "n_box_pairs": result.n_box_pairs,
    }
    return [_write_csv(frame, csv_path), _write_json(sidecar, json_path)]


def write_sweep_csv(rows: Sequence[SweepRow], path: Union[str, Path]) -> Path:
    return _write_csv(pd.DataFrame([r.model_dump() for r in rows]), path)


def write_distribution_csv(rows: Sequence[DistributionRow], path: Union[str, Path]) -> Path:
    return _write_csv(pd.DataFrame([r.model_dump() for r in rows]), path)


def report_summary(report: EvalReport) -> str:
    """Console block for one mode."""
    def fmt(v: Optional[float]) -> str:
        return NULL_MARKER if v is None else f"{v:.4f}"

    side = report.reference_side_px
    return "\n".join([
        f"[{report.mode.upper()}] {report.n_frames} frames",
        f"  L2 {fmt(report.l2_mean)} (~{report.l2_px_ref:.1f}px @ {side}x{side})"
        f" | obj {fmt(report.l2_obj)} | face {fmt(report.l2_face)} | pnf {fmt(report.l2_pnf)}",
        f"  Face P/R/F1 {fmt(report.face.precision)}/{fmt(report.face.recall)}/{fmt(report.face.f1)}"
        f" | macro P/R/F1 {fmt(report.macro.precision)}/{fmt(report.macro.recall)}/{fmt(report.macro.f1)}",
        f"  routed aware={report.routed_counts.get('aware', 0)} agnostic={report.routed_counts.get('agnostic', 0)}"
        f" | routing accuracy {fmt(report.routing_accuracy)}",
    ])
