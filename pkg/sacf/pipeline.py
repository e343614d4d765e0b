"""
SACF Pipeline
Coarse social-context routing into one of two fine gaze experts, evaluation modes, scenario analysis
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from tqdm import tqdm

from .errors import DimensionMismatchError, EmptySplitError, InputError, MalformedRecordError, MissingArtifactError
from .experts import AugConfig, ExpertKind, ExpertParams, GazeExpert, LogisticExpert, inference_view
from .gate_sca import (
    CALIBRATION_TAUS, DEFAULT_TAU, Gate, GateDecision, GateParams, LearnedGate, OracleGate, calibrate_tau,
    with_calibration,
)
from .heatmap_core import argmax_coords, dump_heatmap_csv
from .metrics import EvalReport, l2_normalized, summarize
from .monitoring import monitor_stage
from .scene_model import Annotation, Dataset, SceneFeatures, cell_to_pixel, point_in_union

logger = logging.getLogger(__name__)

Point = Tuple[float, float]


class EvalMode(str, Enum):
    SACF = "sacf"
    SACF_ORACLE = "sacf-oracle"
    AGNOSTIC = "agnostic"
    AWARE = "aware"


FACE, NOT_FACE = "Face", "NotFace"


# ============== MODEL ==============

class SacfModel:
    """Two experts, a gate (learned or oracle), the routing threshold and the inference augmentation."""

    def __init__(self, aware: GazeExpert, agnostic: GazeExpert, gate: Optional[Gate] = None,
                 tau: float = DEFAULT_TAU, aug: AugConfig = AugConfig()):
        if not 0.0 <= tau <= 1.0:
            raise InputError(f"tau must lie in [0, 1], got {tau}")
        pa, pb = getattr(aware, "params", None), getattr(agnostic, "params", None)
        if isinstance(pa, ExpertParams) and isinstance(pb, ExpertParams):
            if pa.meta.feature_dim != pb.meta.feature_dim or pa.grid_shape != pb.grid_shape:
                raise DimensionMismatchError(pa.grid_shape + (pa.meta.feature_dim,),
                                             pb.grid_shape + (pb.meta.feature_dim,), "expert")
        self.aware = aware
        self.agnostic = agnostic
        self.gate = gate if gate is not None else OracleGate()
        self.tau = tau
        self.aug = aug

    @classmethod
    def from_params(cls, aware: ExpertParams, agnostic: ExpertParams, gate: Optional[GateParams] = None,
                    tau: Optional[float] = None, aug: Optional[AugConfig] = None) -> "SacfModel":
        """tau=None routes at the gate's calibrated threshold (DEFAULT_TAU when uncalibrated);
        aug=None reuses the augmentation the aware expert was trained with."""
        if tau is None:
            tau = gate.tau if gate is not None else DEFAULT_TAU
        trained_aug = aware.meta.aug
        if aug is None:
            aug = trained_aug if trained_aug is not None else AugConfig()
        elif trained_aug is not None and aug != trained_aug:
            logger.warning("inference augmentation %s differs from the aware expert's training augmentation %s",
                           aug.model_dump(), trained_aug.model_dump())
        learned = LearnedGate(gate, tau) if gate is not None else None
        return cls(LogisticExpert(aware), LogisticExpert(agnostic), learned, tau, aug)

    @property
    def uses_oracle(self) -> bool:
        return isinstance(self.gate, OracleGate)


class Prediction(BaseModel):
    """Routed prediction for one frame plus both experts' points for analysis."""

    model_config = ConfigDict(frozen=True)

    frame_id: str
    p_cells: Point
    p_px: Point
    p_norm: Point
    c_coarse: int
    c_fine: str
    s: Optional[float] = None
    routed_to: ExpertKind
    aware_px: Optional[Point] = None
    agnostic_px: Optional[Point] = None

    @model_validator(mode="after")
    def _consistent(self):
        if (self.routed_to is ExpertKind.AWARE) != (self.c_coarse == 1):
            raise ValueError("routed_to must be aware exactly when c_coarse = 1")
        if self.c_fine not in (FACE, NOT_FACE):
            raise ValueError(f"c_fine must be {FACE!r} or {NOT_FACE!r}")
        return self

    @property
    def fine_label(self) -> int:
        return 1 if self.c_fine == FACE else 0

    @property
    def has_expert_points(self) -> bool:
        return self.aware_px is not None and self.agnostic_px is not None


# ============== INFERENCE ==============

def fine_classify(p_px: Point, annotation: Annotation) -> str:
    """Face iff the predicted point falls in the union of adult face boxes."""
    return FACE if point_in_union(p_px, annotation.adult_faces) else NOT_FACE


def _decide(model: SacfModel, annotation: Annotation, features: SceneFeatures, mode: EvalMode) -> Tuple[int, Optional[float]]:
    if mode is EvalMode.AGNOSTIC:
        return 0, None
    if mode is EvalMode.AWARE:
        return 1, None
    gate: Gate = OracleGate() if mode is EvalMode.SACF_ORACLE else model.gate
    decision: GateDecision = gate.decide(annotation, features)
    return decision.c_coarse, decision.s


def expert_heatmaps(model: SacfModel, annotation: Annotation, features: SceneFeatures) -> Dict[ExpertKind, np.ndarray]:
    return {
        ExpertKind.AWARE: model.aware.predict(inference_view(features, annotation, model.aug), annotation),
        ExpertKind.AGNOSTIC: model.agnostic.predict(features, annotation),
    }


def predict(model: SacfModel, annotation: Annotation, features: Optional[SceneFeatures] = None,
            mode: Union[EvalMode, str] = EvalMode.SACF) -> Prediction:
    """Gate, route to one expert, decode the argmax, then apply the spatial face check."""
    mode = EvalMode(mode)
    features = features if features is not None else annotation.features
    if features is None:
        raise InputError(f"frame {annotation.frame_id!r} has no features")

    c_coarse, s = _decide(model, annotation, features, mode)
    heatmaps = expert_heatmaps(model, annotation, features)
    grid_shape = features.shape
    points_cells = {kind: argmax_coords(h) for kind, h in heatmaps.items()}
    points_px = {kind: cell_to_pixel(p, grid_shape, annotation.frame_size) for kind, p in points_cells.items()}

    routed = ExpertKind.AWARE if c_coarse == 1 else ExpertKind.AGNOSTIC
    p_px = points_px[routed]
    return Prediction(
        frame_id=annotation.frame_id,
        p_cells=points_cells[routed],
        p_px=p_px,
        p_norm=(p_px[0] / annotation.width, p_px[1] / annotation.height),
        c_coarse=c_coarse,
        c_fine=fine_classify(p_px, annotation),
        s=s,
        routed_to=routed,
        aware_px=points_px[ExpertKind.AWARE],
        agnostic_px=points_px[ExpertKind.AGNOSTIC],
    )


# ============== EVALUATION ==============

def _map_frames(fn, items: Sequence, threads: int, desc: str, progress: bool) -> List:
    """Ordered map; results come back in input order regardless of thread count."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(tqdm(pool.map(fn, items), total=len(items), desc=desc, disable=not progress))
    return [fn(x) for x in tqdm(items, desc=desc, disable=not progress)]


@monitor_stage('evaluate', 'PIPELINE')
def evaluate(model: SacfModel, split: Dataset, mode: Union[EvalMode, str] = EvalMode.SACF, threads: int = 1,
             progress: bool = False, dump_dir: Optional[Path] = None,
             dump_count: int = 0) -> Tuple[EvalReport, List[Prediction]]:
    """Predict every inclusive frame of the split and score the predictions."""
    mode = EvalMode(mode)
    frames = [a for a in split.annotations if a.is_inclusive]
    if not frames:
        raise EmptySplitError("evaluation split is empty after filtering Noninclusive frames")

    predictions = _map_frames(lambda a: predict(model, a, mode=mode), frames, threads, f"eval:{mode.value}", progress)

    if dump_dir is not None and dump_count > 0:
        for a in frames[:dump_count]:
            for kind, h in expert_heatmaps(model, a, a.features).items():
                dump_heatmap_csv(h, Path(dump_dir) / f"{mode.value}_{a.frame_id}_{kind.value}.csv")

    l2 = [l2_normalized(p.p_px, a.target_point, a.frame_size) for p, a in zip(predictions, frames)]
    metadata = {
        "tau": model.tau if mode is EvalMode.SACF else None,
        "gate": "oracle" if mode is EvalMode.SACF_ORACLE or (mode is EvalMode.SACF and model.uses_oracle)
        else ("learned" if mode is EvalMode.SACF else "none"),
        "aug": model.aug.model_dump(),
    }
    report = summarize(
        mode.value, l2, [a.target_category for a in frames], [a.binary_label() for a in frames],
        [p.fine_label for p in predictions], [p.c_coarse for p in predictions], metadata,
    )
    logger.info("%s: L2=%.4f L2_face=%s macro F1=%.4f", mode.value, report.l2_mean, report.l2_face, report.macro.f1)
    return report, predictions


@monitor_stage('calibrate', 'PIPELINE')
def calibrate_gate(model: SacfModel, split: Dataset, taus: Sequence[float] = CALIBRATION_TAUS,
                   split_name: str = "val", threads: int = 1, progress: bool = False) -> GateParams:
    """The model's gate params carrying the tau that minimizes routed mean L2 on a held-out split."""
    if not isinstance(model.gate, LearnedGate):
        raise InputError("tau calibration needs a learned gate")
    frames = [a for a in split.annotations if a.is_inclusive]
    if not frames:
        raise EmptySplitError("calibration split is empty after filtering Noninclusive frames")
    preds = _map_frames(lambda a: predict(model, a, mode=EvalMode.SACF), frames, threads, "calibrate", progress)
    calibration = calibrate_tau(
        [p.s for p in preds],
        [a.binary_label() for a in frames],
        [l2_normalized(p.aware_px, a.target_point, a.frame_size) for p, a in zip(preds, frames)],
        [l2_normalized(p.agnostic_px, a.target_point, a.frame_size) for p, a in zip(preds, frames)],
        taus,
        split=split_name,
    )
    return with_calibration(model.gate.params, calibration)


# ============== SCENARIO ANALYSIS ==============

class ScenarioRow(BaseModel):
    scenario: str
    predicted: str
    ground_truth: str
    count: int
    aware_l2: Optional[float] = None
    agnostic_l2: Optional[float] = None
    aware_l2_median: Optional[float] = None
    agnostic_l2_median: Optional[float] = None
    winner: Optional[str] = None


SCENARIOS = (
    (1, 1, "Pred=Face, GT=Face"),
    (0, 0, "Pred=Not-face, GT=Not-face"),
    (1, 0, "Pred=Face, GT=Not-face"),
    (0, 1, "Pred=Not-face, GT=Face"),
)


def _winner(aware: Optional[float], agnostic: Optional[float]) -> Optional[str]:
    if aware is None or agnostic is None:
        return None
    if aware == agnostic:
        return "tie"
    best, worst, name = (aware, agnostic, "aware") if aware < agnostic else (agnostic, aware, "agnostic")
    if best == 0:
        return f"{name}"
    return f"{name} ({worst / best:.1f}x better)"


@monitor_stage('analyze', 'PIPELINE')
def scenario_analysis(predictions: Sequence[Prediction], dataset: Dataset) -> List[ScenarioRow]:
    """Bucket frames by (routed class, ground-truth class) and compare the experts' mean and median L2."""
    by_id = dataset.by_frame_id()
    buckets: Dict[Tuple[int, int], Tuple[List[float], List[float]]] = {(p, g): ([], []) for p, g, _ in SCENARIOS}
    for pred in predictions:
        if not pred.has_expert_points:
            raise InputError(f"prediction {pred.frame_id!r} lacks per-expert points")
        ann = by_id.get(pred.frame_id)
        if ann is None:
            raise InputError(f"prediction {pred.frame_id!r} has no matching frame in the dataset")
        if not ann.is_inclusive:
            continue
        aware_l2 = l2_normalized(pred.aware_px, ann.target_point, ann.frame_size)
        agnostic_l2 = l2_normalized(pred.agnostic_px, ann.target_point, ann.frame_size)
        bucket = buckets[(pred.c_coarse, ann.binary_label())]
        bucket[0].append(aware_l2)
        bucket[1].append(agnostic_l2)

    rows = []
    for p, g, name in SCENARIOS:
        aware_vals, agnostic_vals = buckets[(p, g)]
        aware = float(np.mean(aware_vals)) if aware_vals else None
        agnostic = float(np.mean(agnostic_vals)) if agnostic_vals else None
        rows.append(ScenarioRow(
            scenario=name,
            predicted="Face" if p else "Not-face",
            ground_truth="Face" if g else "Not-face",
            count=len(aware_vals),
            aware_l2=aware,
            agnostic_l2=agnostic,
            aware_l2_median=float(np.median(aware_vals)) if aware_vals else None,
            agnostic_l2_median=float(np.median(agnostic_vals)) if agnostic_vals else None,
            winner=_winner(aware, agnostic),
        ))
    return rows


# ============== PERSISTENCE ==============

def save_predictions(predictions: Sequence[Prediction], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for p in predictions:
            f.write(json.dumps(p.model_dump(mode="json"), separators=(",", ":")) + "\n")
    return path


def load_predictions(path: Union[str, Path]) -> List[Prediction]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"predictions not found: {path}")
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRecordError(str(path), line_number, e.msg) from e
            try:
                out.append(Prediction.model_validate(record))
            except ValueError as e:
                raise InputError(f"{path}: line {line_number}: invalid prediction ({e})") from e
    return out
