"""
Social Context Awareness Gate
Pooled scene statistics -> probability the child looks at a face, thresholded into a route
"""

import json
import logging
import math
from pathlib import Path
from typing import List, Literal, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from tqdm import tqdm

from .errors import (
    EmptySplitError, InputError, InvariantViolation, MissingArtifactError, SingleClassSplitError,
    TrainingDivergedError,
)
from .heatmap_core import EPS, logit, sigmoid
from .metrics import BinaryConfusion, binary_prf
from .monitoring import monitor_stage
from .scene_model import GAZE_ALIGNMENT, OBJECT_MASK, Annotation, BBox, Category, Dataset, SceneFeatures, box_cell_mask

logger = logging.getLogger(__name__)

POOLED_DIM = 6
POOLED_NAMES = (
    "face_align_mean", "face_align_max", "object_align_mean", "object_align_max", "face_fraction", "global_align_max",
)
DEFAULT_TAU = 0.5
# Oracle scores are exactly 0 or 1, so any tau in (0, 1] reproduces the labels
ORACLE_TAU = 0.5
CALIBRATION_TAUS = tuple(k / 100 for k in range(101))


# ============== MODELS ==============

class GateHyper(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(default=500, ge=0)
    learning_rate: float = Field(default=1.0, ge=0.0)
    class_weight: Optional[float] = Field(default=None, gt=0.0)  # None -> inverse prevalence
    seed: int = Field(default=0, ge=0)


class TauCalibration(BaseModel):
    """Routing threshold picked on a held-out split and the mean L2 it reached there."""

    model_config = ConfigDict(frozen=True)

    tau: float = Field(ge=0.0, le=1.0)
    split: str
    n_frames: int = Field(ge=1)
    n_face: int = Field(ge=0)
    routed_face: int = Field(ge=0)
    recall_face: float
    l2_routed: float
    l2_agnostic: float
    l2_face_routed: Optional[float] = None
    l2_face_agnostic: Optional[float] = None


class GateMeta(BaseModel):
    seed: int
    epochs: int
    learning_rate: float
    class_weight: float
    loss_history: List[float] = Field(default_factory=list)
    calibration: Optional[TauCalibration] = None


class GateParams(BaseModel):
    """Weights v over the pooled features and bias c of the logistic scorer."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["gate"] = "gate"
    v: Tuple[float, ...]
    c: float
    meta: GateMeta

    @field_validator("v")
    @classmethod
    def _check_v(cls, v):
        if len(v) != POOLED_DIM:
            raise ValueError(f"gate weights must have {POOLED_DIM} entries")
        if not all(math.isfinite(x) for x in v):
            raise ValueError("gate weights must be finite")
        return v

    @property
    def tau(self) -> float:
        """Calibrated routing threshold, DEFAULT_TAU when the gate was never calibrated."""
        return self.meta.calibration.tau if self.meta.calibration is not None else DEFAULT_TAU


class GateDecision(BaseModel):
    model_config = ConfigDict(frozen=True)

    s: float = Field(ge=0.0, le=1.0)
    tau: float = Field(ge=0.0, le=1.0)
    c_coarse: int

    @model_validator(mode="after")
    def _consistent(self):
        if self.c_coarse != int(self.s >= self.tau):
            raise ValueError("c_coarse must equal [s >= tau]")
        return self


# ============== SCORING ==============

def pool_features(features: SceneFeatures, faces: Sequence[BBox], frame_size: Tuple[float, float]) -> np.ndarray:
    """Face/object alignment statistics; empty sets give 0 for means and -1 for maxima."""
    align = features.channel(GAZE_ALIGNMENT).astype(np.float64)
    face_cells = box_cell_mask(faces, features.shape, frame_size)
    object_cells = features.channel(OBJECT_MASK) > 0.5

    def mean_max(mask):
        if not mask.any():
            return 0.0, -1.0
        vals = align[mask]
        return float(vals.mean()), float(vals.max())

    face_mean, face_max = mean_max(face_cells)
    obj_mean, obj_max = mean_max(object_cells)
    return np.array([
        face_mean, face_max, obj_mean, obj_max,
        float(face_cells.sum()) / face_cells.size,
        float(align.max()),
    ])


def pool_annotation(annotation: Annotation) -> np.ndarray:
    if annotation.features is None:
        raise InputError(f"frame {annotation.frame_id!r} has no features")
    return pool_features(annotation.features, annotation.adult_faces, annotation.frame_size)


def score(params: GateParams, features: SceneFeatures, faces: Sequence[BBox],
          frame_size: Tuple[float, float]) -> float:
    """s = sigmoid(v . pool_features + c)."""
    pooled = pool_features(features, faces, frame_size)
    return float(sigmoid(pooled @ np.asarray(params.v) + params.c))


def score_annotation(params: GateParams, annotation: Annotation) -> float:
    return float(sigmoid(pool_annotation(annotation) @ np.asarray(params.v) + params.c))


def coarse_classify(s: float, tau: float) -> int:
    """1 if s >= tau else 0."""
    return 1 if s >= tau else 0


def oracle_gate(annotation: Annotation) -> int:
    """Perfect gate: the binary projection of the ground-truth category."""
    if annotation.target_category is Category.NONINCLUSIVE:
        raise InvariantViolation("oracle-inclusive", "oracle gate needs a Face/Not-face label",
                                 frame_id=annotation.frame_id)
    return annotation.target_category.binary()


class Gate(Protocol):
    def decide(self, annotation: Annotation, features: SceneFeatures) -> GateDecision:
        ...


class LearnedGate:
    def __init__(self, params: GateParams, tau: float = DEFAULT_TAU):
        self.params = params
        self.tau = tau

    def decide(self, annotation: Annotation, features: SceneFeatures) -> GateDecision:
        s = score(self.params, features, annotation.adult_faces, annotation.frame_size)
        return GateDecision(s=s, tau=self.tau, c_coarse=coarse_classify(s, self.tau))


class OracleGate:
    tau = ORACLE_TAU

    def decide(self, annotation: Annotation, features: Optional[SceneFeatures] = None) -> GateDecision:
        label = oracle_gate(annotation)
        return GateDecision(s=float(label), tau=ORACLE_TAU, c_coarse=label)


# ============== TRAINING ==============

def weighted_logistic_loss(v: np.ndarray, c: float, x: np.ndarray, y: np.ndarray, weights: np.ndarray) -> float:
    p = np.clip(sigmoid(x @ v + c), EPS, 1.0 - EPS)
    terms = y * np.log(p) + (1.0 - y) * np.log1p(-p)
    return float(-(weights * terms).sum() / weights.sum())


def fit_gate(x: np.ndarray, y: np.ndarray, hyper: GateHyper = GateHyper(),
             progress: bool = False) -> GateParams:
    """Class-weighted logistic regression by full-batch gradient descent.

    Descent runs on z-scored features; the returned (v, c) are folded back so that
    s = sigmoid(v . pooled + c) holds on the raw pooled vector.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if n == 0:
        raise EmptySplitError("gate training split is empty")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == n:
        raise SingleClassSplitError(int(n_pos == n), n)

    class_weight = hyper.class_weight if hyper.class_weight is not None else (n - n_pos) / n_pos
    weights = np.where(y == 1.0, class_weight, 1.0)
    total = weights.sum()

    # constant columns (e.g. no objects anywhere) keep unit scale
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > EPS, sd, 1.0)
    z = (x - mu) / sd

    v = np.zeros(x.shape[1], dtype=np.float64)
    c = logit(n_pos / n)
    history: List[float] = []
    for epoch in tqdm(range(hyper.epochs), desc="gate", disable=not progress):
        loss = weighted_logistic_loss(v, c, z, y, weights)
        if not math.isfinite(loss):
            raise TrainingDivergedError(epoch, loss)
        history.append(loss)
        residual = weights * (sigmoid(z @ v + c) - y) / total
        v = v - hyper.learning_rate * (z.T @ residual)
        c = c - hyper.learning_rate * float(residual.sum())
    final = weighted_logistic_loss(v, c, z, y, weights)
    if not math.isfinite(final):
        raise TrainingDivergedError(hyper.epochs, final)
    history.append(final)

    v_raw = v / sd
    c_raw = c - float(v_raw @ mu)
    meta = GateMeta(seed=hyper.seed, epochs=hyper.epochs, learning_rate=hyper.learning_rate,
                    class_weight=float(class_weight), loss_history=history)
    return GateParams(v=tuple(float(t) for t in v_raw), c=float(c_raw), meta=meta)


@monitor_stage('train_gate', 'GATE')
def train_gate(train: Dataset, hyper: GateHyper = GateHyper(), progress: bool = False) -> GateParams:
    """Fit the scorer on the Face vs Not-face proxy task."""
    frames = [a for a in train.annotations if a.is_inclusive]
    if not frames:
        raise EmptySplitError("gate training split is empty")
    x = np.stack([pool_annotation(a) for a in frames])
    y = np.array([a.binary_label() for a in frames], dtype=np.float64)
    logger.info("training gate on %d frames (%d Face)", len(y), int(y.sum()))
    return fit_gate(x, y, hyper, progress)


# ============== ANALYSIS ==============

class SweepRow(BaseModel):
    tau: float
    precision_face: float
    recall_face: float
    f1_face: float
    f1_macro: float
    routing_accuracy: float
    routed_face: int


def threshold_sweep(scores: Sequence[float], labels: Sequence[int], taus: Sequence[float]) -> List[SweepRow]:
    """Gate Face-class precision/recall/F1 and routing accuracy at each tau."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(s) != len(y):
        raise InputError("scores and labels differ in length")
    rows = []
    for tau in taus:
        pred = (s >= tau).astype(np.int64)
        conf = BinaryConfusion.from_labels(y, pred)
        prf = binary_prf(conf)
        rows.append(SweepRow(
            tau=float(tau),
            precision_face=prf.face.precision,
            recall_face=prf.face.recall,
            f1_face=prf.face.f1,
            f1_macro=prf.macro.f1,
            routing_accuracy=conf.accuracy,
            routed_face=int(pred.sum()),
        ))
    return rows


def calibrate_tau(scores: Sequence[float], labels: Sequence[int], aware_l2: Sequence[float],
                  agnostic_l2: Sequence[float], taus: Sequence[float] = CALIBRATION_TAUS,
                  split: str = "val") -> TauCalibration:
    """Pick the tau whose routing minimizes mean L2 over the frames; ties go to the larger tau."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    aware = np.asarray(aware_l2, dtype=np.float64)
    agnostic = np.asarray(agnostic_l2, dtype=np.float64)
    if not (len(s) == len(y) == len(aware) == len(agnostic)):
        raise InputError("scores, labels and per-expert L2 differ in length")
    if len(s) == 0:
        raise EmptySplitError("tau calibration needs at least one frame")
    if len(taus) == 0 or any(not 0.0 <= t <= 1.0 for t in taus):
        raise InputError("calibration taus must be a non-empty list in [0, 1]")

    candidates = sorted(set(float(t) for t in taus))
    l2 = np.array([np.where(s >= t, aware, agnostic).mean() for t in candidates])
    best = float(l2.min())
    tau = max(t for t, value in zip(candidates, l2) if value <= best)

    routed = s >= tau
    face = y == 1
    n_face = int(face.sum())
    routed_l2 = np.where(routed, aware, agnostic)
    calibration = TauCalibration(
        tau=tau,
        split=split,
        n_frames=len(s),
        n_face=n_face,
        routed_face=int(routed.sum()),
        recall_face=float((routed & face).sum() / n_face) if n_face else 0.0,
        l2_routed=float(routed_l2.mean()),
        l2_agnostic=float(agnostic.mean()),
        l2_face_routed=float(routed_l2[face].mean()) if n_face else None,
        l2_face_agnostic=float(agnostic[face].mean()) if n_face else None,
    )
    logger.info("calibrated tau=%.2f on %s: L2 %.4f (agnostic %.4f), Face recall %.4f",
                tau, split, calibration.l2_routed, calibration.l2_agnostic, calibration.recall_face)
    return calibration


def with_calibration(params: GateParams, calibration: TauCalibration) -> GateParams:
    return params.model_copy(update={"meta": params.meta.model_copy(update={"calibration": calibration})})


# ============== SERIALIZATION ==============

def save_gate(params: GateParams, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(params.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def load_gate(path: Union[str, Path]) -> GateParams:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"gate model not found: {path}")
    try:
        return GateParams.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as e:
        raise InputError(f"{path}: invalid gate params ({e})") from e
