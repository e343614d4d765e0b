"""
Metrics
Normalized L2, Face/Not-face precision-recall-F1, Cohen's kappa and IoU agreement

Aggregations sum in a fixed order so reports are bit-stable across thread counts.
"""

import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .errors import DegenerateMarginalsError, InputError
from .monitoring import monitor_stage
from .scene_model import BBox, Category, iou

# Side length used to express normalized L2 in pixels (224 x 224 reference frames)
REFERENCE_SIDE_PX = 224


# ============== LOCALIZATION ==============

def l2_normalized(pred: Tuple[float, float], gt: Tuple[float, float], frame_size: Tuple[float, float]) -> float:
    """sqrt((dx / width)^2 + (dy / height)^2)."""
    width, height = frame_size
    if width <= 0 or height <= 0:
        raise InputError(f"frame dimensions must be positive, got {frame_size}")
    return math.hypot((pred[0] - gt[0]) / width, (pred[1] - gt[1]) / height)


class L2ByClass(BaseModel):
    """Per-category mean L2; None marks a category with no frames."""

    l2_obj: Optional[float] = None
    l2_face: Optional[float] = None
    l2_pnf: Optional[float] = None


def _mean(values: Sequence[float]) -> Optional[float]:
    if len(values) == 0:
        return None
    return float(math.fsum(values) / len(values))


def l2_by_class(values: Sequence[float], categories: Sequence[Category]) -> L2ByClass:
    if len(values) != len(categories):
        raise InputError(f"{len(values)} L2 values but {len(categories)} categories")
    groups: Dict[Category, List[float]] = {c: [] for c in Category}
    for v, c in zip(values, categories):
        groups[Category(c)].append(float(v))
    return L2ByClass(
        l2_obj=_mean(groups[Category.OBJECT]),
        l2_face=_mean(groups[Category.FACE]),
        l2_pnf=_mean(groups[Category.PERSON_NON_FACE]),
    )


# ============== CLASSIFICATION ==============

class BinaryConfusion(BaseModel):
    """Counts with Face as the positive class."""

    tp: int = Field(default=0, ge=0)
    fp: int = Field(default=0, ge=0)
    fn: int = Field(default=0, ge=0)
    tn: int = Field(default=0, ge=0)

    @classmethod
    def from_labels(cls, y_true: Sequence[int], y_pred: Sequence[int]) -> "BinaryConfusion":
        t = np.asarray(y_true, dtype=np.int64)
        p = np.asarray(y_pred, dtype=np.int64)
        if t.shape != p.shape:
            raise InputError("label sequences differ in length")
        return cls(
            tp=int(np.sum((t == 1) & (p == 1))),
            fp=int(np.sum((t == 0) & (p == 1))),
            fn=int(np.sum((t == 1) & (p == 0))),
            tn=int(np.sum((t == 0) & (p == 0))),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def off_diagonal(self) -> int:
        return self.fp + self.fn


class ClassScores(BaseModel):
    precision: float
    recall: float
    f1: float
    support: int = 0


class BinaryPRF(BaseModel):
    face: ClassScores
    notface: ClassScores
    macro: ClassScores


def _ratio(num: int, den: int) -> float:
    return num / den if den > 0 else 0.0


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def _class_scores(tp: int, fp: int, fn: int) -> ClassScores:
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    return ClassScores(precision=p, recall=r, f1=f1_score(p, r), support=tp + fn)


def binary_prf(confusion: BinaryConfusion) -> BinaryPRF:
    """Face scores from (tp, fp, fn), Not-face with roles swapped, macro = unweighted mean."""
    face = _class_scores(confusion.tp, confusion.fp, confusion.fn)
    notface = _class_scores(confusion.tn, confusion.fn, confusion.fp)
    macro = ClassScores(
        precision=(face.precision + notface.precision) / 2,
        recall=(face.recall + notface.recall) / 2,
        f1=(face.f1 + notface.f1) / 2,
        support=face.support + notface.support,
    )
    return BinaryPRF(face=face, notface=notface, macro=macro)


# ============== AGREEMENT ==============

def cohen_kappa(matrix) -> float:
    """(p_o - p_e) / (1 - p_e) over a square count matrix."""
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.size == 0:
        raise InputError(f"kappa needs a non-empty square matrix, got shape {m.shape}")
    if not np.issubdtype(m.dtype, np.number) or not np.all(np.isfinite(m)) or np.any(m != np.round(m)):
        raise InputError("kappa counts must be finite integers")
    if np.any(m < 0):
        raise InputError("kappa counts must be nonnegative")
    m = m.astype(np.int64)
    n = int(m.sum())
    if n == 0:
        raise InputError("kappa needs at least one rated item")
    agree = int(np.trace(m))
    chance = int(np.dot(m.sum(axis=1), m.sum(axis=0)))
    if chance == n * n:
        if agree == n:
            return 1.0
        raise DegenerateMarginalsError("chance agreement is 1 but observed agreement is not")
    p_o = agree / n
    p_e = chance / (n * n)
    return (p_o - p_e) / (1.0 - p_e)


def agreement_curve(pairs: Sequence[Tuple[BBox, BBox]], thresholds: Sequence[float]) -> List[float]:
    """Fraction of pairs with IoU strictly above each threshold."""
    if len(pairs) == 0:
        raise InputError("agreement needs at least one box pair")
    for t in thresholds:
        if not 0.0 <= t <= 1.0:
            raise InputError(f"threshold {t} outside [0, 1]")
    ious = np.array([iou(a, b) for a, b in pairs], dtype=np.float64)
    return [float(np.count_nonzero(ious > t)) / len(ious) for t in thresholds]


def category_confusion(labels_a: Sequence[Category], labels_b: Sequence[Category]) -> Tuple[List[Category], np.ndarray]:
    """Square confusion over the categories present in either annotator's labels (rows = a)."""
    if len(labels_a) != len(labels_b):
        raise InputError("annotator label sequences differ in length")
    present = {Category(c) for c in labels_a} | {Category(c) for c in labels_b}
    cats = [c for c in Category if c in present]
    index = {c: k for k, c in enumerate(cats)}
    m = np.zeros((len(cats), len(cats)), dtype=np.int64)
    for a, b in zip(labels_a, labels_b):
        m[index[Category(a)], index[Category(b)]] += 1
    return cats, m


class AgreementResult(BaseModel):
    thresholds: List[float]
    agreement_rate: List[float]
    categories: List[str]
    confusion: List[List[int]]
    kappa: float
    n_pairs: int
    n_box_pairs: int

    @model_validator(mode="after")
    def _check(self):
        if len(self.thresholds) != len(self.agreement_rate):
            raise ValueError("one agreement rate per threshold")
        if any(not 0.0 <= r <= 1.0 for r in self.agreement_rate):
            raise ValueError("agreement rates must lie in [0, 1]")
        return self


# ============== REPORT ==============

class EvalReport(BaseModel):
    """Every score for one evaluation mode."""

    mode: str
    n_frames: int
    l2_mean: float
    l2_obj: Optional[float] = None
    l2_face: Optional[float] = None
    l2_pnf: Optional[float] = None
    face: ClassScores
    notface: ClassScores
    macro: ClassScores
    confusion: BinaryConfusion
    routing: BinaryConfusion
    routing_accuracy: float
    routed_counts: Dict[str, int]
    l2_px_ref: float
    reference_side_px: int = REFERENCE_SIDE_PX
    metadata: Dict[str, object] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self):
        if self.face.support + self.notface.support != self.n_frames:
            raise ValueError("class supports must sum to n_frames")
        return self

    def csv_row(self) -> Dict[str, object]:
        return {
            "mode": self.mode,
            "n_frames": self.n_frames,
            "l2_mean": self.l2_mean,
            "l2_obj": self.l2_obj,
            "l2_face": self.l2_face,
            "l2_pnf": self.l2_pnf,
            "p_face": self.face.precision,
            "r_face": self.face.recall,
            "f1_face": self.face.f1,
            "p_notface": self.notface.precision,
            "r_notface": self.notface.recall,
            "f1_notface": self.notface.f1,
            "p_macro": self.macro.precision,
            "r_macro": self.macro.recall,
            "f1_macro": self.macro.f1,
            "tp": self.confusion.tp,
            "fp": self.confusion.fp,
            "fn": self.confusion.fn,
            "tn": self.confusion.tn,
        }


REPORT_COLUMNS = (
    "mode", "n_frames", "l2_mean", "l2_obj", "l2_face", "l2_pnf", "p_face", "r_face", "f1_face",
    "p_notface", "r_notface", "f1_notface", "p_macro", "r_macro", "f1_macro", "tp", "fp", "fn", "tn",
)


def summarize(mode: str, l2_values: Sequence[float], categories: Sequence[Category], y_true: Sequence[int],
              y_fine: Sequence[int], y_coarse: Sequence[int], metadata: Optional[Dict] = None,
              reference_side_px: int = REFERENCE_SIDE_PX) -> EvalReport:
    """Assemble an EvalReport from per-frame results (in frame order)."""
    n = len(l2_values)
    if n == 0:
        raise InputError("cannot summarize an empty evaluation")
    confusion = BinaryConfusion.from_labels(y_true, y_fine)
    routing = BinaryConfusion.from_labels(y_true, y_coarse)
    prf = binary_prf(confusion)
    by_class = l2_by_class(l2_values, categories)
    l2_mean = float(math.fsum(l2_values) / n)
    routed_aware = int(np.sum(np.asarray(y_coarse) == 1))
    return EvalReport(
        mode=mode,
        n_frames=n,
        l2_mean=l2_mean,
        l2_obj=by_class.l2_obj,
        l2_face=by_class.l2_face,
        l2_pnf=by_class.l2_pnf,
        face=prf.face,
        notface=prf.notface,
        macro=prf.macro,
        confusion=confusion,
        routing=routing,
        routing_accuracy=routing.accuracy,
        routed_counts={"aware": routed_aware, "agnostic": n - routed_aware},
        l2_px_ref=l2_mean * reference_side_px,
        reference_side_px=reference_side_px,
        metadata=dict(metadata or {}),
    )


class ModeComparison(BaseModel):
    mode: str
    baseline: str
    l2_mean_change: Optional[float] = None
    l2_face_change: Optional[float] = None
    f1_face_change: Optional[float] = None
    f1_macro_change: Optional[float] = None


def _relative(new: Optional[float], old: Optional[float]) -> Optional[float]:
    if new is None or old is None or old == 0:
        return None
    return (new - old) / old


def compare_reports(report: EvalReport, baseline: EvalReport) -> ModeComparison:
    """Relative change of a mode against a baseline (negative L2 change = improvement)."""
    return ModeComparison(
        mode=report.mode,
        baseline=baseline.mode,
        l2_mean_change=_relative(report.l2_mean, baseline.l2_mean),
        l2_face_change=_relative(report.l2_face, baseline.l2_face),
        f1_face_change=_relative(report.face.f1, baseline.face.f1),
        f1_macro_change=_relative(report.macro.f1, baseline.macro.f1),
    )


@monitor_stage('agreement', 'METRICS')
def annotator_agreement(labels_a: Sequence[Tuple[str, Category, Optional[BBox]]],
                        labels_b: Sequence[Tuple[str, Category, Optional[BBox]]],
                        thresholds: Sequence[float]) -> AgreementResult:
    """Match two annotators' (frame_id, category, target_box) labels and score their agreement.

    Categories feed the confusion matrix and kappa for every shared frame; the IoU curve
    uses only frames where both annotators drew a target box.
    """
    b_by_id = {fid: (cat, box) for fid, cat, box in labels_b}
    shared = [(fid, cat, box) for fid, cat, box in labels_a if fid in b_by_id]
    if not shared:
        raise InputError("annotator files share no frame_id")
    cats_a = [Category(cat) for _, cat, _ in shared]
    cats_b = [Category(b_by_id[fid][0]) for fid, _, _ in shared]
    box_pairs = [(box, b_by_id[fid][1]) for fid, _, box in shared if box is not None and b_by_id[fid][1] is not None]
    categories, matrix = category_confusion(cats_a, cats_b)
    return AgreementResult(
        thresholds=[float(t) for t in thresholds],
        agreement_rate=agreement_curve(box_pairs, thresholds),
        categories=[c.value for c in categories],
        confusion=matrix.tolist(),
        kappa=cohen_kappa(matrix),
        n_pairs=len(shared),
        n_box_pairs=len(box_pairs),
    )
