"""
Gaze Experts
Per-cell logistic heatmap predictor, social blur augmentation, aware/agnostic training
"""

import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from scipy.ndimage import uniform_filter
from tqdm import tqdm

from .errors import DimensionMismatchError, EmptySplitError, InputError, MissingArtifactError, TrainingDivergedError
from .heatmap_core import DEFAULT_SIGMA, bce_loss, gaussian_gt_heatmap, logit, sigmoid
from .monitoring import monitor_stage
from .scene_model import (
    FEATURE_DIM, GAZE_ALIGNMENT, OBJECT_MASK, PNF_MASK, Annotation, BBox, Dataset, SceneFeatures,
    box_cell_mask, pixel_to_cell,
)

logger = logging.getLogger(__name__)


class ExpertKind(str, Enum):
    AWARE = "aware"
    AGNOSTIC = "agnostic"


# ============== MODELS ==============

class AugConfig(BaseModel):
    """Social blur: attenuation, training keep radius (cells), box-filter size."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    beta: float = Field(default=0.1, ge=0.0, le=1.0)
    keep_radius: float = Field(default=3.0, ge=0.0)
    blur_kernel: int = Field(default=3, ge=1)

    @field_validator("blur_kernel")
    @classmethod
    def _odd_kernel(cls, v):
        if v % 2 != 1:
            raise ValueError("blur_kernel must be odd")
        return v


class ExpertHyper(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(default=200, ge=0)
    learning_rate: float = Field(default=0.5, ge=0.0)
    batch_size: Optional[int] = Field(default=None, ge=1)  # None -> full batch
    seed: int = Field(default=0, ge=0)
    sigma: float = Field(default=DEFAULT_SIGMA, gt=0.0)


class ExpertMeta(BaseModel):
    grid_h: int
    grid_w: int
    feature_dim: int
    seed: int
    epochs: int
    learning_rate: float
    batch_size: Optional[int] = None
    sigma: float = DEFAULT_SIGMA
    kind: ExpertKind
    aug: Optional[AugConfig] = None
    loss_history: List[float] = Field(default_factory=list)


class ExpertParams(BaseModel):
    """Weights w (one per feature channel) and bias b of the per-cell logistic expert."""

    model_config = ConfigDict(frozen=True)

    kind: ExpertKind
    w: Tuple[float, ...]
    b: float
    meta: ExpertMeta

    @field_validator("w")
    @classmethod
    def _finite(cls, v):
        if not all(math.isfinite(x) for x in v):
            raise ValueError("expert weights must be finite")
        return v

    @property
    def weights(self) -> np.ndarray:
        return np.asarray(self.w, dtype=np.float64)

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return (self.meta.grid_h, self.meta.grid_w)


class GazeExpert(Protocol):
    """Anything that maps a frame's features (and head context) to a heatmap."""

    def predict(self, features: SceneFeatures, annotation: Annotation) -> np.ndarray:
        ...


class LogisticExpert:
    """GazeExpert backed by ExpertParams."""

    def __init__(self, params: ExpertParams):
        self.params = params

    @property
    def kind(self) -> ExpertKind:
        return self.params.kind

    def predict(self, features: SceneFeatures, annotation: Optional[Annotation] = None) -> np.ndarray:
        return predict_heatmap(self.params, features)


# ============== INFERENCE ==============

def _logits(w: np.ndarray, b: float, grids: np.ndarray) -> np.ndarray:
    return np.asarray(grids, dtype=np.float64) @ w + b


def predict_heatmap(params: ExpertParams, features: SceneFeatures) -> np.ndarray:
    """value(i, j) = sigmoid(w . f(i, j) + b)."""
    if features.feature_dim != len(params.w):
        raise DimensionMismatchError((len(params.w),), (features.feature_dim,), "feature")
    if features.shape != params.grid_shape:
        raise DimensionMismatchError(params.grid_shape, features.shape, "feature grid")
    return sigmoid(_logits(params.weights, params.b, features.grid))


# ============== AUGMENTATION ==============

def keep_region(grid_shape: Tuple[int, int], faces: Sequence[BBox], frame_size: Tuple[float, float],
                keep_center: Optional[Tuple[float, float]] = None, keep_radius: float = 0.0) -> np.ndarray:
    """Face cells, plus the disk of keep_radius cells around keep_center (pixels) when given."""
    keep = box_cell_mask(faces, grid_shape, frame_size)
    if keep_center is not None:
        cx, cy = pixel_to_cell(keep_center, grid_shape, frame_size)
        rows = np.arange(grid_shape[0])[:, None] + 0.5
        cols = np.arange(grid_shape[1])[None, :] + 0.5
        keep |= (rows - cy) ** 2 + (cols - cx) ** 2 <= keep_radius ** 2
    return keep


def _box_smooth(values: np.ndarray, k: int) -> np.ndarray:
    """k x k mean over in-grid neighbours."""
    if k == 1:
        return values
    total = uniform_filter(values, size=k, mode="constant", cval=0.0)
    count = uniform_filter(np.ones_like(values), size=k, mode="constant", cval=0.0)
    return total / count


def aug_social(features: SceneFeatures, faces: Sequence[BBox], keep_center: Optional[Tuple[float, float]],
               cfg: AugConfig, frame_size: Tuple[float, float]) -> SceneFeatures:
    """Suppress non-social context outside the keep region.

    Outside the keep region object_mask, pnf_mask and gaze_alignment are scaled by
    beta, and the scaled alignment map is smoothed with a normalized k x k box filter.
    face_mask, head_mask and head_distance are never touched.
    """
    if cfg.beta == 1.0 and cfg.blur_kernel == 1:
        return features
    grid = features.grid.astype(np.float64)
    keep = keep_region(features.shape, faces, frame_size, keep_center, cfg.keep_radius)
    outside = ~keep

    out = grid.copy()
    for ch in (OBJECT_MASK, PNF_MASK):
        out[:, :, ch] = np.where(outside, grid[:, :, ch] * cfg.beta, grid[:, :, ch])

    damped = np.where(outside, grid[:, :, GAZE_ALIGNMENT] * cfg.beta, grid[:, :, GAZE_ALIGNMENT])
    smoothed = _box_smooth(damped, cfg.blur_kernel)
    out[:, :, GAZE_ALIGNMENT] = np.where(outside, smoothed, grid[:, :, GAZE_ALIGNMENT])
    return features.with_grid(out)


def inference_view(features: SceneFeatures, annotation: Annotation, cfg: AugConfig) -> SceneFeatures:
    """What the aware expert sees at inference: face boxes are the only keep region."""
    return aug_social(features, annotation.adult_faces, None, cfg, annotation.frame_size)


# ============== TRAINING ==============

def _require_features(annotation: Annotation) -> SceneFeatures:
    if annotation.features is None:
        raise InputError(f"frame {annotation.frame_id!r} has no features")
    return annotation.features


def gt_heatmap_for(annotation: Annotation, grid_shape: Tuple[int, int], sigma: float) -> np.ndarray:
    target = pixel_to_cell(annotation.target_point, grid_shape, annotation.frame_size)
    return gaussian_gt_heatmap(target, sigma, grid_shape)


def training_tensors(train: Dataset, kind: ExpertKind, aug: AugConfig, sigma: float) -> Tuple[np.ndarray, np.ndarray]:
    """Stack inputs (N, H, W, F) and ground-truth heatmaps (N, H, W) for one expert."""
    frames = [a for a in train.annotations if a.is_inclusive]
    if not frames:
        raise EmptySplitError("training split is empty")
    grid_shape = _require_features(frames[0]).shape
    xs, gs = [], []
    for a in frames:
        feats = _require_features(a)
        if feats.shape != grid_shape:
            raise DimensionMismatchError(grid_shape, feats.shape, f"features of frame {a.frame_id!r}")
        if kind is ExpertKind.AWARE:
            # training keep region includes the certain target
            feats = aug_social(feats, a.adult_faces, a.target_point, aug, a.frame_size)
        xs.append(feats.grid)
        gs.append(gt_heatmap_for(a, grid_shape, sigma))
    return np.asarray(np.stack(xs), dtype=np.float64), np.stack(gs)


def mean_loss(w: np.ndarray, b: float, x: np.ndarray, g: np.ndarray) -> float:
    """Mean over frames of the per-frame bce_loss."""
    p = sigmoid(_logits(w, b, x))
    return bce_loss(p, g)


def gradient_step(w: np.ndarray, b: float, x: np.ndarray, g: np.ndarray, learning_rate: float):
    """One descent step on the mean per-frame BCE; returns (w, b, loss before the step)."""
    n, h, wid = g.shape
    z = _logits(w, b, x)
    loss = bce_loss(sigmoid(z), g)
    dz = (sigmoid(z) - g) / (h * wid * n)
    grad_w = np.einsum("nhwf,nhw->f", x, dz)
    grad_b = float(dz.sum())
    return w - learning_rate * grad_w, b - learning_rate * grad_b, loss


def _batch_order(n: int, batch_size: Optional[int], seed: int, epoch: int) -> List[np.ndarray]:
    if batch_size is None or batch_size >= n:
        return [np.arange(n)]
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch])))
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def fit_logistic_heatmap(x: np.ndarray, g: np.ndarray, hyper: ExpertHyper,
                         progress: bool = False) -> Tuple[np.ndarray, float, List[float]]:
    """Gradient descent from w = 0, b = logit(mean GT); returns (w, b, loss history)."""
    n = x.shape[0]
    w = np.zeros(x.shape[-1], dtype=np.float64)
    b = logit(float(g.mean()))
    history: List[float] = []
    for epoch in tqdm(range(hyper.epochs), desc="train", disable=not progress):
        batches = _batch_order(n, hyper.batch_size, hyper.seed, epoch)
        if len(batches) == 1:
            w, b, loss = gradient_step(w, b, x, g, hyper.learning_rate)
        else:
            loss = mean_loss(w, b, x, g)
            for idx in batches:
                w, b, _ = gradient_step(w, b, x[idx], g[idx], hyper.learning_rate)
        if not math.isfinite(loss) or not np.all(np.isfinite(w)) or not math.isfinite(b):
            raise TrainingDivergedError(epoch, loss)
        history.append(loss)
    final = mean_loss(w, b, x, g)
    if not math.isfinite(final):
        raise TrainingDivergedError(hyper.epochs, final)
    history.append(final)
    return w, b, history


@monitor_stage('train_expert', 'EXPERTS')
def train_expert(train: Dataset, kind: Union[ExpertKind, str], hyper: ExpertHyper = ExpertHyper(),
                 aug: AugConfig = AugConfig(), progress: bool = False) -> ExpertParams:
    """Aware: trained on aug_social views keeping faces and the target disk. Agnostic: raw features."""
    kind = ExpertKind(kind)
    x, g = training_tensors(train, kind, aug, hyper.sigma)
    logger.info("training %s expert on %d frames (%d epochs, lr=%g)", kind.value, x.shape[0],
                hyper.epochs, hyper.learning_rate)
    w, b, history = fit_logistic_heatmap(x, g, hyper, progress)
    if hyper.epochs > 0 and hyper.learning_rate > 0 and not history[-1] < history[0]:
        logger.warning("%s expert: final loss %.6f did not improve on initial %.6f", kind.value, history[-1], history[0])

    meta = ExpertMeta(
        grid_h=x.shape[1], grid_w=x.shape[2], feature_dim=x.shape[3], seed=hyper.seed, epochs=hyper.epochs,
        learning_rate=hyper.learning_rate, batch_size=hyper.batch_size, sigma=hyper.sigma, kind=kind,
        aug=aug if kind is ExpertKind.AWARE else None, loss_history=history,
    )
    return ExpertParams(kind=kind, w=tuple(float(v) for v in w), b=float(b), meta=meta)


# ============== SERIALIZATION ==============

def save_expert(params: ExpertParams, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(params.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def load_expert(path: Union[str, Path], feature_dim: int = FEATURE_DIM) -> ExpertParams:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"expert model not found: {path}")
    try:
        params = ExpertParams.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as e:
        raise InputError(f"{path}: invalid expert params ({e})") from e
    if len(params.w) != feature_dim or params.meta.feature_dim != feature_dim:
        raise DimensionMismatchError((feature_dim,), (len(params.w),), f"{path} feature")
    return params
