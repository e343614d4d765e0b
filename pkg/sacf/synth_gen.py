"""
Synthetic Scene Generator
Seeded scenes whose gaze-target mix mirrors the autism gaze-target imbalance

Each frame draws from its own counter-based stream keyed by (seed, frame_index),
so frames can be generated in any order or in parallel with identical output.
"""

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from tqdm import tqdm

from .errors import PlacementError
from .monitoring import monitor_stage
from .scene_model import (
    FACE_MASK, FEATURE_DECIMALS, FEATURE_DIM, GAZE_ALIGNMENT, HEAD_DISTANCE, HEAD_MASK, OBJECT_MASK, PNF_MASK,
    SPLITS, Annotation, BBox, Category, Dataset, SceneFeatures,
)

logger = logging.getLogger(__name__)

# Split sizes of the reference benchmark: 9874 / 3344 / 3364 of 16,582 frames
REFERENCE_FRAMES = 16582
REFERENCE_SPLITS = {"train": 9874, "val": 3344, "test": 3364}

# Separate stream for split assignment so it never collides with a frame stream
_SPLIT_STREAM = 2 ** 63 - 1

# Entity sizes in cells
HEAD_CELLS = 4
FACE_CELLS = (3, 4)
TORSO_HEIGHT_CELLS = 5
OBJECT_CELLS = (2, 4)


# ============== CONFIG ==============

class GenConfig(BaseModel):
    """Scene generator settings; serialized as a JSON document."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    grid_h: int = 32
    grid_w: int = 32
    feature_dim: int = FEATURE_DIM
    cell_size_px: int = Field(default=7, ge=1)
    n_frames: int = REFERENCE_FRAMES
    split_fractions: Dict[str, float] = Field(
        default_factory=lambda: {s: n / REFERENCE_FRAMES for s, n in REFERENCE_SPLITS.items()}
    )
    category_prior: Dict[str, float] = Field(
        default_factory=lambda: {"face": 0.066, "object": 0.85, "person_non_face": 0.084}
    )
    n_faces_range: Tuple[int, int] = (1, 2)
    n_objects_range: Tuple[int, int] = (1, 4)
    gaze_noise_sigma: float = Field(default=0.35, ge=0.0)
    jitter_sigma: float = Field(default=0.75, ge=0.0)
    include_noninclusive: float = Field(default=0.0, ge=0.0, le=1.0)
    emit_features: bool = True
    max_retries: int = Field(default=200, ge=1)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)

    @field_validator("grid_h", "grid_w")
    @classmethod
    def _check_grid(cls, v):
        if v < 8:
            raise ValueError("grid dimensions must be >= 8")
        return v

    @field_validator("n_frames")
    @classmethod
    def _check_frames(cls, v):
        if v < 1:
            raise ValueError("n_frames must be >= 1")
        return v

    @field_validator("feature_dim")
    @classmethod
    def _check_feature_dim(cls, v):
        if v != FEATURE_DIM:
            raise ValueError(f"feature_dim is fixed at {FEATURE_DIM}")
        return v

    @field_validator("split_fractions")
    @classmethod
    def _check_splits(cls, v):
        if set(v) != set(SPLITS):
            raise ValueError(f"split_fractions needs exactly the keys {SPLITS}")
        if any(f < 0 for f in v.values()):
            raise ValueError("split_fractions must be nonnegative")
        if abs(sum(v.values()) - 1.0) > 1e-9:
            raise ValueError("split_fractions must sum to 1 within 1e-9")
        return v

    @field_validator("category_prior")
    @classmethod
    def _check_prior(cls, v):
        allowed = {Category.FACE.value, Category.OBJECT.value, Category.PERSON_NON_FACE.value}
        if set(v) - allowed:
            raise ValueError(f"category_prior keys must be among {sorted(allowed)}")
        if any(p < 0 for p in v.values()):
            raise ValueError("category_prior entries must be nonnegative")
        if abs(sum(v.values()) - 1.0) > 1e-9:
            raise ValueError("category_prior must sum to 1 within 1e-9")
        return v

    @model_validator(mode="after")
    def _check_ranges(self):
        for name in ("n_faces_range", "n_objects_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must satisfy 0 <= min <= max")
        needs_adult = self.prior(Category.FACE) > 0 or self.prior(Category.PERSON_NON_FACE) > 0
        if needs_adult and self.n_faces_range[0] < 1:
            raise ValueError("n_faces_range min must be >= 1 when Face or PersonNonFace targets have mass")
        if self.prior(Category.OBJECT) > 0 and self.n_objects_range[0] < 1:
            raise ValueError("n_objects_range min must be >= 1 when Object targets have mass")
        return self

    def prior(self, category: Category) -> float:
        return self.category_prior.get(category.value, 0.0)

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return (self.grid_h, self.grid_w)

    @property
    def frame_size(self) -> Tuple[int, int]:
        return (self.grid_w * self.cell_size_px, self.grid_h * self.cell_size_px)

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


# ============== SCENE SAMPLING ==============

@dataclass(frozen=True)
class SceneSample:
    annotation: Annotation
    features: Optional[SceneFeatures]
    gaze_direction: Tuple[float, float]  # unit vector in cell units (x=col, y=row)
    head_center_cells: Tuple[float, float]


def frame_rng(seed: int, frame_index: int) -> np.random.Generator:
    """Counter-based stream for one frame, independent of generation order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, frame_index])))


def _place(rng: np.random.Generator, w: int, h: int, cfg: GenConfig,
           occupied: List[Tuple[int, int, int, int]]) -> Optional[Tuple[int, int, int, int]]:
    """Random cell-aligned (x0, y0, x1, y1) not overlapping any occupied box; None if it does not fit."""
    if w > cfg.grid_w or h > cfg.grid_h:
        return None
    x0 = int(rng.integers(0, cfg.grid_w - w + 1))
    y0 = int(rng.integers(0, cfg.grid_h - h + 1))
    cand = (x0, y0, x0 + w, y0 + h)
    if any(_cells_overlap(cand, o) for o in occupied):
        return None
    return cand


def _cells_overlap(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _place_adult(rng: np.random.Generator, cfg: GenConfig, occupied):
    """Face box with the torso directly below it (adjacent, non-overlapping)."""
    fs = int(rng.integers(FACE_CELLS[0], FACE_CELLS[1] + 1))
    tw = fs + 2
    total = _place(rng, tw, fs + TORSO_HEIGHT_CELLS, cfg, occupied)
    if total is None:
        return None
    x0, y0, x1, y1 = total
    face = (x0 + 1, y0, x0 + 1 + fs, y0 + fs)
    torso = (x0, y0 + fs, x1, y1)
    return face, torso


def _retry(fn, cfg: GenConfig, limit: str):
    for _ in range(cfg.max_retries):
        placed = fn()
        if placed is not None:
            return placed
    raise PlacementError(limit, cfg.max_retries)


def _to_bbox(cells: Tuple[int, int, int, int], cell_px: int) -> BBox:
    return BBox.from_list([c * cell_px for c in cells])


def _clamp_into(value: float, lo: float, hi: float) -> float:
    """Clamp into the half-open [lo, hi)."""
    return float(min(max(value, lo), np.nextafter(hi, lo)))


def _sample_category(rng: np.random.Generator, cfg: GenConfig) -> Category:
    noninclusive_draw = rng.random()
    choices = [Category.FACE, Category.OBJECT, Category.PERSON_NON_FACE]
    probs = np.array([cfg.prior(c) for c in choices], dtype=np.float64)
    pick = choices[int(rng.choice(len(choices), p=probs / probs.sum()))]
    if noninclusive_draw < cfg.include_noninclusive:
        return Category.NONINCLUSIVE
    return pick


def alignment_at(points_cells: np.ndarray, head_center: Tuple[float, float],
                 gaze_dir: Tuple[float, float]) -> np.ndarray:
    """Cosine between (point - head_center) and the gaze direction; 0 at the head centre."""
    pts = np.asarray(points_cells, dtype=np.float64)
    vec = pts - np.asarray(head_center, dtype=np.float64)
    norm = np.linalg.norm(vec, axis=-1)
    dot = vec @ np.asarray(gaze_dir, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(norm > 0, dot / np.where(norm > 0, norm, 1.0), 0.0)
    return np.clip(cos, -1.0, 1.0)


def build_features(cfg: GenConfig, head, faces, torsos, objects,
                   head_center: Tuple[float, float], gaze_dir: Tuple[float, float]) -> SceneFeatures:
    grid = np.zeros((cfg.grid_h, cfg.grid_w, FEATURE_DIM), dtype=np.float64)
    for channel, boxes in ((FACE_MASK, faces), (PNF_MASK, torsos), (OBJECT_MASK, objects), (HEAD_MASK, [head])):
        for x0, y0, x1, y1 in boxes:
            grid[y0:y1, x0:x1, channel] = 1.0

    cols, rows = np.meshgrid(np.arange(cfg.grid_w) + 0.5, np.arange(cfg.grid_h) + 0.5)
    centers = np.stack([cols, rows], axis=-1)
    grid[:, :, GAZE_ALIGNMENT] = alignment_at(centers, head_center, gaze_dir)
    dist = np.linalg.norm(centers - np.asarray(head_center), axis=-1)
    grid[:, :, HEAD_DISTANCE] = np.clip(dist / math.hypot(cfg.grid_h, cfg.grid_w), 0.0, 1.0)

    grid = np.round(grid, FEATURE_DECIMALS)
    return SceneFeatures(grid)


def sample_scene_with_gaze(cfg: GenConfig, rng: np.random.Generator, frame_index: int = 0,
                           split: str = "train") -> SceneSample:
    """Place entities, draw the target and the noisy gaze ray, fill the feature grid."""
    cell = cfg.cell_size_px
    occupied: List[Tuple[int, int, int, int]] = []

    head = _retry(lambda: _place(rng, HEAD_CELLS, HEAD_CELLS, cfg, occupied), cfg, "grid size vs head box")
    occupied.append(head)

    n_faces = int(rng.integers(cfg.n_faces_range[0], cfg.n_faces_range[1] + 1))
    faces, torsos = [], []
    for _ in range(n_faces):
        face, torso = _retry(lambda: _place_adult(rng, cfg, occupied), cfg, f"n_faces_range={cfg.n_faces_range}")
        occupied.extend([face, torso])
        faces.append(face)
        torsos.append(torso)

    n_objects = int(rng.integers(cfg.n_objects_range[0], cfg.n_objects_range[1] + 1))
    objects = []
    for _ in range(n_objects):
        def attempt():
            w = int(rng.integers(OBJECT_CELLS[0], OBJECT_CELLS[1] + 1))
            h = int(rng.integers(OBJECT_CELLS[0], OBJECT_CELLS[1] + 1))
            return _place(rng, w, h, cfg, occupied)
        obj = _retry(attempt, cfg, f"n_objects_range={cfg.n_objects_range}")
        occupied.append(obj)
        objects.append(obj)

    category = _sample_category(rng, cfg)
    head_center = ((head[0] + head[2]) / 2.0, (head[1] + head[3]) / 2.0)
    jitter = rng.normal(0.0, 1.0, size=2) * cfg.jitter_sigma
    angle_noise = float(rng.normal(0.0, 1.0)) * cfg.gaze_noise_sigma
    width, height = cfg.frame_size

    if category is Category.NONINCLUSIVE:
        theta = float(rng.uniform(0.0, 2.0 * math.pi))
        gaze_dir = (math.cos(theta), math.sin(theta))
        reach = 2.0 * max(width, height)
        target_point = (head_center[0] * cell + gaze_dir[0] * reach, head_center[1] * cell + gaze_dir[1] * reach)
        target_box = None
    else:
        pool = {Category.FACE: faces, Category.OBJECT: objects, Category.PERSON_NON_FACE: torsos}[category]
        entity = pool[int(rng.integers(0, len(pool)))]
        target_box = _to_bbox(entity, cell)
        cx, cy = target_box.center
        target_point = (
            _clamp_into(cx + jitter[0] * cell, target_box.x_min, target_box.x_max),
            _clamp_into(cy + jitter[1] * cell, target_box.y_min, target_box.y_max),
        )
        vx = target_point[0] / cell - head_center[0]
        vy = target_point[1] / cell - head_center[1]
        norm = math.hypot(vx, vy)
        ux, uy = (vx / norm, vy / norm) if norm > 0 else (1.0, 0.0)
        c, s = math.cos(angle_noise), math.sin(angle_noise)
        gaze_dir = (c * ux - s * uy, s * ux + c * uy)

    features = None
    if cfg.emit_features:
        features = build_features(cfg, head, faces, torsos, objects, head_center, gaze_dir)

    annotation = Annotation(
        frame_id=f"f{frame_index:06d}",
        clip_id=f"c{frame_index // 5:05d}",
        width=width,
        height=height,
        child_head=_to_bbox(head, cell),
        adult_faces=tuple(_to_bbox(f, cell) for f in faces),
        target_point=target_point,
        target_box=target_box,
        target_category=category,
        split=split,
        features=features,
    )
    return SceneSample(annotation, features, gaze_dir, head_center)


def sample_scene(cfg: GenConfig, rng: np.random.Generator, frame_index: int = 0,
                 split: str = "train") -> Tuple[Annotation, Optional[SceneFeatures]]:
    sample = sample_scene_with_gaze(cfg, rng, frame_index, split)
    return sample.annotation, sample.features


# ============== DATASET ==============

def split_sizes(n_frames: int, fractions: Dict[str, float]) -> Dict[str, int]:
    """Largest-remainder allocation of frames to splits (ties by split order)."""
    raw = {s: fractions[s] * n_frames for s in SPLITS}
    sizes = {s: int(math.floor(raw[s] + 1e-9)) for s in SPLITS}
    leftover = n_frames - sum(sizes.values())
    by_remainder = sorted(SPLITS, key=lambda s: (-(raw[s] - sizes[s]), SPLITS.index(s)))
    for s in by_remainder[:leftover]:
        sizes[s] += 1
    return sizes


def assign_splits(cfg: GenConfig) -> List[str]:
    """Deterministic shuffle of frame indices cut by split_fractions."""
    sizes = split_sizes(cfg.n_frames, cfg.split_fractions)
    perm = frame_rng(cfg.seed, _SPLIT_STREAM).permutation(cfg.n_frames)
    labels = [""] * cfg.n_frames
    start = 0
    for s in SPLITS:
        for idx in perm[start:start + sizes[s]]:
            labels[int(idx)] = s
        start += sizes[s]
    return labels


@monitor_stage('make_dataset', 'GEN')
def make_dataset(cfg: GenConfig, threads: int = 1, progress: bool = False) -> Dataset:
    """Generate cfg.n_frames scenes; identical cfg gives a byte-identical serialized dataset."""
    splits = assign_splits(cfg)

    def one(i: int) -> Annotation:
        return sample_scene(cfg, frame_rng(cfg.seed, i), frame_index=i, split=splits[i])[0]

    indices = range(cfg.n_frames)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            annotations = list(tqdm(pool.map(one, indices), total=cfg.n_frames, desc="gen", disable=not progress))
    else:
        annotations = [one(i) for i in tqdm(indices, desc="gen", disable=not progress)]

    dataset = Dataset.build(annotations, config_hash=cfg.config_hash(), seed=cfg.seed)
    logger.info("generated %d frames (hash %s, seed %d)", len(dataset), cfg.config_hash(), cfg.seed)
    return dataset
