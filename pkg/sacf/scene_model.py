"""
Scene Model
Frame geometry, annotations, feature grids and JSONL persistence

Boxes are half-open pixel intervals [x_min, x_max) x [y_min, y_max).
Every type here is immutable once built; all helpers are pure.
"""

import json
import logging
import math
from collections import Counter
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import EmptySplitError, InputError, InvariantViolation, MalformedRecordError, MissingArtifactError

logger = logging.getLogger(__name__)

Point = Tuple[float, float]

SPLITS = ("train", "val", "test")
FEATURE_DIM = 6

# Feature channel layout of SceneFeatures
FACE_MASK, OBJECT_MASK, PNF_MASK, HEAD_MASK, GAZE_ALIGNMENT, HEAD_DISTANCE = range(FEATURE_DIM)
CHANNEL_NAMES = ("face_mask", "object_mask", "pnf_mask", "head_mask", "gaze_alignment", "head_distance")

RECORD_FIELDS = (
    "frame_id", "clip_id", "width", "height", "child_head", "adult_faces",
    "target_point", "target_box", "target_category", "split", "features",
)

# Stored feature precision (decimal places); keeps JSONL round-trips exact.
FEATURE_DECIMALS = 4


# ============== GEOMETRY ==============

class BBox(BaseModel):
    """Axis-aligned pixel box, half-open on the max edges."""

    model_config = ConfigDict(frozen=True)

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @model_validator(mode="after")
    def _check_geometry(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError("bbox-finite: coordinates must be finite")
        if min(coords) < 0:
            raise ValueError("bbox-nonnegative: coordinates must be >= 0")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("bbox-ordering: requires x_min < x_max and y_min < y_max")
        return self

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BBox":
        if len(values) != 4:
            raise ValueError(f"bbox-arity: expected 4 numbers, got {len(values)}")
        x_min, y_min, x_max, y_max = (float(v) for v in values)
        return cls(x_min=x_min, y_min=y_min, x_max=x_max, y_max=y_max)

    def to_list(self) -> List[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> Point:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def inside_frame(self, width: float, height: float) -> bool:
        return self.x_max <= width and self.y_max <= height

    def overlaps(self, other: "BBox") -> bool:
        return intersection_area(self, other) > 0.0


def point_in_box(p: Point, b: BBox) -> bool:
    """True iff x_min <= x < x_max and y_min <= y < y_max."""
    x, y = p
    return b.x_min <= x < b.x_max and b.y_min <= y < b.y_max


def point_in_union(p: Point, boxes: Iterable[BBox]) -> bool:
    """True iff the point lies in at least one box; false for no boxes."""
    return any(point_in_box(p, b) for b in boxes)


def intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def cell_centers_px(grid_shape: Tuple[int, int], frame_size: Tuple[float, float]) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel x-coordinates of column centres and y-coordinates of row centres."""
    grid_h, grid_w = grid_shape
    width, height = frame_size
    xs = (np.arange(grid_w) + 0.5) * (width / grid_w)
    ys = (np.arange(grid_h) + 0.5) * (height / grid_h)
    return xs, ys


def cell_to_pixel(point_cells: Point, grid_shape: Tuple[int, int], frame_size: Tuple[float, float]) -> Point:
    """Map a point in cell units (x=col, y=row) to pixels."""
    grid_h, grid_w = grid_shape
    width, height = frame_size
    return (point_cells[0] * width / grid_w, point_cells[1] * height / grid_h)


def pixel_to_cell(point_px: Point, grid_shape: Tuple[int, int], frame_size: Tuple[float, float]) -> Point:
    grid_h, grid_w = grid_shape
    width, height = frame_size
    return (point_px[0] * grid_w / width, point_px[1] * grid_h / height)


def box_cell_mask(boxes: Iterable[BBox], grid_shape: Tuple[int, int], frame_size: Tuple[float, float]) -> np.ndarray:
    """Boolean grid marking cells whose centre lies in the union of the boxes."""
    xs, ys = cell_centers_px(grid_shape, frame_size)
    mask = np.zeros(grid_shape, dtype=bool)
    for b in boxes:
        in_x = (xs >= b.x_min) & (xs < b.x_max)
        in_y = (ys >= b.y_min) & (ys < b.y_max)
        mask |= np.outer(in_y, in_x)
    return mask


# ============== CATEGORIES ==============

class Category(str, Enum):
    OBJECT = "object"
    FACE = "face"
    PERSON_NON_FACE = "person_non_face"
    NONINCLUSIVE = "noninclusive"

    def binary(self) -> int:
        """Face -> 1, Object/PersonNonFace -> 0; Noninclusive has no projection."""
        if self is Category.NONINCLUSIVE:
            raise InvariantViolation("binary-projection", "Noninclusive frames have no Face/Not-face label")
        return 1 if self is Category.FACE else 0

    @property
    def label(self) -> str:
        return {
            Category.OBJECT: "Object",
            Category.FACE: "Face",
            Category.PERSON_NON_FACE: "PersonNonFace",
            Category.NONINCLUSIVE: "Noninclusive",
        }[self]


CATEGORY_ORDER = (Category.OBJECT, Category.FACE, Category.PERSON_NON_FACE, Category.NONINCLUSIVE)


# ============== FEATURE GRID ==============

class SceneFeatures:
    """Read-only H x W x F feature grid standing in for the encoded image."""

    __slots__ = ("_grid",)

    def __init__(self, grid, validate: bool = True):
        arr = np.array(grid, dtype=np.float32, copy=True)
        if arr.ndim != 3 or arr.shape[2] != FEATURE_DIM:
            raise InvariantViolation("features-shape", f"expected H x W x {FEATURE_DIM}, got {arr.shape}")
        arr.setflags(write=False)
        self._grid = arr
        if validate:
            self.validate()

    @property
    def grid(self) -> np.ndarray:
        return self._grid

    @property
    def shape(self) -> Tuple[int, int]:
        return self._grid.shape[0], self._grid.shape[1]

    @property
    def feature_dim(self) -> int:
        return self._grid.shape[2]

    def channel(self, index: int) -> np.ndarray:
        return self._grid[:, :, index]

    def validate(self):
        g = self._grid
        if not np.all(np.isfinite(g)):
            raise InvariantViolation("features-finite", "feature grid contains non-finite values")
        masks = g[:, :, [FACE_MASK, OBJECT_MASK, PNF_MASK, HEAD_MASK]]
        if not np.all((masks == 0.0) | (masks == 1.0)):
            raise InvariantViolation("features-mask-binary", "mask channels must be 0 or 1")
        align = g[:, :, GAZE_ALIGNMENT]
        if align.min() < -1.0 or align.max() > 1.0:
            raise InvariantViolation("features-alignment-range", "gaze_alignment must lie in [-1, 1]")
        dist = g[:, :, HEAD_DISTANCE]
        if dist.min() < 0.0 or dist.max() > 1.0:
            raise InvariantViolation("features-distance-range", "head_distance must lie in [0, 1]")

    def with_grid(self, grid: np.ndarray) -> "SceneFeatures":
        """New features from a modified grid (augmentations may leave [-1,1] masks scaled)."""
        return SceneFeatures(grid, validate=False)

    def to_nested(self) -> list:
        return np.round(self._grid.astype(np.float64), FEATURE_DECIMALS).tolist()

    def __eq__(self, other):
        if not isinstance(other, SceneFeatures):
            return NotImplemented
        return self._grid.shape == other._grid.shape and bool(np.array_equal(self._grid, other._grid))

    def __repr__(self):
        h, w = self.shape
        return f"SceneFeatures({h}x{w}x{self.feature_dim})"


# ============== ANNOTATION ==============

class Annotation(BaseModel):
    """One frame's geometry and gaze label."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    frame_id: str
    clip_id: str
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    child_head: BBox
    adult_faces: Tuple[BBox, ...] = ()
    target_point: Tuple[float, float]
    target_box: Optional[BBox] = None
    target_category: Category
    split: str
    features: Optional[SceneFeatures] = None

    @field_validator("split")
    @classmethod
    def _check_split(cls, v):
        if v not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {v!r}")
        return v

    @model_validator(mode="after")
    def _check_invariants(self):
        fid = self.frame_id
        if not self.child_head.inside_frame(self.width, self.height):
            raise InvariantViolation("head-inside-frame", "child_head extends past the frame", frame_id=fid)
        for k, face in enumerate(self.adult_faces):
            if not face.inside_frame(self.width, self.height):
                raise InvariantViolation("face-inside-frame", f"adult_faces[{k}] extends past the frame", frame_id=fid)
        if not all(math.isfinite(c) for c in self.target_point):
            raise InvariantViolation("target-finite", "target_point must be finite", frame_id=fid)
        if self.target_category is not Category.NONINCLUSIVE:
            frame = BBox(x_min=0, y_min=0, x_max=self.width, y_max=self.height)
            if not point_in_box(self.target_point, frame):
                raise InvariantViolation("target-inside-frame", f"target_point {self.target_point} outside frame", frame_id=fid)
        if self.target_category is Category.FACE and not point_in_union(self.target_point, self.adult_faces):
            raise InvariantViolation("face-target-in-face-box", "Face target outside every adult face box", frame_id=fid)
        if self.target_box is not None and not point_in_box(self.target_point, self.target_box):
            raise InvariantViolation("target-in-target-box", "target_point outside target_box", frame_id=fid)
        return self

    @property
    def frame_size(self) -> Tuple[int, int]:
        return (self.width, self.height)

    @property
    def is_inclusive(self) -> bool:
        return self.target_category is not Category.NONINCLUSIVE

    def binary_label(self) -> int:
        return self.target_category.binary()

    def to_record(self) -> Dict:
        return {
            "frame_id": self.frame_id,
            "clip_id": self.clip_id,
            "width": self.width,
            "height": self.height,
            "child_head": self.child_head.to_list(),
            "adult_faces": [f.to_list() for f in self.adult_faces],
            "target_point": [float(self.target_point[0]), float(self.target_point[1])],
            "target_box": self.target_box.to_list() if self.target_box is not None else None,
            "target_category": self.target_category.value,
            "split": self.split,
            "features": self.features.to_nested() if self.features is not None else None,
        }

    @classmethod
    def from_record(cls, record: Dict, strict: bool = False) -> "Annotation":
        frame_id = record.get("frame_id") if isinstance(record, dict) else None
        if not isinstance(record, dict):
            raise InvariantViolation("record-object", "each line must be a JSON object")
        unknown = sorted(set(record) - set(RECORD_FIELDS))
        if unknown:
            if strict:
                raise InvariantViolation("schema-unknown-fields", f"unknown fields {unknown}", frame_id=frame_id)
            logger.warning("frame %r: ignoring unknown fields %s", frame_id, unknown)
        missing = [f for f in RECORD_FIELDS if f not in record]
        if missing:
            raise InvariantViolation("schema-missing-fields", f"missing fields {missing}", frame_id=frame_id)
        try:
            features = record["features"]
            return cls(
                frame_id=record["frame_id"],
                clip_id=record["clip_id"],
                width=record["width"],
                height=record["height"],
                child_head=BBox.from_list(record["child_head"]),
                adult_faces=tuple(BBox.from_list(f) for f in record["adult_faces"]),
                target_point=tuple(float(v) for v in record["target_point"]),
                target_box=BBox.from_list(record["target_box"]) if record["target_box"] is not None else None,
                target_category=Category(record["target_category"]),
                split=record["split"],
                features=SceneFeatures(features) if features is not None else None,
            )
        except InvariantViolation as e:
            if e.frame_id is None:
                raise InvariantViolation(e.invariant, e.detail, frame_id=frame_id) from e
            raise
        except (ValidationError, ValueError, TypeError) as e:
            raise InvariantViolation(_invariant_name(e), _first_error(e), frame_id=frame_id) from e


def _first_error(e: Exception) -> str:
    if isinstance(e, ValidationError):
        errs = e.errors()
        return errs[0]["msg"] if errs else str(e)
    return str(e)


def _invariant_name(e: Exception) -> str:
    msg = _first_error(e)
    for token in ("bbox-ordering", "bbox-finite", "bbox-nonnegative", "bbox-arity"):
        if token in msg:
            return token
    return "record-schema"


# ============== DATASET ==============

class DatasetMetadata(BaseModel):
    config_hash: Optional[str] = None
    seed: Optional[int] = None
    split_counts: Dict[str, int] = Field(default_factory=dict)
    category_counts: Dict[str, int] = Field(default_factory=dict)


def compute_counts(annotations: Sequence[Annotation]) -> Tuple[Dict[str, int], Dict[str, int]]:
    splits = Counter(a.split for a in annotations)
    cats = Counter(a.target_category.value for a in annotations)
    split_counts = {s: splits.get(s, 0) for s in SPLITS}
    category_counts = {c.value: cats.get(c.value, 0) for c in CATEGORY_ORDER}
    return split_counts, category_counts


class Dataset(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    annotations: Tuple[Annotation, ...]
    metadata: DatasetMetadata

    @model_validator(mode="after")
    def _check_dataset(self):
        seen = set()
        for a in self.annotations:
            if a.frame_id in seen:
                raise InvariantViolation("frame-id-unique", "duplicate frame_id", frame_id=a.frame_id)
            seen.add(a.frame_id)
        split_counts, category_counts = compute_counts(self.annotations)
        if self.metadata.split_counts and self.metadata.split_counts != split_counts:
            raise InvariantViolation(
                "metadata-counts", f"split counts {self.metadata.split_counts} != recomputed {split_counts}"
            )
        if self.metadata.category_counts and self.metadata.category_counts != category_counts:
            raise InvariantViolation(
                "metadata-counts", f"category counts {self.metadata.category_counts} != recomputed {category_counts}"
            )
        return self

    @classmethod
    def build(cls, annotations: Iterable[Annotation], config_hash: Optional[str] = None,
              seed: Optional[int] = None) -> "Dataset":
        annotations = tuple(annotations)
        split_counts, category_counts = compute_counts(annotations)
        meta = DatasetMetadata(config_hash=config_hash, seed=seed,
                               split_counts=split_counts, category_counts=category_counts)
        return cls(annotations=annotations, metadata=meta)

    def __len__(self):
        return len(self.annotations)

    def split(self, name: str) -> "Dataset":
        """Subset holding one split; metadata keeps provenance, counts are recomputed."""
        if name not in SPLITS:
            raise InputError(f"unknown split {name!r}; expected one of {SPLITS}")
        return Dataset.build((a for a in self.annotations if a.split == name),
                             self.metadata.config_hash, self.metadata.seed)

    def require_split(self, name: str) -> "Dataset":
        subset = self.split(name).inclusive()
        if len(subset) == 0:
            raise EmptySplitError(f"split {name!r} is empty after filtering Noninclusive frames")
        return subset

    def inclusive(self) -> "Dataset":
        """Drop Noninclusive frames."""
        if all(a.is_inclusive for a in self.annotations):
            return self
        return Dataset.build((a for a in self.annotations if a.is_inclusive),
                             self.metadata.config_hash, self.metadata.seed)

    def by_frame_id(self) -> Dict[str, Annotation]:
        return {a.frame_id: a for a in self.annotations}

    @property
    def grid_shape(self) -> Optional[Tuple[int, int]]:
        for a in self.annotations:
            if a.features is not None:
                return a.features.shape
        return None


# ============== PERSISTENCE ==============

def _dumps(record: Dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def _meta_sidecar(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def _read_jsonl(path: Path, strict: bool) -> List[Annotation]:
    annotations = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRecordError(str(path), line_number, e.msg) from e
            annotations.append(Annotation.from_record(record, strict=strict))
    return annotations


def _read_metadata(path: Path) -> Optional[DatasetMetadata]:
    if not path.exists():
        return None
    try:
        return DatasetMetadata.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise InputError(f"{path}: invalid dataset metadata ({_first_error(e)})") from e


def load_dataset(path: Union[str, Path], strict: bool = False, filter_noninclusive: bool = False) -> Dataset:
    """Load a dataset from a .jsonl file (with optional .meta.json sidecar) or a split directory."""
    path = Path(path)
    if path.is_dir():
        files = [path / f"{s}.jsonl" for s in SPLITS if (path / f"{s}.jsonl").exists()]
        if not files:
            raise MissingArtifactError(f"{path}: no train/val/test .jsonl files found")
        meta_path = path / "metadata.json"
    elif path.exists():
        files = [path]
        meta_path = _meta_sidecar(path)
    else:
        raise MissingArtifactError(f"dataset not found: {path}")

    annotations: List[Annotation] = []
    for f in files:
        annotations.extend(_read_jsonl(f, strict))

    meta = _read_metadata(meta_path)
    if meta is not None and len(files) < len(SPLITS) and path.is_dir():
        # partial directory; counts cannot match the full metadata
        meta = meta.model_copy(update={"split_counts": {}, "category_counts": {}})
    dataset = Dataset(annotations=tuple(annotations), metadata=meta or DatasetMetadata())
    if not dataset.metadata.split_counts:
        dataset = Dataset.build(dataset.annotations, dataset.metadata.config_hash, dataset.metadata.seed)
    logger.info("loaded %d frames from %s", len(dataset), path)

    if filter_noninclusive:
        dropped = sum(1 for a in dataset.annotations if not a.is_inclusive)
        if dropped:
            logger.info("filtered %d Noninclusive frames", dropped)
        dataset = dataset.inclusive()
    return dataset


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> List[Path]:
    """Write a dataset; `.jsonl` path -> single file + sidecar, otherwise a split directory."""
    path = Path(path)
    written: List[Path] = []
    meta_json = dataset.metadata.model_dump_json(indent=2)
    if path.suffix == ".jsonl":
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for a in dataset.annotations:
                f.write(_dumps(a.to_record()) + "\n")
        sidecar = _meta_sidecar(path)
        sidecar.write_text(meta_json + "\n", encoding="utf-8")
        written.extend([path, sidecar])
    else:
        path.mkdir(parents=True, exist_ok=True)
        for s in SPLITS:
            split_path = path / f"{s}.jsonl"
            with open(split_path, "w", encoding="utf-8", newline="\n") as f:
                for a in dataset.annotations:
                    if a.split == s:
                        f.write(_dumps(a.to_record()) + "\n")
            written.append(split_path)
        meta_path = path / "metadata.json"
        meta_path.write_text(meta_json + "\n", encoding="utf-8")
        written.append(meta_path)
    logger.info("saved %d frames to %s", len(dataset), path)
    return written
