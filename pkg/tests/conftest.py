"""
Shared fixtures: tiny generated datasets and hand-built frames on an 8 x 8 grid
"""

import os
from typing import Optional, Sequence

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sacf.heatmap_core import gaussian_gt_heatmap
from sacf.scene_model import (
    FACE_MASK, FEATURE_DIM, GAZE_ALIGNMENT, Annotation, BBox, Category, SceneFeatures, pixel_to_cell,
)
from sacf.synth_gen import GenConfig, make_dataset

settings.register_profile("default", max_examples=100, deadline=None)
settings.register_profile("fast", max_examples=20, deadline=None)
settings.register_profile("ci", max_examples=300, deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))

# Hand-built frames: 8 x 8 cells of 10 px -> 80 x 80 pixels
CELL_PX = 10
GRID = (8, 8)
FRAME = (80, 80)
HEAD = BBox.from_list([0, 0, 20, 20])
FACE = BBox.from_list([40, 0, 60, 20])
OBJECT = BBox.from_list([20, 60, 40, 80])
TORSO = BBox.from_list([40, 20, 60, 50])


def zero_features(grid=GRID) -> SceneFeatures:
    return SceneFeatures(np.zeros(grid + (FEATURE_DIM,)))


def make_frame(frame_id: str, category: Category, target_point=None, target_box: Optional[BBox] = None,
               faces: Sequence[BBox] = (FACE,), split: str = "test", features: Optional[SceneFeatures] = None,
               with_features: bool = True) -> Annotation:
    """A frame whose default targets sit on cell centres."""
    if target_point is None:
        target_box = target_box or {Category.FACE: FACE, Category.OBJECT: OBJECT,
                                    Category.PERSON_NON_FACE: TORSO}[category]
        target_point = (target_box.x_min + CELL_PX / 2, target_box.y_min + CELL_PX / 2)
    if features is None and with_features:
        features = zero_features()
    return Annotation(
        frame_id=frame_id, clip_id="c0", width=FRAME[0], height=FRAME[1], child_head=HEAD,
        adult_faces=tuple(faces), target_point=target_point, target_box=target_box,
        target_category=category, split=split, features=features,
    )


def face_features(alignment: float = 0.0) -> SceneFeatures:
    grid = np.zeros(GRID + (FEATURE_DIM,))
    grid[0:2, 4:6, FACE_MASK] = 1.0
    grid[:, :, GAZE_ALIGNMENT] = alignment
    return SceneFeatures(grid)


class TargetStubExpert:
    """Expert that always returns the ground-truth heatmap of the frame."""

    def predict(self, features, annotation):
        target = pixel_to_cell(annotation.target_point, features.shape, annotation.frame_size)
        return gaussian_gt_heatmap(target, 1.0, features.shape)


class FixedStubExpert:
    """Expert whose heatmap always peaks at one pixel location."""

    def __init__(self, point_px):
        self.point_px = point_px

    def predict(self, features, annotation):
        target = pixel_to_cell(self.point_px, features.shape, annotation.frame_size)
        return gaussian_gt_heatmap(target, 1.0, features.shape)


TINY_PRIOR = {"face": 0.4, "object": 0.4, "person_non_face": 0.2}


@pytest.fixture(scope="session")
def tiny_cfg() -> GenConfig:
    return GenConfig(n_frames=60, seed=7, category_prior=TINY_PRIOR)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_cfg):
    return make_dataset(tiny_cfg)


@pytest.fixture
def mixed_frames():
    return [
        make_frame("face-1", Category.FACE),
        make_frame("obj-1", Category.OBJECT),
        make_frame("pnf-1", Category.PERSON_NON_FACE),
        make_frame("face-2", Category.FACE, target_point=(55.0, 15.0), target_box=FACE),
        make_frame("obj-2", Category.OBJECT, target_point=(35.0, 75.0), target_box=OBJECT),
    ]
