import math

import numpy as np
import pytest

from sacf.errors import PlacementError
from sacf.scene_model import (
    FACE_MASK, GAZE_ALIGNMENT, HEAD_DISTANCE, OBJECT_MASK, PNF_MASK, Category, box_cell_mask, load_dataset,
    point_in_box, save_dataset,
)
from sacf.synth_gen import (
    REFERENCE_SPLITS, GenConfig, assign_splits, frame_rng, make_dataset, sample_scene, sample_scene_with_gaze,
    split_sizes,
)


def test_reference_split_sizes():
    sizes = split_sizes(16582, GenConfig().split_fractions)
    assert sizes == REFERENCE_SPLITS


def test_exact_fractions():
    cfg = GenConfig(n_frames=10, split_fractions={"train": 0.8, "val": 0.1, "test": 0.1})
    assert split_sizes(cfg.n_frames, cfg.split_fractions) == {"train": 8, "val": 1, "test": 1}
    labels = assign_splits(cfg)
    assert labels.count("train") == 8 and labels.count("val") == 1 and labels.count("test") == 1


@pytest.mark.parametrize("field, value", [
    ("n_frames", 0),
    ("split_fractions", {"train": 0.5, "val": 0.1, "test": 0.1}),
    ("category_prior", {"face": 0.5, "object": 0.6}),
    ("feature_dim", 5),
    ("n_faces_range", (2, 1)),
])
def test_invalid_configs(field, value):
    with pytest.raises(ValueError):
        GenConfig(**{field: value})


def test_frame_dimensions_follow_cell_size():
    cfg = GenConfig(n_frames=3)
    assert cfg.frame_size == (224, 224)
    ann, feats = sample_scene(cfg, frame_rng(0, 0))
    assert (ann.width, ann.height) == (224, 224)
    assert feats.shape == (32, 32)


def test_degenerate_face_prior():
    cfg = GenConfig(n_frames=30, category_prior={"face": 1.0}, seed=5)
    dataset = make_dataset(cfg)
    assert all(a.target_category is Category.FACE for a in dataset.annotations)
    for a in dataset.annotations:
        assert any(point_in_box(a.target_point, f) for f in a.adult_faces)


def test_noiseless_gaze_points_at_target():
    cfg = GenConfig(n_frames=1, gaze_noise_sigma=0.0)
    for i in range(20):
        sample = sample_scene_with_gaze(cfg, frame_rng(1, i), frame_index=i)
        a = sample.annotation
        vx = a.target_point[0] / cfg.cell_size_px - sample.head_center_cells[0]
        vy = a.target_point[1] / cfg.cell_size_px - sample.head_center_cells[1]
        norm = math.hypot(vx, vy)
        assert sample.gaze_direction[0] == pytest.approx(vx / norm, abs=1e-12)
        assert sample.gaze_direction[1] == pytest.approx(vy / norm, abs=1e-12)


def test_feature_grid_matches_geometry():
    cfg = GenConfig(n_frames=1)
    for i in range(10):
        sample = sample_scene_with_gaze(cfg, frame_rng(2, i), frame_index=i)
        a, feats = sample.annotation, sample.features
        face_cells = box_cell_mask(a.adult_faces, feats.shape, a.frame_size)
        assert np.array_equal(feats.channel(FACE_MASK) == 1.0, face_cells)
        assert feats.channel(FACE_MASK).sum() > 0
        assert feats.channel(OBJECT_MASK).sum() > 0
        assert feats.channel(PNF_MASK).sum() > 0
        assert np.all(np.abs(feats.channel(GAZE_ALIGNMENT)) <= 1.0)
        assert np.all((feats.channel(HEAD_DISTANCE) >= 0) & (feats.channel(HEAD_DISTANCE) <= 1))


def test_target_inside_chosen_entity():
    cfg = GenConfig(n_frames=1, category_prior={"face": 0.34, "object": 0.33, "person_non_face": 0.33})
    for i in range(30):
        a, _ = sample_scene(cfg, frame_rng(3, i), frame_index=i)
        assert a.target_box is not None
        assert point_in_box(a.target_point, a.target_box)


def test_crowded_config_names_limit():
    cfg = GenConfig(grid_h=8, grid_w=8, n_frames=1, max_retries=5)
    with pytest.raises(PlacementError, match="n_faces_range"):
        sample_scene(cfg, frame_rng(0, 0))


def test_noninclusive_frames_when_requested():
    cfg = GenConfig(n_frames=40, include_noninclusive=1.0, seed=2)
    dataset = make_dataset(cfg)
    assert all(a.target_category is Category.NONINCLUSIVE for a in dataset.annotations)
    assert all(a.target_box is None for a in dataset.annotations)


def test_metadata_records_hash_and_seed(tiny_cfg, tiny_dataset):
    assert tiny_dataset.metadata.config_hash == tiny_cfg.config_hash()
    assert tiny_dataset.metadata.seed == 7
    assert sum(tiny_dataset.metadata.split_counts.values()) == 60


def test_same_seed_same_bytes(tmp_path, tiny_cfg, tiny_dataset):
    save_dataset(tiny_dataset, tmp_path / "a")
    save_dataset(make_dataset(tiny_cfg, threads=4), tmp_path / "b")
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "metadata.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    reloaded = load_dataset(tmp_path / "a")
    assert reloaded.by_frame_id()["f000000"] == tiny_dataset.by_frame_id()["f000000"]


def test_different_seed_differs(tiny_cfg, tiny_dataset):
    other = make_dataset(tiny_cfg.model_copy(update={"seed": 8}))
    assert [a.target_point for a in other.annotations] != [a.target_point for a in tiny_dataset.annotations]


@pytest.mark.slow
def test_default_face_fraction_tracks_prior():
    dataset = make_dataset(GenConfig(seed=0), threads=4)
    assert dataset.metadata.split_counts == REFERENCE_SPLITS
    faces = dataset.metadata.category_counts["face"]
    assert abs(faces / len(dataset) - 0.066) <= 0.005
    for split in ("train", "val", "test"):
        part = dataset.split(split)
        assert abs(part.metadata.category_counts["face"] / len(part) - 0.066) <= 0.015
