import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sacf.errors import InvariantViolation, MalformedRecordError, MissingArtifactError
from sacf.scene_model import (
    BBox, Category, Dataset, SceneFeatures, box_cell_mask, cell_to_pixel, iou, load_dataset, pixel_to_cell,
    point_in_box, point_in_union, save_dataset,
)

from conftest import FACE, make_frame

BOX = BBox.from_list([0, 0, 10, 10])


def boxes():
    coords = st.floats(min_value=0, max_value=100, allow_nan=False)
    sizes = st.floats(min_value=0.5, max_value=50, allow_nan=False)
    return st.builds(lambda x, y, w, h: BBox(x_min=x, y_min=y, x_max=x + w, y_max=y + h), coords, coords, sizes, sizes)


# ============== GEOMETRY ==============

@pytest.mark.parametrize("point, inside", [((5, 5), True), ((10, 5), False), ((0, 0), True), ((5, 10), False)])
def test_point_in_box_is_half_open(point, inside):
    assert point_in_box(point, BOX) is inside


def test_iou_examples():
    assert iou(BOX, BOX) == 1.0
    assert iou(BOX, BBox.from_list([20, 20, 30, 30])) == 0.0
    assert iou(BOX, BBox.from_list([5, 0, 15, 10])) == pytest.approx(1 / 3)


def test_touching_boxes_do_not_overlap():
    assert iou(BOX, BBox.from_list([10, 0, 20, 10])) == 0.0
    assert not BOX.overlaps(BBox.from_list([10, 0, 20, 10]))


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == pytest.approx(iou(b, a))
    assert 0.0 <= iou(a, b) <= 1.0


def test_point_in_union():
    far = BBox.from_list([50, 50, 60, 60])
    assert point_in_union((5, 5), [BOX, far])
    assert not point_in_union((5, 5), [])
    assert point_in_union((55, 55), [BOX, far])


@pytest.mark.parametrize("values", [[5, 0, 1, 10], [0, 0, 10, float("inf")], [-1, 0, 10, 10]])
def test_invalid_boxes_rejected(values):
    with pytest.raises(ValueError):
        BBox.from_list(values)


def test_cell_pixel_mapping_inverts():
    p = cell_to_pixel((3.5, 1.5), (8, 16), (160, 80))
    assert p == (35.0, 15.0)
    assert pixel_to_cell(p, (8, 16), (160, 80)) == (3.5, 1.5)


def test_box_cell_mask_uses_cell_centres():
    mask = box_cell_mask([BBox.from_list([10, 0, 25, 10])], (8, 8), (80, 80))
    # centres 15 and 25: only column 1 qualifies, 25 sits on the open edge
    assert mask.sum() == 1
    assert mask[0, 1]


# ============== CATEGORIES ==============

def test_binary_projection():
    assert Category.FACE.binary() == 1
    assert Category.OBJECT.binary() == 0
    assert Category.PERSON_NON_FACE.binary() == 0
    with pytest.raises(InvariantViolation):
        Category.NONINCLUSIVE.binary()


# ============== FEATURES ==============

def test_features_are_read_only_and_validated():
    feats = SceneFeatures(np.zeros((4, 4, 6)))
    with pytest.raises(ValueError):
        feats.grid[0, 0, 0] = 1.0
    bad = np.zeros((4, 4, 6))
    bad[0, 0, 0] = 0.5
    with pytest.raises(InvariantViolation, match="features-mask-binary"):
        SceneFeatures(bad)
    with pytest.raises(InvariantViolation, match="features-shape"):
        SceneFeatures(np.zeros((4, 4, 5)))


# ============== ANNOTATIONS ==============

def test_face_target_outside_face_rejected():
    with pytest.raises(InvariantViolation) as exc:
        make_frame("bad-face", Category.FACE, target_point=(5.0, 75.0))
    assert exc.value.invariant == "face-target-in-face-box"
    assert exc.value.frame_id == "bad-face"


def test_noninclusive_target_may_leave_frame():
    frame = make_frame("ni", Category.NONINCLUSIVE, target_point=(500.0, -20.0))
    assert not frame.is_inclusive


def _write_records(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


def test_load_three_records(tmp_path, mixed_frames):
    path = tmp_path / "three.jsonl"
    _write_records(path, [f.to_record() for f in mixed_frames[:3]])
    dataset = load_dataset(path)
    assert len(dataset) == 3
    assert dataset.annotations[0] == mixed_frames[0]


def test_inverted_box_names_frame(tmp_path, mixed_frames):
    record = mixed_frames[1].to_record()
    record["child_head"] = [30, 0, 10, 10]
    path = tmp_path / "bad.jsonl"
    _write_records(path, [record])
    with pytest.raises(InvariantViolation) as exc:
        load_dataset(path)
    assert exc.value.frame_id == "obj-1"
    assert exc.value.invariant == "bbox-ordering"


def test_malformed_line_names_line_number(tmp_path, mixed_frames):
    path = tmp_path / "broken.jsonl"
    path.write_text(json.dumps(mixed_frames[0].to_record()) + "\n{not json\n", encoding="utf-8")
    with pytest.raises(MalformedRecordError, match="line 2"):
        load_dataset(path)


def test_unknown_fields_strict_vs_lenient(tmp_path, mixed_frames, caplog):
    record = dict(mixed_frames[0].to_record(), annotator="A")
    path = tmp_path / "extra.jsonl"
    _write_records(path, [record])
    with pytest.raises(InvariantViolation, match="schema-unknown-fields"):
        load_dataset(path, strict=True)
    assert len(load_dataset(path)) == 1
    assert "annotator" in caplog.text


def test_missing_dataset(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_dataset(tmp_path / "nope")


def test_save_load_directory(tmp_path, mixed_frames):
    frames = [f.model_copy(update={"split": s}) for f, s in zip(mixed_frames, ["train", "train", "val", "test", "test"])]
    dataset = Dataset.build(frames, config_hash="abc", seed=3)
    written = save_dataset(dataset, tmp_path / "data")
    assert {p.name for p in written} == {"train.jsonl", "val.jsonl", "test.jsonl", "metadata.json"}

    loaded = load_dataset(tmp_path / "data")
    assert loaded.metadata == dataset.metadata
    assert sorted(a.frame_id for a in loaded.annotations) == sorted(a.frame_id for a in frames)
    assert loaded.split("test").metadata.split_counts == {"train": 0, "val": 0, "test": 2}


def test_duplicate_frame_ids_rejected(mixed_frames):
    with pytest.raises(InvariantViolation, match="frame-id-unique"):
        Dataset.build([mixed_frames[0], mixed_frames[0]])


def test_filter_noninclusive(tmp_path, mixed_frames):
    frames = mixed_frames[:2] + [make_frame("ni", Category.NONINCLUSIVE, target_point=(-5.0, 5.0))]
    save_dataset(Dataset.build(frames), tmp_path / "mixed.jsonl")
    assert len(load_dataset(tmp_path / "mixed.jsonl")) == 3
    assert len(load_dataset(tmp_path / "mixed.jsonl", filter_noninclusive=True)) == 2


def test_frame_without_faces_has_empty_union():
    frame = make_frame("lonely", Category.OBJECT, faces=())
    assert frame.adult_faces == ()
    assert not point_in_union(FACE.center, frame.adult_faces)
