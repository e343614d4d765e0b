import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sacf.errors import DimensionMismatchError, EmptySplitError, MissingArtifactError, TrainingDivergedError
from sacf.experts import (
    AugConfig, ExpertHyper, ExpertKind, ExpertMeta, ExpertParams, LogisticExpert, aug_social, fit_logistic_heatmap,
    gradient_step, inference_view, keep_region, load_expert, mean_loss, predict_heatmap, save_expert,
    train_expert, training_tensors,
)
from sacf.heatmap_core import argmax_cell, logit
from sacf.scene_model import (
    FACE_MASK, FEATURE_DIM, GAZE_ALIGNMENT, HEAD_MASK, OBJECT_MASK, PNF_MASK, Category, Dataset, SceneFeatures,
)

from conftest import FACE, FRAME, GRID, make_frame


def make_params(w, b, grid=GRID, kind=ExpertKind.AGNOSTIC) -> ExpertParams:
    meta = ExpertMeta(grid_h=grid[0], grid_w=grid[1], feature_dim=len(w), seed=0, epochs=0, learning_rate=0.0,
                      kind=kind)
    return ExpertParams(kind=kind, w=tuple(w), b=b, meta=meta)


def random_features(seed, grid=GRID) -> SceneFeatures:
    rng = np.random.default_rng(seed)
    g = np.zeros(grid + (FEATURE_DIM,))
    for ch in (FACE_MASK, OBJECT_MASK, PNF_MASK, HEAD_MASK):
        g[:, :, ch] = rng.integers(0, 2, grid)
    g[:, :, GAZE_ALIGNMENT] = rng.uniform(-1, 1, grid)
    g[:, :, 5] = rng.uniform(0, 1, grid)
    return SceneFeatures(g)


# ============== PREDICTION ==============

def test_zero_model_is_uniform_half():
    h = predict_heatmap(make_params([0.0] * 6, 0.0), random_features(0))
    assert h.shape == GRID
    assert np.all(h == 0.5)


def test_large_alignment_weight_picks_max_alignment_cell():
    feats = random_features(1)
    h = predict_heatmap(make_params([0, 0, 0, 0, 10.0, 0], 0.0), feats)
    align = feats.channel(GAZE_ALIGNMENT)
    assert argmax_cell(h) == np.unravel_index(int(np.argmax(align)), align.shape)


def test_prediction_matches_per_cell_reference():
    rng = np.random.default_rng(5)
    w, b = rng.normal(size=6), float(rng.normal())
    feats = random_features(2)
    h = predict_heatmap(make_params(w, b), feats)
    for i in range(GRID[0]):
        for j in range(GRID[1]):
            z = sum(float(w[k]) * float(feats.grid[i, j, k]) for k in range(6)) + b
            assert h[i, j] == pytest.approx(1 / (1 + math.exp(-z)), abs=1e-12)


def test_prediction_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        predict_heatmap(make_params([0.0] * 6, 0.0, grid=(4, 4)), random_features(0))


# ============== AUGMENTATION ==============

def test_identity_augmentation_returns_input():
    feats = random_features(3)
    out = aug_social(feats, [FACE], None, AugConfig(beta=1.0, blur_kernel=1), FRAME)
    assert out == feats


def test_full_suppression_without_faces():
    out = aug_social(random_features(4), [], None, AugConfig(beta=0.0, blur_kernel=3), FRAME)
    for ch in (OBJECT_MASK, PNF_MASK, GAZE_ALIGNMENT):
        assert np.all(out.channel(ch) == 0.0)


@given(st.floats(0.0, 1.0), st.sampled_from([1, 3, 5]), st.integers(0, 50))
def test_face_cells_unchanged(beta, kernel, seed):
    feats = random_features(seed)
    out = aug_social(feats, [FACE], None, AugConfig(beta=beta, blur_kernel=kernel), FRAME)
    face_cells = keep_region(GRID, [FACE], FRAME)
    assert face_cells.sum() == 4
    assert np.array_equal(out.grid[face_cells], feats.grid[face_cells])


def test_untouched_channels_survive_augmentation():
    feats = random_features(6)
    out = aug_social(feats, [], None, AugConfig(beta=0.0), FRAME)
    for ch in (FACE_MASK, HEAD_MASK, 5):
        assert np.array_equal(out.channel(ch), feats.channel(ch))


def test_keep_disk_around_target():
    keep = keep_region(GRID, [], FRAME, keep_center=(35.0, 35.0), keep_radius=1.0)
    assert keep[3, 3]
    assert keep.sum() == 5


def test_inference_view_keeps_only_faces():
    frame = make_frame("v", Category.FACE, features=random_features(7))
    view = inference_view(frame.features, frame, AugConfig(beta=0.0, blur_kernel=1))
    outside = ~keep_region(GRID, [FACE], FRAME)
    assert np.all(view.channel(OBJECT_MASK)[outside] == 0.0)


# ============== TRAINING ==============

def test_single_step_by_hand():
    x = np.zeros((1, 2, 2, 6))
    x[0, 0, 0, 0] = 1.0
    g = np.array([[[1.0, 0.0], [0.0, 0.0]]])
    w, b, loss = gradient_step(np.zeros(6), 0.0, x, g, learning_rate=1.0)
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    # grad_w0 = (0.5 - 1) / 4, grad_b = (-0.5 + 3 * 0.5) / 4
    assert w[0] == pytest.approx(0.125)
    assert np.all(w[1:] == 0.0)
    assert b == pytest.approx(-0.25)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    x = rng.uniform(-1, 1, (3, 4, 4, 6))
    g = rng.uniform(0, 1, (3, 4, 4))
    w, b = rng.normal(scale=0.3, size=6), 0.1
    w_new, b_new, _ = gradient_step(w, b, x, g, learning_rate=1.0)
    grad_w, grad_b = w - w_new, b - b_new
    h = 1e-6
    for k in range(6):
        up, down = w.copy(), w.copy()
        up[k] += h
        down[k] -= h
        numeric = (mean_loss(up, b, x, g) - mean_loss(down, b, x, g)) / (2 * h)
        assert numeric == pytest.approx(grad_w[k], rel=1e-4, abs=1e-9)
    numeric_b = (mean_loss(w, b + h, x, g) - mean_loss(w, b - h, x, g)) / (2 * h)
    assert numeric_b == pytest.approx(grad_b, rel=1e-4, abs=1e-9)


def test_zero_learning_rate_keeps_initialization():
    rng = np.random.default_rng(2)
    x, g = rng.uniform(0, 1, (2, 4, 4, 6)), rng.uniform(0, 1, (2, 4, 4))
    w, b, history = fit_logistic_heatmap(x, g, ExpertHyper(epochs=5, learning_rate=0.0))
    assert np.all(w == 0.0)
    assert b == logit(float(g.mean()))
    assert len(history) == 6


def test_non_finite_loss_names_epoch():
    x = np.full((1, 2, 2, 6), np.nan)
    with pytest.raises(TrainingDivergedError, match="epoch 0"):
        fit_logistic_heatmap(x, np.zeros((1, 2, 2)), ExpertHyper(epochs=3))


def test_minibatch_training_is_deterministic():
    rng = np.random.default_rng(4)
    x, g = rng.uniform(0, 1, (6, 4, 4, 6)), rng.uniform(0, 1, (6, 4, 4))
    hyper = ExpertHyper(epochs=4, batch_size=2, seed=3)
    a = fit_logistic_heatmap(x, g, hyper)
    b = fit_logistic_heatmap(x, g, hyper)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1] and a[2] == b[2]


def test_empty_training_split():
    with pytest.raises(EmptySplitError):
        train_expert(Dataset.build([]), ExpertKind.AGNOSTIC)


def test_agnostic_training_beats_zero_model(tiny_dataset):
    train = tiny_dataset.require_split("train")
    params = train_expert(train, ExpertKind.AGNOSTIC, ExpertHyper(epochs=40))
    x, g = training_tensors(train, ExpertKind.AGNOSTIC, AugConfig(), params.meta.sigma)
    assert params.meta.loss_history[-1] < mean_loss(np.zeros(6), 0.0, x, g)
    assert params.meta.loss_history[-1] < params.meta.loss_history[0]


def test_aware_training_records_augmentation(tiny_dataset):
    aug = AugConfig(beta=0.2, keep_radius=2.0, blur_kernel=3)
    params = train_expert(tiny_dataset.require_split("train"), "aware", ExpertHyper(epochs=3), aug)
    assert params.kind is ExpertKind.AWARE
    assert params.meta.aug == aug


def test_save_load_round_trip(tmp_path, tiny_dataset):
    params = train_expert(tiny_dataset.require_split("train"), ExpertKind.AGNOSTIC, ExpertHyper(epochs=5))
    path = save_expert(params, tmp_path / "agnostic.json")
    loaded = load_expert(path)
    frame = tiny_dataset.annotations[0]
    assert np.array_equal(LogisticExpert(loaded).predict(frame.features, frame),
                          LogisticExpert(params).predict(frame.features, frame))


def test_load_missing_or_wrong_dim(tmp_path):
    with pytest.raises(MissingArtifactError, match="nope.json"):
        load_expert(tmp_path / "nope.json")
    path = save_expert(make_params([0.0] * 6, 0.0), tmp_path / "e.json")
    with pytest.raises(DimensionMismatchError):
        load_expert(path, feature_dim=5)
