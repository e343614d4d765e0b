"""
Heatmap Core
Ground-truth Gaussian heatmaps, pixel-wise BCE and its logit gradient, argmax decoding

Numerics: predictions are clamped to [EPS, 1 - EPS] before the logarithms so the
loss stays finite; ground truth is used unclamped. Heatmaps are never renormalized
after border clipping (the peak is always interior).
"""

from pathlib import Path
from typing import Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatchError, InputError

EPS = 1e-6
DEFAULT_SIGMA = 2.0

Grid = Tuple[int, int]


def sigmoid(z):
    return expit(z)


def logit(p: float) -> float:
    p = float(np.clip(p, EPS, 1.0 - EPS))
    return float(np.log(p) - np.log1p(-p))


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise DimensionMismatchError(b.shape, a.shape, what)


def target_cell(target: Tuple[float, float], grid: Grid) -> Tuple[int, int]:
    """(row, col) of the cell containing a point given in cell units (x=col, y=row)."""
    grid_h, grid_w = grid
    tx, ty = target
    if not (0.0 <= tx < grid_w and 0.0 <= ty < grid_h):
        raise InputError(f"target {target} lies outside the {grid_h}x{grid_w} grid")
    return int(np.floor(ty)), int(np.floor(tx))


def gaussian_gt_heatmap(target: Tuple[float, float], sigma: float = DEFAULT_SIGMA, grid: Grid = (32, 32)) -> np.ndarray:
    """Peak-normalized Gaussian centred on the target's cell; value 1 exactly at that cell."""
    if not sigma > 0:
        raise InputError(f"sigma must be > 0, got {sigma}")
    ti, tj = target_cell(target, grid)
    rows = np.arange(grid[0], dtype=np.float64)[:, None]
    cols = np.arange(grid[1], dtype=np.float64)[None, :]
    sq = (rows - ti) ** 2 + (cols - tj) ** 2
    return np.exp(-sq / (2.0 * sigma * sigma))


def bce_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean pixel-wise binary cross-entropy over the H' x W' grid."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same_shape(pred, gt, "heatmap")
    p = np.clip(pred, EPS, 1.0 - EPS)
    terms = gt * np.log(p) + (1.0 - gt) * np.log1p(-p)
    return float(-terms.sum() / terms.size)


def bce_grad_logits(logits: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """dL/dz for L = bce_loss(sigmoid(z), gt): (sigmoid(z) - gt) / (H'W')."""
    logits = np.asarray(logits, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same_shape(logits, gt, "logit grid")
    return (sigmoid(logits) - gt) / logits.size


def argmax_coords(h: np.ndarray) -> Tuple[float, float]:
    """Cell-centre (x, y) in cell units of the maximum; ties go to the smallest row-major index."""
    h = np.asarray(h)
    if h.size == 0:
        raise InputError("argmax of an empty heatmap")
    # np.argmax returns the first occurrence in row-major order
    row, col = np.unravel_index(int(np.argmax(h)), h.shape)
    return (col + 0.5, row + 0.5)


def argmax_cell(h: np.ndarray) -> Tuple[int, int]:
    x, y = argmax_coords(h)
    return int(y), int(x)


def dump_heatmap_csv(h: np.ndarray, path: Union[str, Path]) -> Path:
    """Debug dump: row-major CSV, one line per grid row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(h, dtype=np.float64), delimiter=",", fmt="%.6f")
    return path
