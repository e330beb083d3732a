"""Center-score prediction head: fold search tokens to a grid, fuse the two
modalities channel-wise, and decode a normalized box.

The per-position predictor is a small shared affine stack (not the original
convolutional head); the interface (score/offset/size maps, argmax decode)
is unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .numerics import (
    TokenMatrix,
    add_bias,
    concat_cols,
    gelu,
    mac_scope,
    matmul,
    sigmoid,
    slice_block,
)


@dataclass
class ScoreMaps:
    score: np.ndarray   # gx x gx, in [0, 1]
    offset: np.ndarray  # gx x gx x 2, sub-cell, in [0, 1)
    size: np.ndarray    # gx x gx x 2, in (0, 1]

    def __post_init__(self):
        gx = self.score.shape[0]
        if self.score.shape != (gx, gx) or self.offset.shape != (gx, gx, 2) \
                or self.size.shape != (gx, gx, 2):
            raise DimensionError("ScoreMaps shapes inconsistent")


@dataclass(frozen=True)
class BBox:
    """Normalized center/size box relative to the search region."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ContractError(f"BBox center out of range: {self}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ContractError(f"BBox size out of range: {self}")


@dataclass
class HeadParams:
    """Three per-position affine stacks over the fused 2C-channel features."""

    score_w1: TokenMatrix
    score_b1: TokenMatrix
    score_w2: TokenMatrix
    score_b2: TokenMatrix
    offset_w1: TokenMatrix
    offset_b1: TokenMatrix
    offset_w2: TokenMatrix
    offset_b2: TokenMatrix
    size_w1: TokenMatrix
    size_b1: TokenMatrix
    size_w2: TokenMatrix
    size_b2: TokenMatrix

    def named_tensors(self) -> list[tuple[str, TokenMatrix]]:
        return list(vars(self).items())


def fuse_tokens(f_rgb: TokenMatrix, f_tir: TokenMatrix, n_z: int, grid: int) -> TokenMatrix:
    """Search rows of both branches concatenated channel-wise (rgb first),
    one row per grid cell in row-major order."""
    if f_rgb.shape != f_tir.shape:
        raise ContractError(f"fuse: branch shapes {f_rgb.shape} vs {f_tir.shape}")
    if f_rgb.rows != n_z + grid * grid:
        raise ContractError(
            f"fuse: {f_rgb.rows} rows != n_z {n_z} + grid {grid}^2")
    rgb = slice_block(f_rgb, n_z, f_rgb.rows, 0, f_rgb.cols)
    tir = slice_block(f_tir, n_z, f_tir.rows, 0, f_tir.cols)
    return concat_cols([rgb, tir])


def fuse_and_fold(f_rgb: TokenMatrix, f_tir: TokenMatrix, n_z: int, grid: int) -> np.ndarray:
    """gx x gx x 2C feature grid; token (i, j) comes from search row i*gx + j."""
    fused = fuse_tokens(f_rgb, f_tir, n_z, grid)
    return fused.data.reshape(grid, grid, 2 * f_rgb.cols)


def unfold(feat: np.ndarray) -> TokenMatrix:
    """Inverse of the fold step: grid back to row-major tokens."""
    gx = feat.shape[0]
    return TokenMatrix(feat.reshape(gx * gx, feat.shape[2]))


def _stack(x: TokenMatrix, w1, b1, w2, b2) -> TokenMatrix:
    return sigmoid(add_bias(matmul(gelu(add_bias(matmul(x, w1), b1)), w2), b2))


def predict_tokens(fused: TokenMatrix, params: HeadParams
                   ) -> tuple[TokenMatrix, TokenMatrix, TokenMatrix]:
    """Traced per-position predictions on row-major fused tokens."""
    with mac_scope("head"):
        score = _stack(fused, params.score_w1, params.score_b1,
                       params.score_w2, params.score_b2)
        offset = _stack(fused, params.offset_w1, params.offset_b1,
                        params.offset_w2, params.offset_b2)
        size = _stack(fused, params.size_w1, params.size_b1,
                      params.size_w2, params.size_b2)
    return score, offset, size


def predict(feat: np.ndarray, params: HeadParams) -> ScoreMaps:
    gx = feat.shape[0]
    if feat.shape[0] != feat.shape[1] or feat.ndim != 3:
        raise DimensionError(f"predict: feature grid must be gx x gx x 2C, got {feat.shape}")
    score, offset, size = predict_tokens(unfold(feat), params)
    return ScoreMaps(score.data.reshape(gx, gx),
                     offset.data.reshape(gx, gx, 2),
                     size.data.reshape(gx, gx, 2))


def decode(maps: ScoreMaps) -> BBox:
    """Argmax decode; flat argmax breaks ties toward the smaller row, then
    the smaller column."""
    gx = maps.score.shape[0]
    flat = int(np.argmax(maps.score))
    i, j = divmod(flat, gx)
    off_x, off_y = maps.offset[i, j]
    w, h = maps.size[i, j]
    return BBox(cx=float((j + off_x) / gx), cy=float((i + off_y) / gx),
                w=float(w), h=float(h))


def iou(a: BBox, b: BBox) -> float:
    ax0, ax1 = a.cx - a.w / 2, a.cx + a.w / 2
    ay0, ay1 = a.cy - a.h / 2, a.cy + a.h / 2
    bx0, bx1 = b.cx - b.w / 2, b.cx + b.w / 2
    by0, by1 = b.cy - b.h / 2, b.cy + b.h / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def center_distance(a: BBox, b: BBox, pixel_scale: float) -> float:
    return math.hypot((a.cx - b.cx) * pixel_scale, (a.cy - b.cy) * pixel_scale)
