"""Image-to-token conversion: patchify, linear patch embedding, concat order.

Token order is load-bearing downstream: template tokens occupy rows
[0, n_z), search tokens rows [n_z, n). Patch flatten order inside a patch is
(row, col, channel); patches themselves are row-major over the patch grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import TokenMatrix, add, concat_rows, mac_scope, matmul
from .tensorio import load_catm


@dataclass
class ImageTensor:
    """H x W x 3 float64 image."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DimensionError(f"ImageTensor must be HxWx3, got {arr.shape}")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class PositionalEncoding:
    """Per-region learnable positional encodings, shared across modalities."""

    template_pe: TokenMatrix  # n_z x C
    search_pe: TokenMatrix    # n_x x C


def patchify(img: ImageTensor, patch: int) -> TokenMatrix:
    h, w = img.height, img.width
    if patch <= 0 or h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    blocks = img.data.reshape(gh, patch, gw, patch, 3)
    tokens = blocks.transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch * patch * 3)
    return TokenMatrix(tokens)


def unpatchify(tokens: TokenMatrix, patch: int, height: int, width: int) -> ImageTensor:
    """Inverse of patchify; used for round-trip checks."""
    gh, gw = height // patch, width // patch
    if tokens.shape != (gh * gw, patch * patch * 3):
        raise DimensionError(
            f"unpatchify: expected {(gh * gw, patch * patch * 3)}, got {tokens.shape}")
    blocks = tokens.data.reshape(gh, gw, patch, patch, 3)
    return ImageTensor(blocks.transpose(0, 2, 1, 3, 4).reshape(height, width, 3))


def embed(patches: TokenMatrix, w0: TokenMatrix, pe: TokenMatrix) -> TokenMatrix:
    if patches.cols != w0.rows:
        raise DimensionError(f"embed: patches {patches.shape} vs w0 {w0.shape}")
    if pe.shape != (patches.rows, w0.cols):
        raise DimensionError(
            f"embed: pe {pe.shape} != output shape {(patches.rows, w0.cols)}")
    with mac_scope("embed"):
        return add(matmul(patches, w0), pe)


def concat_tokens(z: TokenMatrix, x: TokenMatrix) -> TokenMatrix:
    if z.rows < 1:
        raise DimensionError("concat_tokens: template must have at least one token")
    if z.cols != x.cols:
        raise DimensionError(f"concat_tokens: channel mismatch {z.cols} vs {x.cols}")
    return concat_rows([z, x])


def image_from_catm(path: str, patch_hint: int | None = None) -> ImageTensor:
    """Read an image stored as a CATM matrix interpreted as H x (W*3)."""
    m = load_catm(path)
    if m.cols % 3:
        raise DimensionError(f"CATM image cols {m.cols} not divisible by 3")
    img = ImageTensor(m.data.reshape(m.rows, m.cols // 3, 3))
    if patch_hint and (img.height % patch_hint or img.width % patch_hint):
        raise ConfigError(f"image {img.height}x{img.width} incompatible with patch {patch_hint}")
    return img
