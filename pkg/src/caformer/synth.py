"""Seeded synthetic RGB/TIR image pairs.

The TIR leg is a deterministic nonlinear transform of the RGB leg (channel
mix + box blur + noise), so the modalities are correlated but not identical
and the cross-modal path is exercised meaningfully.
"""

from __future__ import annotations

import numpy as np

from .embedding import ImageTensor
from .pipeline import ModalityPair, TrackerConfig


def _box_blur(img: np.ndarray) -> np.ndarray:
    out = img.copy()
    for shift in (-1, 1):
        out += np.roll(img, shift, axis=0) + np.roll(img, shift, axis=1)
    return out / 5.0


def synth_pair(seed: int, side: int) -> ModalityPair[ImageTensor]:
    rng = np.random.default_rng(seed)
    rgb = _box_blur(rng.normal(0.0, 1.0, size=(side, side, 3)))
    mix = rng.normal(0.0, 0.6, size=(3, 3)) + np.eye(3)
    tir = _box_blur(np.tanh(rgb @ mix)) + 0.1 * rng.normal(0.0, 1.0, size=rgb.shape)
    return ModalityPair(rgb=ImageTensor(rgb), tir=ImageTensor(tir))


def synth_frame(seed: int, cfg: TrackerConfig
                ) -> tuple[ModalityPair[ImageTensor], ModalityPair[ImageTensor]]:
    """One (template pair, search pair) input matching cfg's geometry."""
    templates = synth_pair(2 * seed, cfg.template_side)
    searches = synth_pair(2 * seed + 1, cfg.search_side)
    return templates, searches
