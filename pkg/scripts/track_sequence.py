#!/usr/bin/env python3
"""Track a short synthetic sequence with the full model and with an ablated
baseline (no cross-modal modulation, no token elimination), then report how
closely the ablation's boxes match the full model's via the precision /
success metrics.

Usage: track_sequence.py [N_FRAMES] [SEED]
"""

import sys

from dataclasses import replace

from caformer.pipeline import (
    TrackerConfig,
    forward_many,
    init_params,
    precision_success,
)
from caformer.synth import synth_frame

if __name__ == "__main__":
    n_frames = int(sys.argv[1]) if len(sys.argv) > 1 else 8
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0

    full_cfg = TrackerConfig()
    base_cfg = replace(full_cfg, cma_layers=frozenset(), cte_layers=frozenset())
    frames = [synth_frame(seed + i, full_cfg) for i in range(n_frames)]

    full = [box for box, _ in forward_many(full_cfg, init_params(full_cfg, seed), frames)]
    base = [box for box, _ in forward_many(base_cfg, init_params(base_cfg, seed), frames)]

    for i, (f, b) in enumerate(zip(full, base)):
        print(f"frame {i}: full ({f.cx:.3f}, {f.cy:.3f}, {f.w:.3f}, {f.h:.3f})  "
              f"baseline ({b.cx:.3f}, {b.cy:.3f}, {b.w:.3f}, {b.h:.3f})")
    pr, sr = precision_success(base, full, pixel_scale=float(full_cfg.search_side))
    print(f"baseline vs full model — precision rate: {pr:.3f}   "
          f"success rate: {sr:.3f}")
