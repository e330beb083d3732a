"""End-to-end tracker: embedding -> L blocks (standard or cross-modulated,
with token elimination at scheduled layers) -> restoration -> head.

Both modality branches run in lockstep with shared parameters; elimination
always applies the same KeepSet to both branches, so row counts never
diverge. The rgb leg is evaluated first at every fused step.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Generic, TypeVar

import numpy as np

from . import elimination
from .attention import BlockParams, CmeParams, caformer_block, standard_block
from .embedding import ImageTensor, PositionalEncoding, concat_tokens, embed, patchify
from .errors import ConfigError, UsageError
from .head import BBox, HeadParams, ScoreMaps, center_distance, decode, fuse_tokens, iou, predict_tokens
from .numerics import TokenMatrix, mac_scope

T = TypeVar("T")


@dataclass
class ModalityPair(Generic[T]):
    """Homologous rgb/tir values moved through the network in lockstep."""

    rgb: T
    tir: T


_CONFIG_FIELDS = {
    "patch": int, "channels": int, "heads": int, "layers": int,
    "template_side": int, "search_side": int, "cma_layers": list,
    "cte_layers": list, "keep_ratio": float, "seed": int,
}


@dataclass(frozen=True)
class TrackerConfig:
    patch: int = 4
    channels: int = 32
    heads: int = 4
    layers: int = 12
    template_side: int = 16
    search_side: int = 32
    cma_layers: frozenset[int] = frozenset({10, 11, 12})
    cte_layers: frozenset[int] = frozenset({4, 7, 10})
    keep_ratio: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.patch < 1 or self.template_side % self.patch or self.search_side % self.patch:
            raise ConfigError(
                f"patch: sides {self.template_side}/{self.search_side} not divisible by {self.patch}")
        if self.channels % self.heads:
            raise ConfigError(f"heads: channels {self.channels} not divisible by {self.heads}")
        if self.layers < 1:
            raise ConfigError(f"layers: must be >= 1, got {self.layers}")
        for name, layer_set in (("cma_layers", self.cma_layers), ("cte_layers", self.cte_layers)):
            bad = [l for l in layer_set if not 1 <= l <= self.layers]
            if bad:
                raise ConfigError(f"{name}: layers {bad} outside 1..{self.layers}")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ConfigError(f"keep_ratio: must be in (0, 1], got {self.keep_ratio}")

    @property
    def template_grid(self) -> int:
        return self.template_side // self.patch

    @property
    def search_grid(self) -> int:
        return self.search_side // self.patch

    @property
    def n_z(self) -> int:
        return self.template_grid ** 2

    @property
    def n_x(self) -> int:
        return self.search_grid ** 2

    @property
    def tokens(self) -> int:
        return self.n_z + self.n_x

    @classmethod
    def desk(cls, **overrides) -> "TrackerConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, cte: bool = False, cma: bool = False) -> "TrackerConfig":
        """Full ViT-B geometry used by the profiler, not for forward passes."""
        return cls(patch=16, channels=768, heads=12, layers=12,
                   template_side=128, search_side=256,
                   cma_layers=frozenset({10, 11, 12}) if cma else frozenset(),
                   cte_layers=frozenset({4, 7, 10}) if cte else frozenset(),
                   keep_ratio=0.7)

    def to_json(self) -> str:
        d = {k: getattr(self, k) for k in _CONFIG_FIELDS}
        d["cma_layers"] = sorted(self.cma_layers)
        d["cte_layers"] = sorted(self.cte_layers)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrackerConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        kwargs = {}
        for key, value in raw.items():
            if key not in _CONFIG_FIELDS:
                raise ConfigError(f"unknown config key: {key}")
            expected = _CONFIG_FIELDS[key]
            if expected is list:
                if not isinstance(value, list) or any(not isinstance(v, int) for v in value):
                    raise ConfigError(f"config key {key}: expected a list of ints")
                kwargs[key] = frozenset(value)
            elif expected is float:
                if not isinstance(value, (int, float)) or isinstance(value, bool):
                    raise ConfigError(f"config key {key}: expected a number")
                kwargs[key] = float(value)
            else:
                if not isinstance(value, int) or isinstance(value, bool):
                    raise ConfigError(f"config key {key}: expected an int")
                kwargs[key] = value
        return cls(**kwargs)


def token_schedule(cfg: TrackerConfig) -> list[int]:
    """Search-token count live during each layer (1-indexed layer l is at
    position l-1). Elimination after layer l takes effect from layer l+1."""
    counts = []
    n_x = cfg.n_x
    for layer in range(1, cfg.layers + 1):
        counts.append(n_x)
        if layer in cfg.cte_layers:
            n_x = max(1, int(cfg.keep_ratio * n_x))
    return counts


@dataclass
class TrackerParams:
    w0: TokenMatrix
    pe: PositionalEncoding
    blocks: list[BlockParams]
    cme: dict[int, CmeParams]
    head: HeadParams

    def named_tensors(self) -> list[tuple[str, TokenMatrix]]:
        out = [("w0", self.w0), ("pe_z", self.pe.template_pe), ("pe_x", self.pe.search_pe)]
        for i, bp in enumerate(self.blocks, start=1):
            out += [(f"block{i}.{name}", t) for name, t in bp.named_tensors()]
        for layer in sorted(self.cme):
            out += [(f"cme{layer}.{name}", t) for name, t in self.cme[layer].named_tensors()]
        out += [(f"head.{name}", t) for name, t in self.head.named_tensors()]
        return out


def init_params(cfg: TrackerConfig, seed: int | None = None) -> TrackerParams:
    """Seeded deterministic init: Gaussian(0, 0.02) weights, zero biases,
    unit layernorm gains, zero residual-mixing matrix in the modulation."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    c = cfg.channels

    def gauss(rows, cols):
        return TokenMatrix(rng.normal(0.0, 0.02, size=(rows, cols)))

    def zeros(rows, cols):
        return TokenMatrix.zeros(rows, cols)

    def ones_row(cols):
        return TokenMatrix(np.ones((1, cols)))

    w0 = gauss(3 * cfg.patch ** 2, c)
    pe = PositionalEncoding(gauss(cfg.n_z, c), gauss(cfg.n_x, c))

    blocks = []
    for _ in range(cfg.layers):
        blocks.append(BlockParams(
            heads=cfg.heads,
            ln1_g=ones_row(c), ln1_b=zeros(1, c),
            w_q=gauss(c, c), b_q=zeros(1, c),
            w_k=gauss(c, c), b_k=zeros(1, c),
            w_v=gauss(c, c), b_v=zeros(1, c),
            w_o=gauss(c, c), b_o=zeros(1, c),
            ln2_g=ones_row(c), ln2_b=zeros(1, c),
            w_h=gauss(c, 4 * c), b_h=zeros(1, 4 * c),
            w_out=gauss(4 * c, c), b_out=zeros(1, c),
        ))

    schedule = token_schedule(cfg)
    cme = {}
    for layer in sorted(cfg.cma_layers):
        n = cfg.n_z + schedule[layer - 1]
        cme[layer] = CmeParams(
            w_e=gauss(n, cfg.n_z),
            ln1_g=ones_row(n), ln1_b=zeros(1, n),
            ln2_g=ones_row(cfg.n_z), ln2_b=zeros(1, cfg.n_z),
            w_q=gauss(cfg.n_z, cfg.n_z), w_k=gauss(cfg.n_z, cfg.n_z),
            w_p=zeros(cfg.n_z, cfg.n_z),
        )

    hidden = 2 * c
    def branch(out_dim):
        return (gauss(2 * c, hidden), zeros(1, hidden), gauss(hidden, out_dim), zeros(1, out_dim))

    sw1, sb1, sw2, sb2 = branch(1)
    ow1, ob1, ow2, ob2 = branch(2)
    zw1, zb1, zw2, zb2 = branch(2)
    head = HeadParams(sw1, sb1, sw2, sb2, ow1, ob1, ow2, ob2, zw1, zb1, zw2, zb2)
    return TrackerParams(w0=w0, pe=pe, blocks=blocks, cme=cme, head=head)


def params_from_tensors(cfg: TrackerConfig, tensors: dict[str, TokenMatrix]) -> TrackerParams:
    """Rebuild a parameter set from a flat name->tensor mapping (the inverse
    of named_tensors())."""
    template = init_params(cfg)
    expected = dict(template.named_tensors())
    missing = set(expected) - set(tensors)
    if missing:
        raise UsageError(f"missing tensors: {sorted(missing)[:5]}...")
    for name, tensor in tensors.items():
        if name not in expected:
            raise UsageError(f"unexpected tensor: {name}")
        if tensor.shape != expected[name].shape:
            raise UsageError(
                f"tensor {name}: shape {tensor.shape} != expected {expected[name].shape}")
        expected[name].data = tensor.data.copy()
    return template


@dataclass
class Diagnostics:
    keepsets: list[elimination.KeepSet] = field(default_factory=list)
    branch_maxdiff: list[float] = field(default_factory=list)  # per layer
    maps: ScoreMaps | None = None


def _cte_inputs(f: TokenMatrix, bp: BlockParams, center_row: int, n_z: int
                ) -> tuple[TokenMatrix, TokenMatrix]:
    """Head-0 query of the center template token and head-0 keys of the
    current search tokens; selection is discrete, so this stays untraced."""
    dh = bp.head_dim
    wq = bp.w_q.data[:, :dh]
    wk = bp.w_k.data[:, :dh]
    q = f.data[center_row:center_row + 1] @ wq + bp.b_q.data[:, :dh]
    k = f.data[n_z:] @ wk + bp.b_k.data[:, :dh]
    return TokenMatrix(q), TokenMatrix(k)


def forward_features(cfg: TrackerConfig, params: TrackerParams,
                     templates: ModalityPair[ImageTensor],
                     searches: ModalityPair[ImageTensor],
                     keepsets: list[elimination.KeepSet] | None = None,
                     ) -> tuple[TokenMatrix, TokenMatrix, Diagnostics]:
    """Backbone forward pass; returns both restored branch features.

    `keepsets` optionally pins the elimination decisions (selection is
    piecewise constant, so gradient checks probe the fixed-selection branch).
    """
    for img, side in ((templates.rgb, cfg.template_side), (templates.tir, cfg.template_side),
                      (searches.rgb, cfg.search_side), (searches.tir, cfg.search_side)):
        if img.height != side or img.width != side:
            raise ConfigError(
                f"image {img.height}x{img.width} does not match configured side {side}")

    n_z = cfg.n_z
    center = elimination.center_token_index(cfg.template_grid)
    diag = Diagnostics()

    z_rgb = embed(patchify(templates.rgb, cfg.patch), params.w0, params.pe.template_pe)
    x_rgb = embed(patchify(searches.rgb, cfg.patch), params.w0, params.pe.search_pe)
    z_tir = embed(patchify(templates.tir, cfg.patch), params.w0, params.pe.template_pe)
    x_tir = embed(patchify(searches.tir, cfg.patch), params.w0, params.pe.search_pe)
    f_rgb = concat_tokens(z_rgb, x_rgb)
    f_tir = concat_tokens(z_tir, x_tir)

    for layer in range(1, cfg.layers + 1):
        bp = params.blocks[layer - 1]
        with mac_scope(f"layer{layer}"):
            if layer in cfg.cma_layers:
                f_rgb, f_tir = caformer_block(f_rgb, f_tir, bp, params.cme[layer], n_z)
            else:
                f_rgb = standard_block(f_rgb, bp)
                f_tir = standard_block(f_tir, bp)
        if layer in cfg.cte_layers:
            if keepsets is not None:
                keep = keepsets[len(diag.keepsets)]
            else:
                q_rgb, k_rgb = _cte_inputs(f_rgb, bp, center, n_z)
                q_tir, k_tir = _cte_inputs(f_tir, bp, center, n_z)
                scores = elimination.cte_scores(q_rgb, q_tir, k_rgb, k_tir)
                keep = elimination.select_topk(scores, cfg.keep_ratio)
            f_rgb = elimination.apply_keep(f_rgb, n_z, keep)
            f_tir = elimination.apply_keep(f_tir, n_z, keep)
            diag.keepsets.append(keep)
        diag.branch_maxdiff.append(float(np.abs(f_rgb.data - f_tir.data).max()))

    f_rgb = elimination.restore(f_rgb, n_z, diag.keepsets)
    f_tir = elimination.restore(f_tir, n_z, diag.keepsets)
    return f_rgb, f_tir, diag


def forward(cfg: TrackerConfig, params: TrackerParams,
            templates: ModalityPair[ImageTensor],
            searches: ModalityPair[ImageTensor]) -> tuple[BBox, Diagnostics]:
    f_rgb, f_tir, diag = forward_features(cfg, params, templates, searches)
    gx = cfg.search_grid
    fused = fuse_tokens(f_rgb, f_tir, cfg.n_z, gx)
    score, offset, size = predict_tokens(fused, params.head)
    diag.maps = ScoreMaps(score.data.reshape(gx, gx),
                          offset.data.reshape(gx, gx, 2),
                          size.data.reshape(gx, gx, 2))
    return decode(diag.maps), diag


def forward_many(cfg: TrackerConfig, params: TrackerParams,
                 frames: list[tuple[ModalityPair[ImageTensor], ModalityPair[ImageTensor]]],
                 threads: int | None = None) -> list[tuple[BBox, Diagnostics]]:
    """Evaluate independent frames, optionally in parallel. Thread count is
    capped by the CAFORMER_THREADS environment variable."""
    if threads is None:
        threads = int(os.environ.get("CAFORMER_THREADS", "1"))
    threads = max(1, threads)
    if threads == 1:
        return [forward(cfg, params, t, s) for t, s in frames]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ts: forward(cfg, params, *ts), frames))


def precision_success(pred: list[BBox], truth: list[BBox],
                      pixel_scale: float) -> tuple[float, float]:
    """PR at the 20-pixel center threshold and SR as the mean success over
    IoU thresholds 0..1 in steps of 0.05. Success is strict (IoU > t), with
    perfect overlap counting at the t=1 endpoint."""
    if not pred or len(pred) != len(truth):
        raise UsageError("precision_success: need equal-length non-empty box lists")
    dists = [center_distance(p, t, pixel_scale) for p, t in zip(pred, truth)]
    pr = sum(d <= 20.0 for d in dists) / len(pred)
    ious = [iou(p, t) for p, t in zip(pred, truth)]
    thresholds = [i * 0.05 for i in range(21)]
    successes = []
    for t in thresholds:
        successes.append(sum((v > t) or (v >= 1.0) for v in ious) / len(ious))
    return pr, sum(successes) / len(successes)
