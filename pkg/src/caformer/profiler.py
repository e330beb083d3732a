"""Analytic multiply-accumulate cost model for the dual-branch backbone,
plus an instrumented counter that tallies the MACs a real forward pass
actually performs. The two must agree exactly on the modeled terms.

Per layer and branch: attention = 4NC^2 (QKV + output projections) + 2N^2C
(QK^T and A.V); MLP = 8NC^2. The correlation modulation module is counted
from its matrix shapes once per head per scheduled layer (it processes both
modalities jointly, so it is not doubled). Embedding and head MACs are
reported separately and excluded from the backbone total.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

from .embedding import ImageTensor
from .numerics import count_macs
from .pipeline import ModalityPair, TrackerConfig, TrackerParams, forward, token_schedule

# Published reference backbone totals for the full-scale geometry (in G MACs).
REFERENCE_TOTAL_G = 58.43
REFERENCE_CTE_G = 42.91


@dataclass(frozen=True)
class LayerCost:
    layer: int
    tokens: int  # search tokens live during this layer (same in both branches)
    attention_macs: int
    mlp_macs: int
    cme_macs: int

    @property
    def total(self) -> int:
        return self.attention_macs + self.mlp_macs + self.cme_macs


@dataclass
class CostReport:
    per_layer: list[LayerCost]
    total_macs: int      # backbone: attention + mlp + cme
    embed_macs: int
    head_macs: int
    config: dict

    def to_json(self, giga: bool = False) -> str:
        def fmt(v):
            return round(v / 1e9, 2) if giga else v
        return json.dumps({
            "per_layer": [{
                "layer": lc.layer, "tokens": lc.tokens,
                "attention_macs": fmt(lc.attention_macs),
                "mlp_macs": fmt(lc.mlp_macs),
                "cme_macs": fmt(lc.cme_macs),
            } for lc in self.per_layer],
            "total_macs": fmt(self.total_macs),
            "embed_macs": fmt(self.embed_macs),
            "head_macs": fmt(self.head_macs),
            "unit": "GMAC" if giga else "MAC",
            "config": self.config,
        }, indent=2)


def _config_echo(cfg: TrackerConfig) -> dict:
    return json.loads(cfg.to_json())


def cme_macs_per_head(n_z: int, n_x: int) -> int:
    """Matrix-shape MAC count of one modulation call (both modalities jointly):
    embedding projection, query/key projections, the 2n_x-row interaction,
    the weighted ST aggregation, and the (I + W) residual mixing."""
    n = n_z + n_x
    return (2 * n_x * n * n_z        # stacked [ST, SS] @ W_e
            + 4 * n_x * n_z * n_z    # U @ W_q', U @ W_k'
            + 4 * n_x * n_x * n_z    # (UW_q')(UW_k')^T
            + 4 * n_x * n_x * n_z    # weights @ [ST_r; ST_t]
            + 2 * n_x * n_z * n_z)   # @ (I + W')


def estimate(cfg: TrackerConfig, full_scale: bool = False) -> CostReport:
    """Closed-form backbone cost under cfg's schedule. With full_scale the
    geometry is swapped to the full ViT-B dims, keeping cfg's schedule."""
    if full_scale:
        cfg = replace(cfg, patch=16, channels=768, heads=12,
                      template_side=128, search_side=256)
    c = cfg.channels
    n_z = cfg.n_z
    per_layer = []
    for layer, n_x in enumerate(token_schedule(cfg), start=1):
        n = n_z + n_x
        attention = 2 * (4 * n * c * c + 2 * n * n * c)
        mlp = 2 * 8 * n * c * c
        cme = cfg.heads * cme_macs_per_head(n_z, n_x) if layer in cfg.cma_layers else 0
        per_layer.append(LayerCost(layer, n_x, attention, mlp, cme))
    embed = 2 * cfg.tokens * 3 * cfg.patch ** 2 * c
    gx2 = cfg.search_grid ** 2
    hidden = 2 * c
    head = gx2 * (3 * 2 * c * hidden + hidden * (1 + 2 + 2))
    return CostReport(per_layer=per_layer,
                      total_macs=sum(lc.total for lc in per_layer),
                      embed_macs=embed, head_macs=head,
                      config=_config_echo(cfg))


def measure(cfg: TrackerConfig, params: TrackerParams,
            templates: ModalityPair[ImageTensor],
            searches: ModalityPair[ImageTensor]) -> CostReport:
    """Count the MACs of a real forward pass via kernel instrumentation."""
    with count_macs() as counter:
        forward(cfg, params, templates, searches)
    per_layer = []
    schedule = token_schedule(cfg)
    for layer in range(1, cfg.layers + 1):
        prefix = f"layer{layer}/"
        attention = counter.counts.get(prefix + "attention", 0)
        cme = counter.counts.get(prefix + "attention/cme", 0)
        mlp = counter.counts.get(prefix + "mlp", 0)
        per_layer.append(LayerCost(layer, schedule[layer - 1], attention, mlp, cme))
    return CostReport(per_layer=per_layer,
                      total_macs=sum(lc.total for lc in per_layer),
                      embed_macs=counter.counts.get("embed", 0),
                      head_macs=counter.counts.get("head", 0),
                      config=_config_echo(cfg))


def format_giga(macs: int) -> str:
    return f"{macs / 1e9:.2f}"
