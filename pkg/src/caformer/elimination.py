"""Collaborative token elimination: cross-modality similarity scoring,
top-k retention, and zero-padded restoration of eliminated search tokens.

Everything here is deterministic and RNG-free. KeepSets always carry indices
in increasing original order so downstream spatial layout is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, UsageError
from .numerics import TokenMatrix, concat_rows, gather_rows, scatter_rows, slice_block


@dataclass(frozen=True)
class KeepSet:
    """Search-token indices retained at one elimination stage."""

    kept_positions: tuple[int, ...]
    original_count: int

    def __post_init__(self):
        pos = self.kept_positions
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ContractError("KeepSet positions must be strictly increasing")
        if pos and (pos[0] < 0 or pos[-1] >= self.original_count):
            raise ContractError("KeepSet position out of range")

    def __len__(self) -> int:
        return len(self.kept_positions)


def center_token_index(grid_side: int) -> int:
    """Center token of a grid_side x grid_side template grid (lower-right of
    the four central cells when the side is even)."""
    return (grid_side // 2) * grid_side + grid_side // 2


def _softmax_vec(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def cte_scores(q_rgb_center: TokenMatrix, q_tir_center: TokenMatrix,
               k_rgb_x: TokenMatrix, k_tir_x: TokenMatrix) -> np.ndarray:
    """Summed per-modality similarity of each search token to the center
    template token. Entries lie in (0, 2) and sum to 2."""
    if q_rgb_center.shape != q_tir_center.shape or k_rgb_x.shape != k_tir_x.shape:
        raise ContractError("cte_scores: modality shapes diverge")
    if q_rgb_center.rows != 1 or q_rgb_center.cols != k_rgb_x.cols:
        raise DimensionError(
            f"cte_scores: query {q_rgb_center.shape} vs keys {k_rgb_x.shape}")
    h_rgb = _softmax_vec(q_rgb_center.data[0] @ k_rgb_x.data.T)
    h_tir = _softmax_vec(q_tir_center.data[0] @ k_tir_x.data.T)
    return h_rgb + h_tir


def select_topk(h: np.ndarray, keep_ratio: float) -> KeepSet:
    """Keep the floor(keep_ratio * len(h)) highest-scoring tokens (at least
    one); ties break toward the lower original index."""
    h = np.asarray(h, dtype=np.float64)
    if h.size == 0:
        raise UsageError("select_topk: empty score vector")
    if not 0.0 < keep_ratio <= 1.0:
        raise ConfigError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    k = max(1, int(keep_ratio * h.size))
    order = np.argsort(-h, kind="stable")  # stable: lower index wins ties
    kept = tuple(sorted(int(i) for i in order[:k]))
    return KeepSet(kept, h.size)


def apply_keep(f: TokenMatrix, n_z: int, ks: KeepSet) -> TokenMatrix:
    """Drop eliminated search rows; template rows pass through untouched."""
    if f.rows != n_z + ks.original_count:
        raise DimensionError(
            f"apply_keep: {f.rows} rows != n_z {n_z} + {ks.original_count} search tokens")
    indices = list(range(n_z)) + [n_z + p for p in ks.kept_positions]
    return gather_rows(f, indices)


def compose_chain(chain: list[KeepSet]) -> tuple[int, np.ndarray]:
    """Collapse a chain of KeepSets into (original search count, surviving
    original indices in order)."""
    if not chain:
        raise UsageError("compose_chain: empty chain")
    indices = np.arange(chain[0].original_count)
    for ks in chain:
        if indices.size != ks.original_count:
            raise ContractError(
                f"inconsistent chain: stage expects {ks.original_count} tokens, "
                f"have {indices.size}")
        indices = indices[list(ks.kept_positions)]
    return chain[0].original_count, indices


def restore(f: TokenMatrix, n_z: int, chain: list[KeepSet]) -> TokenMatrix:
    """Re-insert eliminated search tokens as zero rows at their original grid
    positions. With an empty chain this is the identity."""
    if not chain:
        return f
    original, surviving = compose_chain(chain)
    if f.rows != n_z + surviving.size:
        raise ContractError(
            f"restore: {f.rows} rows != n_z {n_z} + {surviving.size} survivors")
    template = slice_block(f, 0, n_z, 0, f.cols)
    search = slice_block(f, n_z, f.rows, 0, f.cols)
    return concat_rows([template, scatter_rows(search, surviving, original)])


def chain_to_text(chain: list[KeepSet]) -> str:
    return "\n".join(",".join(str(p) for p in ks.kept_positions) for ks in chain) + "\n"


def chain_from_text(text: str, original_count: int) -> list[KeepSet]:
    chain = []
    count = original_count
    for line in text.splitlines():
        if not line.strip():
            continue
        kept = tuple(int(p) for p in line.split(","))
        chain.append(KeepSet(kept, count))
        count = len(kept)
    return chain
