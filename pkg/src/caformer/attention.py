"""Transformer blocks: the plain pre-norm block and the cross-modulated block.

The cross-modulated block computes per-head, per-modality correlation maps
(raw Q·Kᵀ, no scale, no softmax), runs both modalities' search-template (ST)
and search-search (SS) partitions through the correlation modulation module,
and re-injects the modulated ST block additively before the single scaled
softmax. One modulation parameter set serves all heads and both modalities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ContractError, DimensionError, UsageError
from .numerics import (
    TokenMatrix,
    add,
    add_bias,
    concat_cols,
    concat_rows,
    gelu,
    layernorm,
    mac_scope,
    matmul,
    scale,
    slice_block,
    softmax_rows,
    transpose,
)

LN_EPS = 1e-5


@dataclass
class CorrelationMap:
    """Pre-softmax similarity matrix of one head, with the four-way partition
    at row/column n_z (TT | TS / ST | SS)."""

    full: TokenMatrix  # n x n
    n_z: int
    n_x: int

    def __post_init__(self):
        n = self.n_z + self.n_x
        if self.full.shape != (n, n):
            raise DimensionError(
                f"CorrelationMap: full is {self.full.shape}, expected {(n, n)}")

    def tt(self) -> TokenMatrix:
        return slice_block(self.full, 0, self.n_z, 0, self.n_z)

    def ts(self) -> TokenMatrix:
        return slice_block(self.full, 0, self.n_z, self.n_z, self.n_z + self.n_x)

    def st(self) -> TokenMatrix:
        return slice_block(self.full, self.n_z, self.n_z + self.n_x, 0, self.n_z)

    def ss(self) -> TokenMatrix:
        return slice_block(self.full, self.n_z, self.n_z + self.n_x,
                           self.n_z, self.n_z + self.n_x)


def reassemble(tt: TokenMatrix, ts: TokenMatrix, st: TokenMatrix,
               ss: TokenMatrix, n_z: int, n_x: int) -> CorrelationMap:
    full = concat_rows([concat_cols([tt, ts]), concat_cols([st, ss])])
    return CorrelationMap(full, n_z, n_x)


@dataclass
class BlockParams:
    """One transformer block's parameters; shared by both modality branches."""

    heads: int
    ln1_g: TokenMatrix
    ln1_b: TokenMatrix
    w_q: TokenMatrix
    b_q: TokenMatrix
    w_k: TokenMatrix
    b_k: TokenMatrix
    w_v: TokenMatrix
    b_v: TokenMatrix
    w_o: TokenMatrix
    b_o: TokenMatrix
    ln2_g: TokenMatrix
    ln2_b: TokenMatrix
    w_h: TokenMatrix
    b_h: TokenMatrix
    w_out: TokenMatrix
    b_out: TokenMatrix

    @property
    def channels(self) -> int:
        return self.w_q.rows

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    def named_tensors(self) -> list[tuple[str, TokenMatrix]]:
        skip = {"heads"}
        return [(k, v) for k, v in vars(self).items() if k not in skip]


@dataclass
class CmeParams:
    """Correlation modulation parameters for one cross-modulated block.

    Shapes depend on the token counts live at that layer: w_e is n x n_z
    (n = n_z + current n_x), the ln1 affine spans n columns, everything else
    is n_z-sized.
    """

    w_e: TokenMatrix
    ln1_g: TokenMatrix
    ln1_b: TokenMatrix
    ln2_g: TokenMatrix
    ln2_b: TokenMatrix
    w_q: TokenMatrix
    w_k: TokenMatrix
    w_p: TokenMatrix  # residual mixing; output is right-multiplied by (I + w_p)

    def named_tensors(self) -> list[tuple[str, TokenMatrix]]:
        return list(vars(self).items())


def _head_proj(x: TokenMatrix, w: TokenMatrix, b: TokenMatrix, head: int,
               head_dim: int) -> TokenMatrix:
    c0, c1 = head * head_dim, (head + 1) * head_dim
    proj = matmul(x, slice_block(w, 0, w.rows, c0, c1))
    return add_bias(proj, slice_block(b, 0, 1, c0, c1))


def correlation(f: TokenMatrix, params: BlockParams, head: int, n_z: int) -> CorrelationMap:
    """Raw per-head Q·Kᵀ of f, partitioned at token row n_z. No scale, no softmax."""
    if not 0 <= head < params.heads:
        raise UsageError(f"head {head} out of range for {params.heads} heads")
    if f.rows <= n_z:
        raise DimensionError(f"correlation: {f.rows} tokens cannot split at n_z={n_z}")
    dh = params.head_dim
    q = _head_proj(f, params.w_q, params.b_q, head, dh)
    k = _head_proj(f, params.w_k, params.b_k, head, dh)
    return CorrelationMap(matmul(q, transpose(k)), n_z, f.rows - n_z)


def cme(st_rgb: TokenMatrix, ss_rgb: TokenMatrix, st_tir: TokenMatrix,
        ss_tir: TokenMatrix, params: CmeParams) -> tuple[TokenMatrix, TokenMatrix]:
    """Cross-modal correlation modulation. Returns the modulated ST block for
    each modality (same shape as the inputs' ST blocks)."""
    if st_rgb.shape != st_tir.shape or ss_rgb.shape != ss_tir.shape:
        raise ContractError(
            f"cme: modality shapes diverge, ST {st_rgb.shape}/{st_tir.shape} "
            f"SS {ss_rgb.shape}/{ss_tir.shape}")
    n_x, n_z = st_rgb.shape
    if ss_rgb.shape != (n_x, n_x):
        raise DimensionError(f"cme: SS must be {n_x}x{n_x}, got {ss_rgb.shape}")
    with mac_scope("cme"):
        stacked = concat_rows([concat_cols([st_rgb, ss_rgb]),
                               concat_cols([st_tir, ss_tir])])  # 2n_x x n
        u = layernorm(matmul(layernorm(stacked, params.ln1_g, params.ln1_b, LN_EPS),
                             params.w_e),
                      params.ln2_g, params.ln2_b, LN_EPS)  # 2n_x x n_z
        q = matmul(u, params.w_q)
        k = matmul(u, params.w_k)
        weights = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(n_z)))
        m_prime = matmul(weights, concat_rows([st_rgb, st_tir]))
        out = matmul(m_prime, add(TokenMatrix.identity(n_z), params.w_p))
        st_rgb_mod = slice_block(out, 0, n_x, 0, n_z)
        st_tir_mod = slice_block(out, n_x, 2 * n_x, 0, n_z)
    return st_rgb_mod, st_tir_mod


def modulated_attention(m: CorrelationMap, st_delta: TokenMatrix, c: int) -> TokenMatrix:
    """Final attention map: the modulated ST block (zeros elsewhere) is added
    to the raw correlation map and the sum takes the single 1/sqrt(c) scale
    before the row softmax. Template-query rows are untouched by st_delta."""
    if st_delta.shape != (m.n_x, m.n_z):
        raise DimensionError(
            f"modulated_attention: st_delta {st_delta.shape} != ST shape {(m.n_x, m.n_z)}")
    n = m.n_z + m.n_x
    top = TokenMatrix.zeros(m.n_z, n)
    bottom = concat_cols([st_delta, TokenMatrix.zeros(m.n_x, m.n_x)])
    delta_full = concat_rows([top, bottom])
    return softmax_rows(scale(add(delta_full, m.full), 1.0 / math.sqrt(c)))


def _mlp(x: TokenMatrix, bp: BlockParams) -> TokenMatrix:
    hidden = gelu(add_bias(matmul(x, bp.w_h), bp.b_h))
    return add_bias(matmul(hidden, bp.w_out), bp.b_out)


def _project_heads(outs: list[TokenMatrix], bp: BlockParams) -> TokenMatrix:
    return add_bias(matmul(concat_cols(outs), bp.w_o), bp.b_o)


def standard_block(f: TokenMatrix, bp: BlockParams) -> TokenMatrix:
    """Vanilla pre-norm multi-head self-attention + MLP, both with residuals."""
    if f.cols != bp.channels:
        raise DimensionError(f"standard_block: {f.cols} channels vs params {bp.channels}")
    dh = bp.head_dim
    with mac_scope("attention"):
        x = layernorm(f, bp.ln1_g, bp.ln1_b, LN_EPS)
        outs = []
        for h in range(bp.heads):
            corr = matmul(_head_proj(x, bp.w_q, bp.b_q, h, dh),
                          transpose(_head_proj(x, bp.w_k, bp.b_k, h, dh)))
            attn = softmax_rows(scale(corr, 1.0 / math.sqrt(dh)))
            outs.append(matmul(attn, _head_proj(x, bp.w_v, bp.b_v, h, dh)))
        f = add(f, _project_heads(outs, bp))
    with mac_scope("mlp"):
        f = add(f, _mlp(layernorm(f, bp.ln2_g, bp.ln2_b, LN_EPS), bp))
    return f


def caformer_block(f_rgb: TokenMatrix, f_tir: TokenMatrix, bp: BlockParams,
                   cp: CmeParams, n_z: int) -> tuple[TokenMatrix, TokenMatrix]:
    """Cross-modulated block: per head, both modalities' correlations are
    modulated jointly, then each branch proceeds as a standard block. The rgb
    branch is always evaluated first so traces are reproducible."""
    if f_rgb.shape != f_tir.shape:
        raise ContractError(f"caformer_block: branch shapes {f_rgb.shape} vs {f_tir.shape}")
    dh = bp.head_dim
    with mac_scope("attention"):
        x_rgb = layernorm(f_rgb, bp.ln1_g, bp.ln1_b, LN_EPS)
        x_tir = layernorm(f_tir, bp.ln1_g, bp.ln1_b, LN_EPS)
        outs_rgb, outs_tir = [], []
        for h in range(bp.heads):
            corr_rgb = correlation(x_rgb, bp, h, n_z)
            corr_tir = correlation(x_tir, bp, h, n_z)
            st_rgb_mod, st_tir_mod = cme(corr_rgb.st(), corr_rgb.ss(),
                                         corr_tir.st(), corr_tir.ss(), cp)
            attn_rgb = modulated_attention(corr_rgb, st_rgb_mod, dh)
            attn_tir = modulated_attention(corr_tir, st_tir_mod, dh)
            outs_rgb.append(matmul(attn_rgb, _head_proj(x_rgb, bp.w_v, bp.b_v, h, dh)))
            outs_tir.append(matmul(attn_tir, _head_proj(x_tir, bp.w_v, bp.b_v, h, dh)))
        f_rgb = add(f_rgb, _project_heads(outs_rgb, bp))
        f_tir = add(f_tir, _project_heads(outs_tir, bp))
    with mac_scope("mlp"):
        f_rgb = add(f_rgb, _mlp(layernorm(f_rgb, bp.ln2_g, bp.ln2_b, LN_EPS), bp))
        f_tir = add(f_tir, _mlp(layernorm(f_tir, bp.ln2_g, bp.ln2_b, LN_EPS), bp))
    return f_rgb, f_tir
