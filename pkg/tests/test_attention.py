"""Attention tests: partition bookkeeping, the modulation module against a
step-by-step scalar oracle, locality/normalization invariants, and block
equivalences."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caformer.attention import (
    LN_EPS,
    BlockParams,
    CmeParams,
    CorrelationMap,
    caformer_block,
    cme,
    correlation,
    modulated_attention,
    reassemble,
    standard_block,
)
from caformer.errors import ContractError, DimensionError, UsageError
from caformer.numerics import TokenMatrix


def rand_block_params(rng, channels, heads, scale=0.3):
    def w(r, c):
        return TokenMatrix(rng.normal(0.0, scale, size=(r, c)))

    c = channels
    return BlockParams(
        heads=heads,
        ln1_g=TokenMatrix(np.ones((1, c))), ln1_b=TokenMatrix.zeros(1, c),
        w_q=w(c, c), b_q=w(1, c), w_k=w(c, c), b_k=w(1, c),
        w_v=w(c, c), b_v=w(1, c), w_o=w(c, c), b_o=w(1, c),
        ln2_g=TokenMatrix(np.ones((1, c))), ln2_b=TokenMatrix.zeros(1, c),
        w_h=w(c, 4 * c), b_h=w(1, 4 * c), w_out=w(4 * c, c), b_out=w(1, c),
    )


def rand_cme_params(rng, n, n_z, scale=0.4):
    def w(r, c):
        return TokenMatrix(rng.normal(0.0, scale, size=(r, c)))

    return CmeParams(
        w_e=w(n, n_z),
        ln1_g=TokenMatrix(1.0 + rng.normal(0.0, 0.1, size=(1, n))), ln1_b=w(1, n),
        ln2_g=TokenMatrix(1.0 + rng.normal(0.0, 0.1, size=(1, n_z))), ln2_b=w(1, n_z),
        w_q=w(n_z, n_z), w_k=w(n_z, n_z), w_p=w(n_z, n_z),
    )


class TestCorrelationMap:
    def test_partition_round_trip_bitwise(self):
        rng = np.random.default_rng(0)
        m = CorrelationMap(TokenMatrix(rng.normal(size=(7, 7))), n_z=3, n_x=4)
        back = reassemble(m.tt(), m.ts(), m.st(), m.ss(), 3, 4)
        assert np.array_equal(back.full.data, m.full.data)

    def test_st_indexing_contract(self):
        rng = np.random.default_rng(1)
        full = rng.normal(size=(5, 5))
        m = CorrelationMap(TokenMatrix(full), n_z=2, n_x=3)
        st_view = m.st().data
        for i in range(3):
            for j in range(2):
                assert st_view[i, j] == full[2 + i, j]

    def test_shape_contract(self):
        with pytest.raises(DimensionError):
            CorrelationMap(TokenMatrix(np.zeros((4, 5))), n_z=2, n_x=3)


class TestCorrelation:
    def _identity_params(self, c):
        bp = rand_block_params(np.random.default_rng(0), c, heads=1)
        bp.w_q = TokenMatrix.identity(c)
        bp.w_k = TokenMatrix.identity(c)
        bp.b_q = TokenMatrix.zeros(1, c)
        bp.b_k = TokenMatrix.zeros(1, c)
        return bp

    def test_st_equals_x_ztranspose(self):
        rng = np.random.default_rng(2)
        n_z, n_x, c = 2, 3, 4
        f = TokenMatrix(rng.normal(size=(n_z + n_x, c)))
        m = correlation(f, self._identity_params(c), head=0, n_z=n_z)
        z, x = f.data[:n_z], f.data[n_z:]
        assert np.abs(m.st().data - x @ z.T).max() < 1e-12

    def test_orthogonal_rows_give_diagonal(self):
        f = TokenMatrix(3.0 * np.eye(4))  # orthogonal token rows
        m = correlation(f, self._identity_params(4), head=0, n_z=1)
        off_diag = m.full.data - np.diag(np.diag(m.full.data))
        assert np.abs(off_diag).max() == 0.0

    def test_head_out_of_range(self):
        bp = rand_block_params(np.random.default_rng(3), 8, heads=2)
        f = TokenMatrix(np.zeros((5, 8)))
        with pytest.raises(UsageError):
            correlation(f, bp, head=2, n_z=2)

    def test_raw_correlation_is_unscaled_presoftmax(self):
        # doubling the features quadruples the correlation entries: no
        # 1/sqrt scaling and no softmax has been applied yet
        rng = np.random.default_rng(4)
        bp = self._identity_params(4)
        f = TokenMatrix(rng.normal(size=(5, 4)))
        m1 = correlation(f, bp, 0, n_z=2).full.data
        m2 = correlation(TokenMatrix(2.0 * f.data), bp, 0, n_z=2).full.data
        assert np.abs(m2 - 4.0 * m1).max() < 1e-12


def _cme_oracle(st_r, ss_r, st_t, ss_t, cp):
    """Independent step-by-step numpy recomputation of the modulation."""
    def ln(x, g, b):
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        return (x - mu) / np.sqrt(var + LN_EPS) * g + b

    n_z = st_r.shape[1]
    stacked = np.vstack([np.hstack([st_r, ss_r]), np.hstack([st_t, ss_t])])
    u = ln(ln(stacked, cp.ln1_g.data, cp.ln1_b.data) @ cp.w_e.data,
           cp.ln2_g.data, cp.ln2_b.data)
    logits = (u @ cp.w_q.data) @ (u @ cp.w_k.data).T / math.sqrt(n_z)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    weights = e / e.sum(axis=1, keepdims=True)
    out = (weights @ np.vstack([st_r, st_t])) @ (np.eye(n_z) + cp.w_p.data)
    n_x = st_r.shape[0]
    return out[:n_x], out[n_x:]


class TestCme:
    def test_identical_modalities_give_identical_outputs(self):
        rng = np.random.default_rng(5)
        cp = rand_cme_params(rng, n=8, n_z=3)
        st = TokenMatrix(rng.normal(size=(5, 3)))
        ss = TokenMatrix(rng.normal(size=(5, 5)))
        a, b = cme(st, ss, st, ss, cp)
        assert np.array_equal(a.data, b.data)

    def test_convex_hull_with_zero_mixing(self):
        # with the residual mixing zeroed, every output row is a convex
        # combination of the stacked ST rows of both modalities
        rng = np.random.default_rng(6)
        cp = rand_cme_params(rng, n=10, n_z=4)
        cp.w_p = TokenMatrix.zeros(4, 4)
        st_r = TokenMatrix(rng.normal(size=(6, 4)))
        ss_r = TokenMatrix(rng.normal(size=(6, 6)))
        st_t = TokenMatrix(rng.normal(size=(6, 4)))
        ss_t = TokenMatrix(rng.normal(size=(6, 6)))
        a, b = cme(st_r, ss_r, st_t, ss_t, cp)
        stacked = np.vstack([st_r.data, st_t.data])
        lo = stacked.min(axis=0) - 1e-12
        hi = stacked.max(axis=0) + 1e-12
        for out in (a.data, b.data):
            assert (out >= lo).all() and (out <= hi).all()

    def test_hand_trace_oracle(self):
        # n_z = 2, n_x = 2 with hand-set weights, against the scalar trace
        cp = CmeParams(
            w_e=TokenMatrix([[0.5, -0.2], [0.1, 0.4], [-0.3, 0.2], [0.2, 0.1]]),
            ln1_g=TokenMatrix([[1.0, 0.9, 1.1, 1.0]]),
            ln1_b=TokenMatrix([[0.0, 0.1, -0.1, 0.0]]),
            ln2_g=TokenMatrix([[1.0, 1.2]]),
            ln2_b=TokenMatrix([[0.05, -0.05]]),
            w_q=TokenMatrix([[0.3, -0.1], [0.2, 0.4]]),
            w_k=TokenMatrix([[-0.2, 0.5], [0.1, 0.3]]),
            w_p=TokenMatrix([[0.1, 0.2], [-0.1, 0.3]]),
        )
        st_r = TokenMatrix([[1.0, -0.5], [0.2, 0.8]])
        ss_r = TokenMatrix([[0.3, 0.7], [-0.4, 0.1]])
        st_t = TokenMatrix([[0.6, 0.2], [-0.9, 0.5]])
        ss_t = TokenMatrix([[0.0, -0.3], [0.8, 0.4]])
        a, b = cme(st_r, ss_r, st_t, ss_t, cp)
        exp_a, exp_b = _cme_oracle(st_r.data, ss_r.data, st_t.data, ss_t.data, cp)
        assert np.abs(a.data - exp_a).max() < 1e-12
        assert np.abs(b.data - exp_b).max() < 1e-12

    def test_random_case_matches_oracle(self):
        rng = np.random.default_rng(7)
        cp = rand_cme_params(rng, n=9, n_z=3)
        st_r, st_t = (TokenMatrix(rng.normal(size=(6, 3))) for _ in range(2))
        ss_r, ss_t = (TokenMatrix(rng.normal(size=(6, 6))) for _ in range(2))
        a, b = cme(st_r, ss_r, st_t, ss_t, cp)
        exp_a, exp_b = _cme_oracle(st_r.data, ss_r.data, st_t.data, ss_t.data, cp)
        assert np.abs(a.data - exp_a).max() < 1e-12
        assert np.abs(b.data - exp_b).max() < 1e-12

    def test_modality_shape_divergence_rejected(self):
        rng = np.random.default_rng(8)
        cp = rand_cme_params(rng, n=6, n_z=2)
        with pytest.raises(ContractError):
            cme(TokenMatrix.zeros(4, 2), TokenMatrix.zeros(4, 4),
                TokenMatrix.zeros(3, 2), TokenMatrix.zeros(3, 3), cp)


class TestModulatedAttention:
    def _random_map(self, rng, n_z, n_x):
        return CorrelationMap(TokenMatrix(rng.normal(size=(n_z + n_x, n_z + n_x))),
                              n_z, n_x)

    def test_zero_delta_reduces_to_plain_softmax(self):
        rng = np.random.default_rng(9)
        m = self._random_map(rng, 3, 5)
        a = modulated_attention(m, TokenMatrix.zeros(5, 3), c=8)
        logits = m.full.data / math.sqrt(8)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        expected = e / e.sum(axis=1, keepdims=True)
        assert np.abs(a.data - expected).max() < 1e-12

    def test_template_rows_unaffected_by_delta(self):
        rng = np.random.default_rng(10)
        m = self._random_map(rng, 4, 6)
        baseline = modulated_attention(m, TokenMatrix.zeros(6, 4), c=4)
        delta = TokenMatrix(rng.normal(size=(6, 4)))
        modulated = modulated_attention(m, delta, c=4)
        assert np.array_equal(baseline.data[:4], modulated.data[:4])

    def test_composition_oracle(self):
        rng = np.random.default_rng(11)
        m = self._random_map(rng, 2, 4)
        delta = rng.normal(size=(4, 2))
        out = modulated_attention(m, TokenMatrix(delta), c=16)
        full = m.full.data.copy()
        full[2:, :2] += delta
        logits = full / math.sqrt(16)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        expected = e / e.sum(axis=1, keepdims=True)
        assert np.abs(out.data - expected).max() < 1e-12

    def test_wrong_delta_shape(self):
        m = self._random_map(np.random.default_rng(12), 2, 3)
        with pytest.raises(DimensionError):
            modulated_attention(m, TokenMatrix.zeros(2, 3), c=4)

    @given(seed=st.integers(0, 10**6), n_z=st.integers(1, 5), n_x=st.integers(1, 6))
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one_and_locality(self, seed, n_z, n_x):
        rng = np.random.default_rng(seed)
        m = self._random_map(rng, n_z, n_x)
        delta = TokenMatrix(rng.normal(size=(n_x, n_z)))
        a = modulated_attention(m, delta, c=4)
        assert np.abs(a.data.sum(axis=1) - 1.0).max() <= 1e-12
        plain = modulated_attention(m, TokenMatrix.zeros(n_x, n_z), c=4)
        assert np.array_equal(a.data[:n_z], plain.data[:n_z])


def _standard_block_oracle(f, bp):
    """Plain numpy per-query reimplementation of the standard block."""
    def ln(x, g, b):
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        return (x - mu) / np.sqrt(var + LN_EPS) * g + b

    def gelu(x):
        k = math.sqrt(2.0 / math.pi)
        return 0.5 * x * (1.0 + np.tanh(k * (x + 0.044715 * x ** 3)))

    c = bp.channels
    dh = c // bp.heads
    x = ln(f, bp.ln1_g.data, bp.ln1_b.data)
    head_outs = []
    for h in range(bp.heads):
        cols = slice(h * dh, (h + 1) * dh)
        q = x @ bp.w_q.data[:, cols] + bp.b_q.data[:, cols]
        k = x @ bp.w_k.data[:, cols] + bp.b_k.data[:, cols]
        v = x @ bp.w_v.data[:, cols] + bp.b_v.data[:, cols]
        out = np.zeros_like(v)
        for i in range(x.shape[0]):  # one query at a time
            logits = q[i] @ k.T / math.sqrt(dh)
            e = np.exp(logits - logits.max())
            out[i] = (e / e.sum()) @ v
        head_outs.append(out)
    f = f + np.hstack(head_outs) @ bp.w_o.data + bp.b_o.data
    hidden = gelu(ln(f, bp.ln2_g.data, bp.ln2_b.data) @ bp.w_h.data + bp.b_h.data)
    return f + hidden @ bp.w_out.data + bp.b_out.data


class TestStandardBlock:
    def test_uniform_attention_is_row_mean(self):
        c = 4
        bp = rand_block_params(np.random.default_rng(13), c, heads=1)
        for name in ("w_q", "b_q", "w_k", "b_k", "b_v", "b_o",
                     "w_h", "b_h", "w_out", "b_out"):
            t = getattr(bp, name)
            setattr(bp, name, TokenMatrix.zeros(*t.shape))
        bp.w_v = TokenMatrix.identity(c)
        bp.w_o = TokenMatrix.identity(c)
        f = TokenMatrix(np.random.default_rng(14).normal(size=(5, c)))
        out = standard_block(f, bp)
        x = _standard_block_oracle(f.data, bp)  # sanity via oracle too
        ln_f = (f.data - f.data.mean(axis=1, keepdims=True)) / np.sqrt(
            f.data.var(axis=1, keepdims=True) + LN_EPS)
        expected = f.data + np.tile(ln_f.mean(axis=0), (5, 1))
        assert np.abs(out.data - expected).max() < 1e-12
        assert np.abs(out.data - x).max() < 1e-12

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(15)
        bp = rand_block_params(rng, 8, heads=2)
        f = rng.normal(size=(7, 8))
        perm = rng.permutation(7)
        out = standard_block(TokenMatrix(f), bp).data
        out_p = standard_block(TokenMatrix(f[perm]), bp).data
        assert np.abs(out_p - out[perm]).max() < 1e-12

    def test_per_query_loop_oracle(self):
        rng = np.random.default_rng(16)
        bp = rand_block_params(rng, 8, heads=4)
        f = TokenMatrix(rng.normal(size=(9, 8)))
        assert np.abs(standard_block(f, bp).data
                      - _standard_block_oracle(f.data, bp)).max() < 1e-12

    def test_channel_mismatch(self):
        bp = rand_block_params(np.random.default_rng(17), 8, heads=2)
        with pytest.raises(DimensionError):
            standard_block(TokenMatrix.zeros(4, 6), bp)


class TestCaformerBlock:
    def test_modality_symmetry_exact(self):
        rng = np.random.default_rng(18)
        bp = rand_block_params(rng, 8, heads=2)
        cp = rand_cme_params(rng, n=7, n_z=2)
        f = TokenMatrix(rng.normal(size=(7, 8)))
        out_r, out_t = caformer_block(f, f.copy(), bp, cp, n_z=2)
        assert np.array_equal(out_r.data, out_t.data)

    def test_zero_modulation_equals_standard_block(self):
        # w_p = -I makes (I + w_p) the zero matrix, so the modulated ST
        # delta vanishes and each branch must match the plain block bitwise
        rng = np.random.default_rng(19)
        bp = rand_block_params(rng, 8, heads=2)
        cp = rand_cme_params(rng, n=7, n_z=2)
        cp.w_p = TokenMatrix(-np.eye(2))
        f_rgb = TokenMatrix(rng.normal(size=(7, 8)))
        f_tir = TokenMatrix(rng.normal(size=(7, 8)))
        out_r, out_t = caformer_block(f_rgb, f_tir, bp, cp, n_z=2)
        assert np.array_equal(out_r.data, standard_block(f_rgb, bp).data)
        assert np.array_equal(out_t.data, standard_block(f_tir, bp).data)

    def test_branch_shape_divergence_rejected(self):
        rng = np.random.default_rng(20)
        bp = rand_block_params(rng, 8, heads=2)
        cp = rand_cme_params(rng, n=7, n_z=2)
        with pytest.raises(ContractError):
            caformer_block(TokenMatrix.zeros(7, 8), TokenMatrix.zeros(6, 8), bp, cp, 2)
