"""Gradient-check harness tests (fast scopes; the full-pipeline scope runs
in the acceptance suite)."""

import numpy as np
import pytest

from caformer.gradcheck import (
    STEP,
    TOLERANCE,
    check_block,
    check_cme,
    directional_errors,
    run_gradcheck,
)
from caformer.numerics import TokenMatrix, hadamard, matmul, sum_all


def test_step_and_tolerance_are_pinned():
    assert STEP == 1e-5
    assert TOLERANCE == 1e-6


def test_cme_scope_passes():
    errors = check_cme(seed=0)
    assert all(e < TOLERANCE for e in errors.values()), errors
    # inputs are probed alongside the parameters
    assert any(name.startswith("input.") for name in errors)


def test_block_scope_passes_and_covers_all_tensors():
    errors = check_block(seed=0)
    assert all(e < TOLERANCE for e in errors.values()), errors
    block_names = {n for n in errors if n.startswith("block.")}
    assert len(block_names) == 16  # every learnable block tensor
    assert len({n for n in errors if n.startswith("cme.")}) == 8


def test_corrupt_hook_is_detected():
    errors = check_cme(seed=0, corrupt="cme.w_q")
    assert errors["cme.w_q"] >= TOLERANCE
    clean = {n: e for n, e in errors.items() if n != "cme.w_q"}
    assert all(e < TOLERANCE for e in clean.values())


def test_unknown_scope_rejected():
    with pytest.raises(ValueError, match="scope"):
        run_gradcheck("everything")


def test_directional_errors_on_simple_graph():
    rng = np.random.default_rng(0)
    a = TokenMatrix(rng.normal(size=(3, 4)))
    b = TokenMatrix(rng.normal(size=(4, 2)))
    w = TokenMatrix(rng.normal(size=(3, 2)))

    def loss():
        return sum_all(hadamard(matmul(a, b), w))

    errors = directional_errors(loss, [("a", a), ("b", b)], seed=1)
    assert all(e < TOLERANCE for e in errors.values())
