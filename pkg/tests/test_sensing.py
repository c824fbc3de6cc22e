import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lshr.errors import DimensionError, UsageError
from lshr.sensing import (
    LEARNED,
    STATIC,
    PatternBank,
    binarize,
    binary_kernels,
    clip_shadow,
    init_bernoulli,
    init_uniform,
    sense,
    sparsity,
    straight_through_grad,
)
from lshr.tensor import Tape, Tensor, backward, default_dtype, multiply, total, use_tape
from lshr.training import AdamState, adam_step


def test_binarize_rule_on_1e5_values():
    rng = np.random.default_rng(7)
    w = rng.uniform(-1, 1, size=100_000)
    w[:1000] = 0.0
    w[1000:2000] = np.finfo(np.float64).tiny
    w[2000:3000] = -np.finfo(np.float64).tiny
    b = binarize(w)
    violations = np.count_nonzero(b != np.where(w > 0, 1, 0))
    assert violations == 0
    assert set(np.unique(b)) <= {0, 1}
    assert np.all(b[:1000] == 0) and np.all(b[1000:2000] == 1) and np.all(b[2000:3000] == 0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 200), elements=st.floats(-1, 1)))
def test_binarize_property(w):
    b = binarize(w)
    assert np.all((b == 1) == (w > 0))


def test_binarize_examples():
    assert binarize(np.array([0.3, 0.0, -0.7])).tolist() == [1, 0, 0]


def test_uniform_init_fraction_near_half():
    frac = sparsity(init_uniform(64, 16, seed=0)).fraction_ones
    assert 0.45 <= frac <= 0.55


def test_bernoulli_init_fraction():
    bank = init_bernoulli(100, 16, prob_one=0.3, seed=1)
    assert bank.mode == STATIC and not bank.shadow.requires_grad
    assert abs(sparsity(bank).fraction_ones - 0.3) < 0.02


def test_bank_shape_validation():
    with pytest.raises(DimensionError):
        PatternBank(Tensor(np.zeros((3, 2, 4, 4))), LEARNED, 0)
    with pytest.raises(ValueError):
        PatternBank(Tensor(np.zeros((3, 1, 4, 4))), "frozen", 0)


def test_clip_shadow_bounds():
    bank = init_uniform(4, 4, seed=0)
    bank.shadow.data *= 5
    clip_shadow(bank)
    assert bank.shadow.data.min() >= -1 and bank.shadow.data.max() <= 1


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-3, 10.0), st.integers(0, 10**6))
def test_shadows_stay_in_range_after_adam(lr, seed):
    rng = np.random.default_rng(seed)
    bank = init_uniform(3, 4, seed=seed)
    state = AdamState()
    for _ in range(3):
        g = rng.normal(scale=100, size=bank.shadow.shape)
        adam_step({"bank.shadow": bank.shadow}, {"bank.shadow": g}, state, {"bank.shadow": lr}, bank=bank)
        assert bank.shadow.data.min() >= -1 and bank.shadow.data.max() <= 1


def test_straight_through_is_identity():
    with default_dtype("double"):
        rng = np.random.default_rng(0)
        bank = init_uniform(5, 4, seed=3)
        img = Tensor(rng.uniform(size=(2, 1, 8, 8)))
        u = Tensor(rng.normal(size=(2, 5, 2, 2)))

        tape = Tape()
        with use_tape(tape):
            g_shadow = backward(total(multiply(sense(img, bank), u)), tape)[bank.shadow]

        raw = Tensor(bank.binary(), requires_grad=True)
        tape = Tape()
        with use_tape(tape):
            g_raw = backward(total(multiply(sense(img, raw), u)), tape)[raw]
    np.testing.assert_array_equal(g_shadow, g_raw)


def test_static_bank_gets_no_gradient():
    bank = init_bernoulli(2, 4, seed=0)
    with pytest.raises(UsageError):
        straight_through_grad(bank, np.zeros((2, 1, 4, 4)))
    k = binary_kernels(bank)
    assert not k.requires_grad


def test_sense_block_sums():
    bits = np.zeros((2, 1, 2, 2))
    bits[0] = 1.0
    bits[1, 0, 0, 0] = 1.0
    bank = PatternBank(Tensor(np.where(bits > 0, 1.0, -1.0)), STATIC, 0)
    img = np.arange(16.0).reshape(1, 1, 4, 4)
    y = sense(Tensor(img), bank).data
    np.testing.assert_array_equal(y[0, 0], [[10, 18], [42, 50]])
    np.testing.assert_array_equal(y[0, 1], [[0, 2], [8, 10]])


def test_sense_rejects_partial_blocks():
    bank = init_uniform(2, 4, seed=0)
    with pytest.raises(DimensionError, match="crop or pad"):
        sense(Tensor(np.zeros((1, 1, 6, 8))), bank)


def test_sparsity_history_and_per_pattern():
    shadow = -np.ones((2, 1, 2, 2))
    shadow[0, 0, 0, :] = 1
    bank = PatternBank(Tensor(shadow), LEARNED, 0)
    hist = []
    stats = sparsity(bank, step=3, history=hist)
    assert stats.fraction_ones == 0.25 and stats.per_pattern_fraction == [0.5, 0.0]
    assert hist == [stats] and stats.step == 3
