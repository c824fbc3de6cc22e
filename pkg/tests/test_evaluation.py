import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lshr.errors import DimensionError, UsageError
from lshr.evaluation import (
    bicubic_baseline,
    complexity,
    emit_curves,
    evaluate,
    finite_mean,
    from_csv,
    psnr,
    read_curves,
    sparsity_report,
    sweep_blocks,
    to_csv,
)
from lshr.network import NetworkConfig, init_params
from lshr.sensing import SparsityStats
from lshr.training import HistoryRow


def test_psnr_mse_one_on_255():
    x = np.zeros((4, 4))
    assert psnr(x, x + 1.0, max_val=255.0) == pytest.approx(48.1308, abs=5e-5)
    assert psnr(x, x + 1.0, max_val=255.0) == pytest.approx(20 * math.log10(255), rel=1e-12)


def test_psnr_zero_db_and_identical():
    x = np.zeros((3, 3))
    assert psnr(x, x + 2.0, max_val=2.0) == pytest.approx(0.0, abs=1e-12)
    assert psnr(x, x) == math.inf


def test_psnr_shape_and_range_errors():
    with pytest.raises(DimensionError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        psnr(np.zeros(2), np.ones(2), max_val=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 40))
def test_psnr_symmetric_and_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=n), rng.uniform(size=n)
    perm = rng.permutation(n)
    assert psnr(a, b) == psnr(b, a)
    assert psnr(a[perm], b[perm]) == pytest.approx(psnr(a, b), rel=1e-12)
    assert psnr(a, b) >= 0


def test_finite_mean_drops_inf(caplog):
    assert finite_mean([10.0, math.inf, 20.0]) == 15.0
    assert "excluding 1" in caplog.text


# --------------------------------------------------------------------------
# complexity


def test_complexity_table_row():
    rep = complexity(NetworkConfig(R=0.01), 32, 32)
    assert rep.m == 10 and rep.K == 16 and rep.c_out == 1
    assert rep.space == 2560
    assert rep.time == 655360
    assert rep.weights_per_kernel == 256 and rep.weights_total == 2560
    assert rep.weight_format == "1-bit" and rep.pattern_bits == 2560 and rep.pattern_bytes == 320


def hand_count(K, m, M):
    """Multiply-accumulates of a transposed conv with one K x K kernel per input channel."""
    macs = 0
    for _ in range(m):  # input channels
        for _ in range(M * M):  # output positions
            macs += K * K
    return K * K * m, macs


@pytest.mark.parametrize("R,size", [(0.01, 32), (0.1, 64), (0.25, 48)])
def test_complexity_matches_hand_count(R, size):
    cfg = NetworkConfig(R=R)
    rep = complexity(cfg, size)
    space, time = hand_count(cfg.K, rep.m, size // cfg.s)
    assert (rep.space, rep.time) == (space, time)


def test_complexity_time_quadratic_in_side():
    cfg = NetworkConfig(R=0.01)
    a = complexity(cfg, 32, m=10)
    b = complexity(cfg, 64, m=10)
    assert b.time == 4 * a.time and b.space == a.space


def test_network_param_count_matches_model():
    for cfg in (NetworkConfig(channels=8, blocks=3), NetworkConfig(channels=4, blocks=1, block_bias=True)):
        rep = complexity(cfg, cfg.image_size, m=cfg.m)
        params = init_params(cfg)
        # the binary bank is reported separately as pattern_bits
        assert rep.network_params == params.count() - params.bank.shadow.size
        assert rep.pattern_bits == params.bank.shadow.size


# --------------------------------------------------------------------------
# evaluation and reports


def test_evaluate_self_consistency():
    cfg = NetworkConfig(channels=4, blocks=1)
    params = init_params(cfg)
    imgs = np.random.default_rng(0).uniform(size=(3, 1, 32, 32))
    rep = evaluate(params, cfg, imgs, timing_reps=1)
    assert len(rep.psnr) == 3 and rep.ratio == 0.25
    assert rep.mean_psnr == pytest.approx(np.mean(rep.psnr))
    assert rep.seconds_per_image > 0


def test_evaluate_against_own_output_is_inf():
    from lshr.network import forward

    cfg = NetworkConfig(channels=4, blocks=1)
    params = init_params(cfg)
    imgs = np.random.default_rng(0).uniform(size=(2, 1, 32, 32)).astype(np.float32)
    _, fin = forward(imgs, params, cfg)
    rep = evaluate(params, cfg, imgs, references=np.clip(fin.data, 0, 1), timing_reps=0)
    assert all(v == math.inf for v in rep.psnr)


def test_evaluate_empty_is_usage_error():
    cfg = NetworkConfig(channels=4, blocks=1)
    with pytest.raises(UsageError):
        evaluate(init_params(cfg), cfg, np.zeros((0, 1, 32, 32)))
    with pytest.raises(UsageError):
        bicubic_baseline(np.zeros((0, 1, 32, 32)), 2)


def test_bicubic_baseline_smooth_image_is_good():
    y, x = np.mgrid[0:32, 0:32] / 31.0
    img = (0.25 + 0.5 * x * y)[None, None]
    assert bicubic_baseline(img, 2).mean_psnr > 40


def test_csv_round_trip_exact():
    rows = [HistoryRow(1, 0, 0.1 + 0.2, 1 / 3, None, 25.123456789012345, 1e-4, 1e-5, 0.4921875)]
    back = from_csv(to_csv(rows))
    assert back[0]["loss"] == 0.1 + 0.2 and back[0]["val_loss"] == 1 / 3
    assert back[0]["val_recon_loss"] is None and back[0]["step"] == 1


def test_emit_curves(tmp_path):
    rows = [HistoryRow(i, 0, 1.0 / (i + 1), fraction_ones=0.5 - i * 0.01) for i in range(5)]
    emit_curves(rows, tmp_path / "c.csv", tmp_path / "c.png")
    back = read_curves(tmp_path / "c.csv")
    assert [r["loss"] for r in back] == [r.loss for r in rows]
    assert (tmp_path / "c.png").read_bytes()[:4] == b"\x89PNG"


def test_sparsity_report_columns():
    text = sparsity_report([SparsityStats(0, 0.5, [0.25, 0.75]), SparsityStats(10, 0.4, [0.4])])
    rows = from_csv(text)
    assert rows[0] == {"step": 0, "fraction_ones": 0.5, "min_pattern": 0.25, "max_pattern": 0.75}
    assert rows[1]["step"] == 10


def test_sweep_time_grows_with_blocks():
    cfg = NetworkConfig(channels=16, blocks=1, image_size=64)
    imgs = np.random.default_rng(0).uniform(size=(1, 1, 64, 64))
    rows = sweep_blocks(cfg, [1, 4, 16], test_images=imgs, reps=5)
    times = [r.seconds_per_image for r in rows]
    assert times[0] < times[1] < times[2]
    assert len({r.params for r in rows}) == 1
