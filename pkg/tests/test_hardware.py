import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lshr import hardware
from lshr.errors import ADCRangeError, CorruptFileError, DimensionError, DuplicateEntryError, IncompleteFrameError
from lshr.evaluation import psnr
from lshr.network import NetworkConfig, forward, init_params, reconstruct_from_measurements
from lshr.sensing import init_bernoulli, init_uniform, sense
from lshr.tensor import Tensor, no_grad

# --------------------------------------------------------------------------
# pattern files


def test_all_ones_pattern_payload():
    pf = hardware.pack_patterns(np.ones((1, 1, 16, 16), dtype=np.uint8))
    assert pf.payload == b"\xff" * 32


def test_payload_size_m10_k16(tmp_path):
    bank = init_uniform(10, 16, seed=0)
    pf = hardware.export_patterns(bank, tmp_path / "p.lshrpat")
    assert len(pf.payload) == 10 * 32
    assert (tmp_path / "p.lshrpat").stat().st_size == 20 + 10 * 32 + 4


def test_header_layout():
    pf = hardware.pack_patterns(np.zeros((3, 1, 5, 5), dtype=np.uint8))
    blob = pf.to_bytes()
    assert blob[:8] == b"LSHRPAT\0"
    assert int.from_bytes(blob[8:10], "little") == 1
    assert int.from_bytes(blob[10:12], "little") == 5
    assert int.from_bytes(blob[12:16], "little") == 3
    assert int.from_bytes(blob[16:20], "little") == 4  # ceil(25 / 8)


def test_bit_order_row_major_msb_first():
    bits = np.zeros((1, 1, 4, 4), dtype=np.uint8)
    bits[0, 0, 0, 0] = 1  # first pixel -> MSB of byte 0
    bits[0, 0, 3, 3] = 1  # last pixel -> LSB of byte 1
    assert hardware.pack_patterns(bits).payload == b"\x80\x01"


def test_random_bank_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(100):
        m, K = int(rng.integers(1, 20)), int(rng.integers(1, 20))
        bank = init_uniform(m, K, seed=i)
        path = tmp_path / f"b{i}.lshrpat"
        hardware.export_patterns(bank, path)
        back = hardware.import_patterns(path)
        assert back.dtype == np.uint8 and back.tobytes() == bank.bits().tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 12), st.integers(0, 10**6))
def test_pack_unpack_property(m, K, seed):
    bits = (np.random.default_rng(seed).random((m, 1, K, K)) < 0.5).astype(np.uint8)
    blob = hardware.pack_patterns(bits).to_bytes()
    assert np.array_equal(hardware.unpack_patterns(blob).bits(), bits)


def test_corrupt_pattern_file(tmp_path):
    blob = bytearray(hardware.pack_patterns(np.ones((2, 1, 4, 4), dtype=np.uint8)).to_bytes())
    for mutate in (lambda b: b.__setitem__(21, b[21] ^ 1), lambda b: b.__setitem__(0, 0)):
        bad = bytearray(blob)
        mutate(bad)
        with pytest.raises(CorruptFileError):
            hardware.unpack_patterns(bytes(bad))
    with pytest.raises(CorruptFileError):
        hardware.unpack_patterns(bytes(blob[:-1]))


# --------------------------------------------------------------------------
# simulator


def _scene(h=16, w=32, seed=0):
    return np.random.default_rng(seed).uniform(size=(h, w))


def test_noiseless_within_half_lsb():
    bank = init_uniform(20, 16, seed=1)
    img = _scene()
    fr = hardware.simulate_spc(img, bank, adc_bits=10)
    ref = sense(Tensor(img[None, None]), bank).data[0].astype(np.float64)
    err = np.abs(hardware.normalize(fr) - ref)
    assert err.max() <= fr.adc.full_scale / 2048 + 1e-9
    assert fr.saturated == 0


def test_zero_image_counts_zero():
    fr = hardware.simulate_spc(np.zeros((16, 16)), init_uniform(4, 16, seed=0))
    assert np.all(fr.counts() == 0)


def test_saturation_counted():
    bank = init_bernoulli(4, 8, prob_one=1.0)
    fr = hardware.simulate_spc(np.ones((8, 8)), bank, full_scale=32.0)
    assert fr.saturated == 4 and np.all(fr.counts() == 1023)


def test_image_must_tile():
    with pytest.raises(DimensionError):
        hardware.simulate_spc(np.zeros((10, 16)), init_uniform(2, 16, seed=0))


def test_only_pixels_under_ones_matter():
    bank = init_uniform(6, 8, seed=2)
    bits = bank.bits()
    img = _scene(8, 8)
    other = img.copy()
    for p in range(6):
        # change pixels under zeros of pattern p only
        alt = np.where(bits[p, 0] == 0, np.random.default_rng(p).uniform(size=(8, 8)), img)
        a = hardware.ideal_measurements(img, bits[p : p + 1])
        b = hardware.ideal_measurements(alt, bits[p : p + 1])
        np.testing.assert_allclose(a, b, atol=1e-12)
    assert other is not img


def test_snr_target_over_100_frames():
    bank = init_uniform(64, 16, seed=0)
    img = _scene(32, 32)
    snrs = [hardware.empirical_snr_db(fr.ideal, fr.noisy)
            for fr in (hardware.simulate_spc(img, bank, snr_db=15.7, seed=3, frame=f) for f in range(100))]
    assert abs(np.mean(snrs) - 15.7) <= 0.5


def test_noise_is_zero_mean():
    bank = init_uniform(8, 8, seed=0)
    img = _scene(8, 8)
    n = 400
    frames = [hardware.simulate_spc(img, bank, snr_db=10.0, seed=1, frame=f) for f in range(n)]
    noisy = np.stack([f.noisy for f in frames])
    ideal = frames[0].ideal
    sigma = np.sqrt(np.mean(ideal**2) / 10.0)
    assert np.all(np.abs(noisy.mean(axis=0) - ideal) <= 3 * sigma / np.sqrt(n) * 1.5)


def test_simulator_deterministic():
    bank = init_uniform(4, 8, seed=0)
    a = hardware.simulate_spc(_scene(8, 8), bank, snr_db=12, seed=5, frame=2)
    b = hardware.simulate_spc(_scene(8, 8), bank, snr_db=12, seed=5, frame=2)
    c = hardware.simulate_spc(_scene(8, 8), bank, snr_db=12, seed=5, frame=3)
    assert np.array_equal(a.counts(), b.counts()) and not np.array_equal(a.noisy, c.noisy)


def test_calibration_estimate_and_undo():
    adc = hardware.ADC(12, 512.0)
    true = hardware.Calibration(gain=1.7, offset=20.0)
    K = 8
    bright = init_bernoulli(1, K, prob_one=1.0)
    dark = hardware.simulate_spc(np.zeros((K, K)), bright, adc_bits=12, full_scale=512.0, calibration=true)
    full = hardware.simulate_spc(np.ones((K, K)), bright, adc_bits=12, full_scale=512.0, calibration=true)
    est = hardware.estimate_calibration(dark.counts(), full.counts(), K * K, adc)
    assert est.gain == pytest.approx(1.7, abs=2e-3) and est.offset == pytest.approx(20.0, abs=0.2)
    bank = init_uniform(5, K, seed=0)
    img = _scene(K, K)
    fr = hardware.simulate_spc(img, bank, adc_bits=12, full_scale=512.0, calibration=true)
    np.testing.assert_allclose(hardware.normalize(fr, est), fr.ideal, atol=0.5)


# --------------------------------------------------------------------------
# measurement files


def _write_frame(tmp_path, m=3, K=4):
    bank = init_uniform(m, K, seed=0)
    fr = hardware.simulate_spc(_scene(8, 8), bank, full_scale=float(K * K))
    path = hardware.write_measurements(tmp_path / "frame.csv", fr)
    return fr, path


def test_measurement_file_round_trip(tmp_path):
    fr, path = _write_frame(tmp_path)
    back = hardware.read_measurements(path)
    assert np.array_equal(back.counts(), fr.counts())
    assert json.loads(hardware.sidecar_path(path).read_text())["m"] == 3
    y = hardware.import_measurements(path)
    assert y.shape == (1, 3, 2, 2)


def _rewrite(path, lines):
    path.write_text("pattern_index,block_row,block_col,adc_count\n" + "".join(line + "\n" for line in lines))


def _lines(path):
    return path.read_text().splitlines()[1:]


def test_duplicate_rejected(tmp_path):
    _, path = _write_frame(tmp_path)
    lines = _lines(path)
    _rewrite(path, lines + [lines[0]])
    with pytest.raises(DuplicateEntryError):
        hardware.read_measurements(path)


def test_missing_entries_listed(tmp_path):
    _, path = _write_frame(tmp_path)
    lines = _lines(path)
    _rewrite(path, lines[1:])
    with pytest.raises(IncompleteFrameError, match=r"1 missing.*\(0, 0, 0\)"):
        hardware.read_measurements(path)


def test_empty_file_incomplete(tmp_path):
    _, path = _write_frame(tmp_path)
    path.write_text("")
    with pytest.raises(IncompleteFrameError):
        hardware.read_measurements(path)


def test_out_of_range_count(tmp_path):
    _, path = _write_frame(tmp_path)
    lines = _lines(path)
    lines[0] = ",".join(lines[0].split(",")[:3] + ["1024"])
    _rewrite(path, lines)
    with pytest.raises(ADCRangeError):
        hardware.read_measurements(path)


def test_missing_sidecar(tmp_path):
    _, path = _write_frame(tmp_path)
    hardware.sidecar_path(path).unlink()
    with pytest.raises(OSError, match="sidecar"):
        hardware.read_measurements(path)


def test_noiseless_hardware_path_matches_software(tmp_path):
    cfg = NetworkConfig(channels=16, blocks=6)
    params = init_params(cfg, seed=0)
    from lshr import data

    img = data.load_digits_corpus()[5:6].astype(np.float32)
    low = data.downscale(img, cfg.s)
    fr = hardware.simulate_spc(low[0, 0], params.bank)
    path = hardware.write_measurements(tmp_path / "m.csv", fr)
    with no_grad():
        hw = reconstruct_from_measurements(hardware.import_measurements(path), params, cfg).data
        _, sw = forward(img, params, cfg)
    assert psnr(np.clip(hw, 0, 1), np.clip(sw.data, 0, 1)) >= 40
