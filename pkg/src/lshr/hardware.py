"""DMD pattern files, a single-pixel-camera simulator and measurement ingestion.

Pattern file layout (little-endian)::

    8 bytes  magic b"LSHRPAT\\0"
    u16      version (1)
    u16      K (pattern side, pixels)
    u32      m (pattern count)
    u32      bytes per pattern = ceil(K*K / 8)
    payload  m * bytes_per_pattern; each pattern row-major, MSB first,
             zero-padded to a byte boundary
    u32      CRC-32 of header + payload

Measurements travel as CSV (``pattern_index,block_row,block_col,adc_count``)
with a JSON sidecar ``<name>.json`` carrying m, K, grid size, ADC settings and
the affine calibration.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import atomic_write_bytes, atomic_write_text
from .errors import (
    ADCRangeError,
    CorruptFileError,
    DimensionError,
    DuplicateEntryError,
    IncompleteFrameError,
)
from .sensing import PatternBank

PATTERN_MAGIC = b"LSHRPAT\0"
PATTERN_VERSION = 1
MEASUREMENT_VERSION = 1
_HEADER = struct.Struct("<8sHHII")
CSV_COLUMNS = ("pattern_index", "block_row", "block_col", "adc_count")


# --------------------------------------------------------------------------
# pattern files


@dataclass
class PatternFile:
    K: int
    m: int
    payload: bytes
    checksum: int
    version: int = PATTERN_VERSION

    @property
    def bytes_per_pattern(self) -> int:
        return math.ceil(self.K * self.K / 8)

    def bits(self) -> np.ndarray:
        """Unpacked patterns as ``uint8[m, 1, K, K]``."""
        packed = np.frombuffer(self.payload, dtype=np.uint8).reshape(self.m, self.bytes_per_pattern)
        bits = np.unpackbits(packed, axis=1, count=self.K * self.K, bitorder="big")
        return bits.reshape(self.m, 1, self.K, self.K)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(PATTERN_MAGIC, self.version, self.K, self.m, self.bytes_per_pattern)
        return head + self.payload + struct.pack("<I", self.checksum)


def pack_patterns(bits: np.ndarray) -> PatternFile:
    bits = np.asarray(bits)
    if bits.ndim == 3:
        bits = bits[:, None]
    m, _, K, _ = bits.shape
    flat = (bits.reshape(m, K * K) != 0).astype(np.uint8)
    payload = np.packbits(flat, axis=1, bitorder="big").tobytes()
    head = _HEADER.pack(PATTERN_MAGIC, PATTERN_VERSION, K, m, math.ceil(K * K / 8))
    return PatternFile(K, m, payload, zlib.crc32(head + payload))


def unpack_patterns(blob: bytes) -> PatternFile:
    if len(blob) < _HEADER.size + 4:
        raise CorruptFileError("pattern file is truncated")
    magic, version, K, m, bpp = _HEADER.unpack_from(blob)
    if magic != PATTERN_MAGIC:
        raise CorruptFileError("not a pattern file (bad magic)")
    if version != PATTERN_VERSION:
        raise CorruptFileError(f"unsupported pattern file version {version}")
    if bpp != math.ceil(K * K / 8):
        raise CorruptFileError(f"bytes per pattern {bpp} inconsistent with K={K}")
    end = _HEADER.size + m * bpp
    if len(blob) != end + 4:
        raise CorruptFileError(f"pattern file length {len(blob)} does not match m={m}, K={K}")
    (checksum,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(blob[:end]) != checksum:
        raise CorruptFileError("pattern file checksum mismatch")
    return PatternFile(K, m, bytes(blob[_HEADER.size : end]), checksum, version)


def export_patterns(bank: PatternBank | np.ndarray, path) -> PatternFile:
    bits = bank.bits() if isinstance(bank, PatternBank) else bank
    pf = pack_patterns(bits)
    atomic_write_bytes(path, pf.to_bytes())
    return pf


def import_patterns(path) -> np.ndarray:
    """Read a pattern file back as ``uint8[m, 1, K, K]``."""
    return unpack_patterns(Path(path).read_bytes()).bits()


# --------------------------------------------------------------------------
# simulator


@dataclass(frozen=True)
class ADC:
    bits: int = 10
    full_scale: float = 256.0

    @property
    def levels(self) -> int:
        return 2**self.bits

    @property
    def lsb(self) -> float:
        return self.full_scale / self.levels

    def quantize(self, volts: np.ndarray) -> tuple[np.ndarray, int]:
        """Codes ``floor(v / lsb)`` clamped to the range, plus the clamp count."""
        raw = np.floor(np.asarray(volts, dtype=np.float64) / self.lsb)
        saturated = int(np.count_nonzero((raw < 0) | (raw > self.levels - 1)))
        return np.clip(raw, 0, self.levels - 1).astype(np.int64), saturated

    def dequantize(self, counts) -> np.ndarray:
        """Centre of each code's bin."""
        return (np.asarray(counts, dtype=np.float64) + 0.5) * self.lsb


@dataclass(frozen=True)
class Calibration:
    """Detector reading = ``gain * measurement + offset`` (in ADC input units)."""

    gain: float = 1.0
    offset: float = 0.0


@dataclass(frozen=True)
class MeasurementRecord:
    pattern_index: int
    block_row: int
    block_col: int
    adc_count: int
    gain: float = 1.0
    offset: float = 0.0


@dataclass
class Frame:
    """One full acquisition: every pattern at every block position."""

    records: list[MeasurementRecord]
    m: int
    K: int
    grid: tuple[int, int]
    adc: ADC
    calibration: Calibration = field(default_factory=Calibration)
    saturated: int = 0
    ideal: np.ndarray | None = None  # [m, h, w] noiseless measurements
    noisy: np.ndarray | None = None  # [m, h, w] before quantization

    def counts(self) -> np.ndarray:
        out = np.zeros((self.m, *self.grid), dtype=np.int64)
        for r in self.records:
            out[r.pattern_index, r.block_row, r.block_col] = r.adc_count
        return out

    def header(self) -> dict:
        return {
            "version": MEASUREMENT_VERSION,
            "m": self.m,
            "K": self.K,
            "grid": list(self.grid),
            "adc_bits": self.adc.bits,
            "full_scale": self.adc.full_scale,
            "gain": self.calibration.gain,
            "offset": self.calibration.offset,
        }


def ideal_measurements(image: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """Per-block sums of pixels under each pattern: ``[H, W] -> [m, H/K, W/K]``."""
    image = np.asarray(image, dtype=np.float64)
    image = image.reshape(image.shape[-2:])
    m, K = bits.shape[0], bits.shape[-1]
    h, w = image.shape
    if h % K or w % K:
        raise DimensionError(f"image {h}x{w} is not a whole number of {K}x{K} blocks")
    blocks = image.reshape(h // K, K, w // K, K).transpose(0, 2, 1, 3)
    return np.einsum("ijab,pab->pij", blocks, bits.reshape(m, K, K).astype(np.float64))


def simulate_spc(
    image: np.ndarray,
    bank: PatternBank | np.ndarray,
    snr_db: float | None = None,
    adc_bits: int = 10,
    full_scale: float | None = None,
    seed: int = 0,
    frame: int = 0,
    calibration: Calibration = Calibration(),
) -> Frame:
    """Simulate one single-pixel-camera frame of ``image`` (low resolution, [0, 1]).

    Noise is zero-mean Gaussian with power set so that the frame's mean
    squared ideal measurement over the noise power equals ``snr_db``. The
    detector applies ``calibration`` before the ADC. ``frame`` selects an
    independent noise stream for the same ``seed``.
    """
    bits = bank.bits() if isinstance(bank, PatternBank) else np.asarray(bank)
    m, K = bits.shape[0], bits.shape[-1]
    if full_scale is None:
        full_scale = float(K * K)
    if full_scale <= 0:
        raise ValueError("full_scale must be > 0")
    ideal = ideal_measurements(image, bits)
    noisy = ideal
    if snr_db is not None:
        rng = np.random.default_rng([seed, frame])
        signal_power = float(np.mean(ideal**2))
        sigma = math.sqrt(signal_power / 10 ** (snr_db / 10)) if signal_power > 0 else 0.0
        noisy = ideal + rng.normal(0.0, sigma, size=ideal.shape)
    adc = ADC(adc_bits, full_scale)
    counts, saturated = adc.quantize(calibration.gain * noisy + calibration.offset)
    records = [
        MeasurementRecord(int(p), int(i), int(j), int(counts[p, i, j]), calibration.gain, calibration.offset)
        for p, i, j in np.ndindex(counts.shape)
    ]
    return Frame(records, m, K, counts.shape[1:], adc, calibration, saturated, ideal, noisy)


def empirical_snr_db(ideal: np.ndarray, observed: np.ndarray) -> float:
    """``10 log10(signal power / error power)`` pooled over all given values."""
    ideal = np.asarray(ideal, dtype=np.float64)
    err = np.asarray(observed, dtype=np.float64) - ideal
    return 10.0 * math.log10(float(np.mean(ideal**2)) / float(np.mean(err**2)))


def estimate_calibration(dark_counts, bright_counts, bright_value: float, adc: ADC) -> Calibration:
    """Affine calibration from an all-mirrors-off and an all-mirrors-on frame.

    ``bright_value`` is the true measurement of the bright reference (e.g.
    ``K*K`` for a uniform white scene).
    """
    offset = float(np.mean(adc.dequantize(dark_counts)))
    gain = (float(np.mean(adc.dequantize(bright_counts))) - offset) / bright_value
    if gain <= 0:
        raise ValueError("bright reference is not brighter than the dark reference")
    return Calibration(gain, offset)


# --------------------------------------------------------------------------
# measurement files


def write_measurements(path, frame: Frame) -> Path:
    """CSV of records plus a ``.json`` sidecar next to it."""
    path = Path(path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in frame.records:
        writer.writerow([r.pattern_index, r.block_row, r.block_col, r.adc_count])
    atomic_write_text(path, buf.getvalue())
    atomic_write_text(sidecar_path(path), json.dumps(frame.header(), indent=2, sort_keys=True) + "\n")
    return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def read_measurements(path) -> Frame:
    """Parse and validate a measurement CSV and its sidecar."""
    path = Path(path)
    try:
        header = json.loads(sidecar_path(path).read_text())
    except FileNotFoundError:
        raise OSError(f"missing sidecar header {sidecar_path(path)}") from None
    m, K = int(header["m"]), int(header["K"])
    grid = tuple(int(v) for v in header["grid"])
    adc = ADC(int(header["adc_bits"]), float(header["full_scale"]))
    cal = Calibration(float(header.get("gain", 1.0)), float(header.get("offset", 0.0)))
    text = path.read_text()
    reader = csv.reader(io.StringIO(text))
    rows = [r for r in reader if r]
    if rows and rows[0] and rows[0][0].strip() == CSV_COLUMNS[0]:
        rows = rows[1:]
    seen: set[tuple[int, int, int]] = set()
    records = []
    for line, row in enumerate(rows, start=2):
        if len(row) != 4:
            raise ValueError(f"{path}:{line}: expected 4 columns, got {len(row)}")
        p, i, j, c = (int(v) for v in row)
        if not (0 <= p < m and 0 <= i < grid[0] and 0 <= j < grid[1]):
            raise IndexError(f"{path}:{line}: entry ({p}, {i}, {j}) outside the {m}x{grid} frame")
        if not 0 <= c < adc.levels:
            raise ADCRangeError(f"{path}:{line}: adc_count {c} outside 0..{adc.levels - 1}")
        key = (p, i, j)
        if key in seen:
            raise DuplicateEntryError(f"{path}:{line}: duplicate entry for pattern {p}, block ({i}, {j})")
        seen.add(key)
        records.append(MeasurementRecord(p, i, j, c, cal.gain, cal.offset))
    expected = m * grid[0] * grid[1]
    if len(seen) != expected:
        gaps = [k for k in np.ndindex(m, *grid) if k not in seen]
        shown = ", ".join(str(g) for g in gaps[:10])
        more = f" and {len(gaps) - 10} more" if len(gaps) > 10 else ""
        raise IncompleteFrameError(f"{path}: {len(gaps)} missing (pattern, row, col) entries: {shown}{more}")
    return Frame(records, m, K, grid, adc, cal)


def normalize(frame: Frame, calibration: Calibration | None = None) -> np.ndarray:
    """Dequantize and undo the affine calibration: ``[m, h, w]`` in block-sum units."""
    cal = calibration or frame.calibration
    return (frame.adc.dequantize(frame.counts()) - cal.offset) / cal.gain


def import_measurements(path, calibration: Calibration | None = None, dtype=np.float32) -> np.ndarray:
    """Measurement tensor ``[1, m, h, w]`` ready for ``reconstruct_from_measurements``."""
    return normalize(read_measurements(path), calibration)[None].astype(dtype)


def frame_to_tensor(frame: Frame, dtype=np.float32) -> np.ndarray:
    return normalize(frame)[None].astype(dtype)

