"""PSNR reports, reconstruction-layer complexity accounting and curve output."""

from __future__ import annotations

import csv
import io
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .container import atomic_write_text
from .errors import DimensionError, UsageError

log = logging.getLogger(__name__)


def psnr(x, y, max_val: float = 1.0) -> float:
    """``10 log10(max_val**2 / MSE)`` in dB; ``inf`` when the images are identical."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"psnr: shapes {x.shape} and {y.shape} differ")
    if max_val <= 0:
        raise ValueError("max_val must be > 0")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def finite_mean(values: Sequence[float]) -> float:
    """Arithmetic mean of the finite entries; infinite sentinels are dropped with a warning."""
    finite = [v for v in values if math.isfinite(v)]
    dropped = len(values) - len(finite)
    if dropped:
        log.warning("excluding %d infinite PSNR value(s) from the mean", dropped)
    return float(np.mean(finite)) if finite else math.inf


@dataclass
class EvalReport:
    psnr: list[float]
    ratio: float | None
    keep_fraction: float | None = None
    seconds_per_image: float | None = None
    label: str = "lshr"

    @property
    def mean_psnr(self) -> float:
        return finite_mean(self.psnr)

    def summary(self) -> dict:
        return {
            "label": self.label,
            "images": len(self.psnr),
            "mean_psnr": self.mean_psnr,
            "ratio": self.ratio,
            "keep_fraction": self.keep_fraction,
            "seconds_per_image": self.seconds_per_image,
        }


def _median_seconds(fn, reps: int) -> float:
    times = []
    for _ in range(max(reps, 1)):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def evaluate(
    params,
    config,
    images: np.ndarray,
    references: np.ndarray | None = None,
    keep_fraction: float | None = None,
    batch_size: int = 64,
    timing_reps: int = 5,
) -> EvalReport:
    """Run the full model on ``images`` and score against ``references``.

    ``references`` defaults to the input images. With ``keep_fraction`` the
    inputs (and default references) are DCT-sparsified first. Timing is the
    median over ``timing_reps`` runs of the measurement-to-image path.
    """
    from . import data
    from .network import forward, reconstruct_from_measurements, sensing_image
    from .sensing import sense
    from .tensor import no_grad

    if images is None or len(images) == 0:
        raise UsageError("evaluate needs at least one image")
    images = np.asarray(images, dtype=config.dtype)
    if keep_fraction is not None:
        images = data.sparsify_dct(images, keep_fraction).astype(config.dtype)
    refs = images if references is None else np.asarray(references)
    scores: list[float] = []
    measurements = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            x = images[start : start + batch_size]
            _, fin = forward(x, params, config)
            out = np.clip(fin.data, 0.0, 1.0)
            scores.extend(psnr(o, r) for o, r in zip(out, refs[start : start + batch_size]))
            measurements.append(sense(sensing_image(x, config), params.bank))

        def run():
            for y in measurements:
                reconstruct_from_measurements(y, params, config)

        seconds = _median_seconds(run, timing_reps) / len(images) if timing_reps else None
    return EvalReport(scores, config.R, keep_fraction, seconds)


def bicubic_baseline(images: np.ndarray, s: int, keep_fraction: float | None = None) -> EvalReport:
    """Downscale by ``s`` then upscale back, both bicubic, clamped to [0, 1]."""
    from . import data

    if images is None or len(images) == 0:
        raise UsageError("baseline needs at least one image")
    images = np.asarray(images, dtype=np.float64)
    if keep_fraction is not None:
        images = data.sparsify_dct(images, keep_fraction)
    rebuilt = data.upscale(data.downscale(images, s), s)
    return EvalReport([psnr(a, b) for a, b in zip(rebuilt, images)], None, keep_fraction, label="bicubic")


# --------------------------------------------------------------------------
# complexity


@dataclass
class ComplexityReport:
    """Cost of the measurement-to-preliminary-image layer.

    ``space = K^2 * C_in * C_out`` and ``time = M^2 * K^2 * C_in * C_out`` with
    ``M`` the side of the layer's output feature map. The pattern bank is
    counted separately at one bit per weight. ``weights_per_kernel`` and
    ``weights_total`` are both given because published tables differ on which
    one is meant. ``network_params`` counts the real-valued weights and
    biases of both sub-networks; the binary bank is in ``pattern_bits``.
    """

    space: int
    time: int
    weights_per_kernel: int
    weights_total: int
    weight_format: str
    m: int
    K: int
    M: int
    c_in: int
    c_out: int
    pattern_bits: int
    pattern_bytes: int
    network_params: int
    block_params: int

    def to_dict(self) -> dict:
        return asdict(self)


def complexity(config, image_h: int, image_w: int | None = None, m: int | None = None) -> ComplexityReport:
    """Evaluate the complexity formulas for restoring an ``image_h x image_w`` image.

    Unless given, the kernel count follows the efficiency-table convention of
    applying ``R`` to the restored image's pixel count.
    """
    from .network import kernel_count

    image_w = image_h if image_w is None else image_w
    if m is None:
        m = kernel_count(config.R, image_h * image_w)
    mh, mw = image_h // config.s, image_w // config.s
    K, c_in, c_out = config.K, m, 1
    space = K * K * c_in * c_out
    C, s2 = config.channels, config.s**2
    block = 2 * C * C * 9 + (2 * C if config.block_bias else 0)
    net = (m * K * K + 1) + (C * 9 + C) + block + (s2 * C * 9 + s2) + (s2 * 9 + s2)
    return ComplexityReport(
        space=space,
        time=mh * mw * space,
        weights_per_kernel=K * K,
        weights_total=m * K * K,
        weight_format="1-bit",
        m=m,
        K=K,
        M=mh,
        c_in=c_in,
        c_out=c_out,
        pattern_bits=m * K * K,
        pattern_bytes=m * math.ceil(K * K / 8),
        network_params=net,
        block_params=block,
    )


# --------------------------------------------------------------------------
# CSV output


def _row_dict(row) -> dict:
    if is_dataclass(row):
        return {f.name: getattr(row, f.name) for f in fields(row)}
    return dict(row)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple)):
        return ";".join(_fmt(x) for x in v)
    return str(v)


def to_csv(rows: Sequence, columns: Sequence[str] | None = None) -> str:
    dicts = [_row_dict(r) for r in rows]
    if columns is None:
        columns = list(dicts[0]) if dicts else []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for d in dicts:
        writer.writerow([_fmt(d.get(c)) for c in columns])
    return buf.getvalue()


def _parse(raw: str):
    if raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def from_csv(text: str) -> list[dict]:
    return [{k: _parse(v) for k, v in rec.items()} for rec in csv.DictReader(io.StringIO(text))]


def sparsity_report(history: Sequence) -> str:
    """CSV of ``step, fraction_ones, min_pattern, max_pattern`` per recorded step."""
    rows = []
    for st in history:
        per = st.per_pattern_fraction or [st.fraction_ones]
        rows.append({"step": st.step, "fraction_ones": st.fraction_ones,
                     "min_pattern": min(per), "max_pattern": max(per)})
    return to_csv(rows, ["step", "fraction_ones", "min_pattern", "max_pattern"])


def emit_curves(history: Sequence, csv_path, png_path=None, columns: Sequence[str] | None = None) -> Path:
    """Write training curves as CSV and, optionally, a PNG plot of them."""
    text = to_csv(history, columns)
    atomic_write_text(csv_path, text)
    if png_path is not None:
        _plot(from_csv(text), png_path)
    return Path(csv_path)


def read_curves(csv_path) -> list[dict]:
    return from_csv(Path(csv_path).read_text())


def _plot(rows: list[dict], png_path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = [c for c in ("loss", "val_loss", "fraction_ones", "val_psnr") if rows and c in rows[0]]
    fig, axes = plt.subplots(len(series) or 1, 1, figsize=(6, 2.2 * max(len(series), 1)), squeeze=False)
    steps = [r.get("step", i) for i, r in enumerate(rows)]
    for ax, name in zip(axes[:, 0], series):
        pts = [(s, r[name]) for s, r in zip(steps, rows) if isinstance(r.get(name), (int, float))
               and math.isfinite(r[name])]
        if pts:
            ax.plot(*zip(*pts))
        ax.set_ylabel(name)
    axes[-1, 0].set_xlabel("step")
    fig.tight_layout()
    fig.savefig(png_path)
    plt.close(fig)


# --------------------------------------------------------------------------
# block-count sweep


@dataclass
class SweepRow:
    blocks: int
    mean_psnr: float | None
    seconds_per_image: float
    params: int = 0
    extra: dict = field(default_factory=dict)


def time_reconstruction(params, config, measurements, reps: int = 5) -> float:
    """Median wall-clock seconds of one measurement-to-image pass."""
    from .network import reconstruct_from_measurements
    from .tensor import no_grad

    with no_grad():
        return _median_seconds(lambda: reconstruct_from_measurements(measurements, params, config), reps)


def sweep_blocks(
    config,
    block_counts: Sequence[int],
    train_images: np.ndarray | None = None,
    test_images: np.ndarray | None = None,
    train_config=None,
    reps: int = 5,
    seed: int = 0,
) -> list[SweepRow]:
    """PSNR and reconstruction time as a function of the recursive block count.

    Without training data only timing is measured (on fresh parameters).
    """
    from dataclasses import replace

    from .network import init_params, sensing_image
    from .sensing import sense
    from .tensor import no_grad

    rows = []
    for blocks in block_counts:
        cfg = replace(config, blocks=int(blocks))
        if train_images is not None and train_config is not None:
            from .training import train

            params = train(train_images, train_config, cfg).params
        else:
            params = init_params(cfg, seed=seed)
        probe = test_images if test_images is not None else np.zeros((1, 1, cfg.image_size, cfg.image_size))
        with no_grad():
            y = sense(sensing_image(probe[:1], cfg), params.bank)
        seconds = time_reconstruction(params, cfg, y, reps)
        score = None
        if test_images is not None and train_images is not None:
            score = evaluate(params, cfg, test_images, timing_reps=0).mean_psnr
        rows.append(SweepRow(int(blocks), score, seconds, params.count()))
    return rows
