"""Batch command-line front end.

Every command resolves a run configuration (file values, then flags), writes
it to ``<output_dir>/config.json`` and puts all artifacts under that
directory. Exit codes: 0 success, 2 configuration or usage error, 3 input
data or file-format error, 4 numerical failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import container, data, evaluation, hardware
from .errors import (
    ADCRangeError,
    ConfigurationError,
    CorruptFileError,
    DimensionError,
    DuplicateEntryError,
    IncompleteFrameError,
    NonFiniteError,
    UsageError,
)
from .network import NetworkConfig, forward, load_checkpoint, reconstruct_from_measurements
from .tensor import Tensor, no_grad
from .training import TrainConfig, history_to_csv, train

log = logging.getLogger("lshr")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

COMMANDS = (
    "prepare-data",
    "train",
    "evaluate",
    "sparsify-eval",
    "export-patterns",
    "simulate",
    "reconstruct",
    "complexity",
    "sweep-blocks",
)


# --------------------------------------------------------------------------
# run configuration


@dataclass
class DataConfig:
    corpus: str = "digits"            # "digits" (bundled with scikit-learn) or "directory"
    image_dir: str | None = None      # source images when corpus == "directory"
    patches: str | None = None        # prepared training patches; overrides corpus
    test_patches: str | None = None   # prepared held-out patches
    holdout: float = 0.15
    patches_per_image: int = 50
    split_seed: int = 0
    max_test_images: int | None = None


@dataclass
class SimulateConfig:
    snr_db: float | None = None
    adc_bits: int = 10
    full_scale: float | None = None
    frames: int = 1


@dataclass
class EvalConfig:
    keep_fractions: list = field(default_factory=lambda: [1.0, 0.2, 0.1, 0.05, 0.01])
    timing_reps: int = 5
    sweep_blocks: list = field(default_factory=lambda: [1, 2, 4, 6, 8])
    sweep_train: bool = False
    complexity_size: int = 32


@dataclass
class RunConfig:
    output_dir: str = "runs/default"
    checkpoint: str | None = None
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {
            "output_dir": self.output_dir,
            "checkpoint": self.checkpoint,
            "network": self.network.to_dict(),
            "train": self.train.to_dict(),
            "data": _plain(self.data),
            "simulate": _plain(self.simulate),
            "evaluate": _plain(self.evaluate),
        }


_SECTIONS = {"data": DataConfig, "simulate": SimulateConfig, "evaluate": EvalConfig}
_SCALARS = ("output_dir", "checkpoint")


def _plain(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def parse_run_config(raw: dict) -> RunConfig:
    """Build a RunConfig from nested dicts, reporting every bad key at once."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a mapping")
    problems = []
    known = set(_SCALARS) | {"network", "train"} | set(_SECTIONS)
    problems += [f"unknown key {k!r}" for k in sorted(set(raw) - known)]
    sections = {}
    for name, cls in [("network", NetworkConfig), ("train", TrainConfig), *_SECTIONS.items()]:
        value = raw.get(name) or {}
        if not isinstance(value, dict):
            problems.append(f"{name}: must be a mapping")
            continue
        problems += [f"unknown key {name}.{k}" for k in sorted(set(value) - _names(cls))]
        sections[name] = {k: v for k, v in value.items() if k in _names(cls)}

    # value checks run even when keys were bad so one pass reports everything
    built = {}
    for name, cls in [("network", NetworkConfig), ("train", TrainConfig), *_SECTIONS.items()]:
        if name not in sections:
            continue
        try:
            built[name] = cls.from_dict(sections[name]) if hasattr(cls, "from_dict") else cls(**sections[name])
        except (ConfigurationError, TypeError, ValueError) as exc:
            problems.append(f"{name}: {exc}")
    if problems:
        raise ConfigurationError("invalid config:\n  " + "\n  ".join(problems))
    return RunConfig(**{k: raw[k] for k in _SCALARS if k in raw}, **built)


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    import yaml

    return yaml.safe_load(text) or {}


def apply_overrides(raw: dict, args: argparse.Namespace) -> dict:
    """Merge command-line flags into the nested config dict."""
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    net = raw.setdefault("network", {})
    tr = raw.setdefault("train", {})
    if args.seed is not None:
        tr["seed"] = args.seed
    if args.ratio is not None:
        net["R"] = args.ratio
    if args.mode is not None:
        net["pattern_mode"] = args.mode
    if args.blocks is not None:
        net["blocks"] = args.blocks
    if args.precision is not None:
        net["precision"] = tr["precision"] = args.precision
    if args.deterministic:
        tr["deterministic"] = True
    if args.output_dir is not None:
        raw["output_dir"] = args.output_dir
    if args.checkpoint is not None:
        raw["checkpoint"] = args.checkpoint
    if args.max_steps is not None:
        tr["max_steps"] = args.max_steps
    return raw


def resolve(args: argparse.Namespace) -> RunConfig:
    raw = load_config_file(args.config) if args.config else {}
    return parse_run_config(apply_overrides(raw, args))


# --------------------------------------------------------------------------
# helpers


def _run_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    container.atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def _need(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _datasets(cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Training and held-out ``[N, 1, S, S]`` stacks at the network's image size."""
    d = cfg.data
    size = cfg.network.image_size
    if d.patches:
        tr = data.load_patches(_need(d.patches, "data.patches"))
        te = data.load_patches(_need(d.test_patches, "data.test_patches")) if d.test_patches else tr[:0]
    elif d.corpus == "digits":
        tr, te = data.split(data.load_digits_corpus(size), d.holdout, d.split_seed)
    elif d.corpus == "directory":
        images = data.load_directory(_need(d.image_dir, "data.image_dir"))
        patches, skipped = data.prepare_patches(images, d.patches_per_image, size, d.split_seed)
        if skipped:
            log.warning("%d image(s) smaller than %d px were skipped", skipped, size)
        if len(patches) == 0:
            raise UsageError("no usable images after cropping")
        tr, te = data.split(patches, d.holdout, d.split_seed)
    else:
        raise ConfigurationError(f"data.corpus={d.corpus!r} must be 'digits' or 'directory'")
    if tr.shape[-2:] != (size, size):
        raise DimensionError(f"patches are {tr.shape[-2:]}, network.image_size is {size}")
    if d.max_test_images is not None:
        te = te[: d.max_test_images]
    return tr, te


def _load_model(cfg: RunConfig):
    ckpt = load_checkpoint(_need(cfg.checkpoint, "checkpoint"))
    return ckpt.params, ckpt.config


# --------------------------------------------------------------------------
# commands


def cmd_prepare_data(cfg: RunConfig, out: Path, args) -> dict:
    # the held-out cap is an evaluation setting; prepared sets stay complete
    tr, te = _datasets(replace(cfg, data=replace(cfg.data, patches=None, max_test_images=None)))
    data.save_patches(out / "train_patches.lshr", tr)
    data.save_patches(out / "test_patches.lshr", te)
    return {"train_patches": len(tr), "test_patches": len(te), "size": cfg.network.image_size}


def cmd_train(cfg: RunConfig, out: Path, args) -> dict:
    tr, te = _datasets(cfg)
    ckpt = out / "checkpoint.lshr"
    result = train(tr, cfg.train, cfg.network, val_images=te if len(te) else None,
                   checkpoint_path=ckpt, max_seconds=args.max_seconds)
    container.atomic_write_text(out / "history.csv", history_to_csv(result.history))
    container.atomic_write_text(out / "sparsity.csv", evaluation.sparsity_report(result.sparsity))
    if args.plot:
        evaluation.emit_curves(result.history, out / "curves.csv", out / "curves.png")
    last = result.history[-1]
    return {
        "steps": result.step,
        "stopped_by": result.stopped_by,
        "final_loss": last.loss,
        "val_loss": last.val_loss,
        "val_psnr": last.val_psnr,
        "fraction_ones_start": result.sparsity[0].fraction_ones,
        "fraction_ones_end": result.sparsity[-1].fraction_ones,
        "checkpoint": str(ckpt),
    }


def _eval_rows(params, net, images, keep_fractions, reps):
    rows = []
    for f in keep_fractions:
        f = None if f is None or float(f) >= 1.0 else float(f)
        ours = evaluation.evaluate(params, net, images, keep_fraction=f, timing_reps=reps)
        base = evaluation.bicubic_baseline(images, net.s, keep_fraction=f)
        rows.append({"keep_fraction": 1.0 if f is None else f, "ratio": net.R,
                     "mean_psnr": ours.mean_psnr, "bicubic_psnr": base.mean_psnr,
                     "seconds_per_image": ours.seconds_per_image, "images": len(images)})
    return rows


def cmd_evaluate(cfg: RunConfig, out: Path, args) -> dict:
    params, net = _load_model(cfg)
    _, te = _datasets(replace(cfg, network=net))
    if len(te) == 0:
        raise UsageError("no held-out images to evaluate")
    rows = _eval_rows(params, net, te, [1.0], cfg.evaluate.timing_reps)
    container.atomic_write_text(out / "eval.csv", evaluation.to_csv(rows))
    return rows[0]


def cmd_sparsify_eval(cfg: RunConfig, out: Path, args) -> dict:
    params, net = _load_model(cfg)
    _, te = _datasets(replace(cfg, network=net))
    if len(te) == 0:
        raise UsageError("no held-out images to evaluate")
    rows = _eval_rows(params, net, te, cfg.evaluate.keep_fractions, cfg.evaluate.timing_reps)
    container.atomic_write_text(out / "sparsify_eval.csv", evaluation.to_csv(rows))
    return {"rows": rows}


def cmd_export_patterns(cfg: RunConfig, out: Path, args) -> dict:
    params, _ = _load_model(cfg)
    pf = hardware.export_patterns(params.bank, out / "patterns.lshrpat")
    return {"m": pf.m, "K": pf.K, "crc32": pf.checksum, "path": str(out / "patterns.lshrpat")}


def _simulation_inputs(cfg: RunConfig, args):
    params, net = _load_model(cfg)
    if args.image:
        img = data.load_grayscale(_need(args.image, "--image")).pixels
        img = data.crop_to_multiple(img, net.s * net.K)
    else:
        tr, _ = _datasets(replace(cfg, network=net))
        img = tr[args.index : args.index + 1]
    return params, net, np.asarray(img, dtype=np.float64)


def cmd_simulate(cfg: RunConfig, out: Path, args) -> dict:
    params, net, img = _simulation_inputs(cfg, args)
    low = data.downscale(img, net.s)
    sc = cfg.simulate
    data.save_grayscale(out / "scene.png", img[0, 0])
    paths, snrs = [], []
    for frame in range(sc.frames):
        fr = hardware.simulate_spc(low[0, 0], params.bank, snr_db=sc.snr_db, adc_bits=sc.adc_bits,
                                   full_scale=sc.full_scale, seed=cfg.train.seed, frame=frame)
        path = hardware.write_measurements(out / f"measurements_{frame:04d}.csv", fr)
        paths.append(str(path))
        if sc.snr_db is not None:
            snrs.append(hardware.empirical_snr_db(fr.ideal, fr.noisy))
    report = {"frames": sc.frames, "files": paths, "saturated": int(fr.saturated)}
    if snrs:
        report["empirical_snr_db"] = float(np.mean(snrs))
    return report


def cmd_reconstruct(cfg: RunConfig, out: Path, args) -> dict:
    params, net = _load_model(cfg)
    src = _need(args.measurements, "--measurements")
    y = hardware.import_measurements(src, dtype=net.dtype)
    with no_grad():
        img = reconstruct_from_measurements(Tensor(y), params, net).data
    img = np.clip(img, 0.0, 1.0)
    png = out / (Path(src).stem + "_reconstruction.png")
    data.save_grayscale(png, img[0, 0])
    report = {"measurements": str(src), "png": str(png), "shape": list(img.shape[-2:])}
    if args.reference:
        ref = data.crop_to_multiple(data.load_grayscale(_need(args.reference, "--reference")).pixels, net.s * net.K)
        report["psnr"] = evaluation.psnr(img, ref)
        with no_grad():
            _, fin = forward(ref.astype(net.dtype), params, net)
        report["psnr_software_path"] = evaluation.psnr(img, np.clip(fin.data, 0.0, 1.0))
    container.atomic_write_text(out / "reconstruct.txt",
                                "".join(f"{k}: {v}\n" for k, v in sorted(report.items())))
    return report


def cmd_complexity(cfg: RunConfig, out: Path, args) -> dict:
    size = cfg.evaluate.complexity_size
    rep = evaluation.complexity(cfg.network, size).to_dict()
    rep["image_size"] = size
    container.atomic_write_text(out / "complexity.csv", evaluation.to_csv([rep]))
    return rep


def cmd_sweep_blocks(cfg: RunConfig, out: Path, args) -> dict:
    tr = te = None
    if cfg.evaluate.sweep_train:
        tr, te = _datasets(cfg)
    rows = evaluation.sweep_blocks(cfg.network, cfg.evaluate.sweep_blocks, tr, te,
                                   cfg.train if cfg.evaluate.sweep_train else None,
                                   reps=cfg.evaluate.timing_reps, seed=cfg.train.seed)
    flat = [{"blocks": r.blocks, "mean_psnr": r.mean_psnr, "seconds_per_image": r.seconds_per_image,
             "params": r.params} for r in rows]
    container.atomic_write_text(out / "sweep_blocks.csv", evaluation.to_csv(flat))
    return {"rows": flat}


HANDLERS = {
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sparsify-eval": cmd_sparsify_eval,
    "export-patterns": cmd_export_patterns,
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "complexity": cmd_complexity,
    "sweep-blocks": cmd_sweep_blocks,
}


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--ratio", type=float, help="measurement ratio R, e.g. 0.01, 0.1, 0.25")
    common.add_argument("--mode", choices=("static", "learned"))
    common.add_argument("--blocks", type=int)
    common.add_argument("--precision", choices=("single", "double"))
    common.add_argument("--deterministic", action="store_true")
    common.add_argument("--output-dir", dest="output_dir")
    common.add_argument("--checkpoint")
    common.add_argument("--max-steps", dest="max_steps", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lshr", description="Learned binary sensing with high-resolution reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "train":
            p.add_argument("--max-seconds", dest="max_seconds", type=float)
            p.add_argument("--plot", action="store_true", help="also write curves.png")
        if name == "simulate":
            p.add_argument("--image", help="grayscale image; defaults to a training image")
            p.add_argument("--index", type=int, default=0, help="training image index when --image is absent")
        if name == "reconstruct":
            p.add_argument("--measurements", required=True)
            p.add_argument("--reference", help="ground-truth image for a PSNR line")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        out = _run_dir(cfg)
        _write_json(out / "config.json", cfg.to_dict())
        report = HANDLERS[args.command](cfg, out, args)
        _write_json(out / f"{args.command}.json", report)
        print(json.dumps(report, sort_keys=True, default=_json_default))
        return EXIT_OK
    except (ConfigurationError, UsageError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, CorruptFileError, IncompleteFrameError, DuplicateEntryError,
            ADCRangeError, DimensionError, OSError, IndexError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
