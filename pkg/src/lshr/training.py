"""Joint end-to-end training with the two-scale Charbonnier loss and Adam.

The reconstruction sub-net (pattern shadows, transposed-convolution kernels and
bias) and the residual-correction sub-net follow separate staircase
learning-rate schedules.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import data
from .errors import ConfigurationError, DimensionError, NonFiniteError
from .evaluation import psnr
from .network import (
    RECON_PARAMS,
    ModelParams,
    NetworkConfig,
    forward,
    init_params,
    save_checkpoint,
)
from .sensing import clip_shadow, sparsity
from .tensor import (
    Gradients,
    Tape,
    Tensor,
    add,
    backward,
    default_dtype,
    mean,
    no_grad,
    record_op,
    scale,
    subtract,
    sum_squares,
    total,
    use_tape,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 300
    max_steps: int | None = None  # desk-scale cap; None means epochs decide
    lr_recon: float = 1e-4
    decay_recon: float = 0.25
    lr_residual: float = 1e-5
    decay_residual: float = 0.75
    decay_step: int = 200_000
    weight_decay: float = 1e-4  # lambda of the l2 term
    regularize_shadow: bool = True
    epsilon: float = 1e-6  # Charbonnier
    omega: tuple[float, float] = (2.0, 4.0)  # 2**s for (low, high) scale
    pixel_reduction: str = "mean"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    precision: str = "single"
    eval_every: int = 0  # steps between validations; 0 means once per epoch
    checkpoint_every: int = 0
    deterministic: bool = True

    def __post_init__(self):
        problems = []
        for name in ("lr_recon", "lr_residual", "epsilon"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0")
        for name in ("decay_recon", "decay_residual"):
            if not 0.0 < getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 1 or self.decay_step < 1:
            problems.append("batch_size, epochs and decay_step must be >= 1")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.pixel_reduction not in ("mean", "sum"):
            problems.append("pixel_reduction must be 'mean' or 'sum'")
        if len(self.omega) != 2:
            problems.append("omega needs exactly two scale weights")
        if problems:
            raise ConfigurationError("; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["omega"] = list(self.omega)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown train keys: {', '.join(unknown)}")
        d = dict(d)
        if "omega" in d:
            d["omega"] = tuple(d["omega"])
        return cls(**d)


# --------------------------------------------------------------------------
# loss


def charbonnier(u: Tensor, epsilon: float) -> Tensor:
    """Elementwise ``sqrt(u**2 + epsilon)``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    root = np.sqrt(u.data * u.data + u.dtype.type(epsilon))
    return record_op("charbonnier", root, (u,), lambda g: (g * u.data / root,))


def regularizer(params: ModelParams, config: TrainConfig) -> list[Tensor]:
    """The tensors covered by the l2 term."""
    return [
        t for name, t in params.trainables().items()
        if config.regularize_shadow or name != "bank.shadow"
    ]


def loss(
    preliminary: Tensor,
    final: Tensor,
    gt_low,
    gt_high,
    params: ModelParams | None,
    config: TrainConfig,
) -> Tensor:
    """Two-scale Charbonnier loss plus ``lambda / (2N) * sum(w**2)``.

    Each scale contributes ``omega_s`` times the per-image Charbonnier penalty
    (mean or sum over pixels), averaged over the batch.
    """
    n = preliminary.shape[0]
    terms = []
    for omega, out, gt in zip(config.omega, (preliminary, final), (gt_low, gt_high)):
        gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=out.dtype))
        if gt.shape != out.shape:
            raise DimensionError(f"output {out.shape} and ground truth {gt.shape} differ")
        pen = charbonnier(subtract(out, gt), config.epsilon)
        if config.pixel_reduction == "mean":
            terms.append(scale(mean(pen), omega))
        else:
            terms.append(scale(total(pen), omega / n))
    value = add(terms[0], terms[1])
    if params is not None and config.weight_decay > 0:
        for t in regularizer(params, config):
            value = add(value, scale(sum_squares(t), config.weight_decay / (2 * n)))
    return value


def reconstruction_loss(preliminary, final, gt_low, gt_high, config: TrainConfig) -> float:
    """The data term alone (no regularization) as a float."""
    with no_grad():
        return loss(preliminary, final, gt_low, gt_high, None, config).item()


# --------------------------------------------------------------------------
# optimizer


def lr_at(step: int, init: float, decay: float, decay_step: int) -> float:
    """Staircase schedule ``init * decay ** floor(step / decay_step)``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return init * decay ** (step // decay_step)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{k}": v for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        out["adam.step"] = np.array([self.step], dtype=np.int64)
        return out


def lr_map(params: ModelParams, config: TrainConfig, step: int) -> dict[str, float]:
    """Learning rate for every trainable at ``step``; each gets exactly one schedule."""
    recon = lr_at(step, config.lr_recon, config.decay_recon, config.decay_step)
    resid = lr_at(step, config.lr_residual, config.decay_residual, config.decay_step)
    return {name: (recon if name in RECON_PARAMS else resid) for name in params.trainables()}


def _lookup(grads, name: str, t: Tensor):
    return grads.get(t) if isinstance(grads, Gradients) else grads.get(name)


def adam_step(
    params: dict[str, Tensor],
    grads,
    state: AdamState,
    lrs: dict[str, float],
    bank=None,
) -> None:
    """One bias-corrected Adam update in place, then clip the bank's shadows.

    ``grads`` may be the :class:`Gradients` returned by ``backward`` or a plain
    dict keyed by parameter name.
    """
    grads = {name: _lookup(grads, name, t) for name, t in params.items()}
    missing = [name for name, g in grads.items() if g is None]
    if missing:
        raise ConfigurationError(f"no gradient for trainable(s): {', '.join(missing)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (lrs[name] / c1) * m / (np.sqrt(v / c2) + state.eps)
        t.data -= update.astype(t.dtype, copy=False)
    if bank is not None and bank.learned:
        clip_shadow(bank)


# --------------------------------------------------------------------------
# training loop


@dataclass
class HistoryRow:
    step: int
    epoch: int
    loss: float
    val_loss: float | None = None
    val_recon_loss: float | None = None
    val_psnr: float | None = None
    lr_recon: float = 0.0
    lr_residual: float = 0.0
    fraction_ones: float = 0.0


HISTORY_COLUMNS = [f.name for f in fields(HistoryRow)]


@dataclass
class TrainResult:
    params: ModelParams
    history: list[HistoryRow]
    sparsity: list
    adam: AdamState
    step: int
    stopped_by: str

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def history_to_csv(history: list[HistoryRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for row in history:
        writer.writerow([_fmt(getattr(row, c)) for c in HISTORY_COLUMNS])
    return buf.getvalue()


def history_from_csv(text: str) -> list[HistoryRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        kw = {}
        for f in fields(HistoryRow):
            raw = rec[f.name]
            if raw == "":
                kw[f.name] = None
            elif f.name in ("step", "epoch"):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = float(raw)
        rows.append(HistoryRow(**kw))
    return rows


def validate(params: ModelParams, net: NetworkConfig, config: TrainConfig, images: np.ndarray,
             batch_size: int = 64) -> tuple[float, float, float]:
    """Mean full loss, data-only loss and PSNR (dB, [0,1] scale) over ``images``."""
    full = recon = 0.0
    scores = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            x = images[start : start + batch_size].astype(net.dtype)
            pre, fin = forward(x, params, net)
            gt_low = data.downscale(x, net.s)
            n = len(x)
            full += loss(pre, fin, gt_low, x, params, config).item() * n
            recon += loss(pre, fin, gt_low, x, None, config).item() * n
            scores.extend(psnr(a, b) for a, b in zip(np.clip(fin.data, 0, 1), x))
    finite = [v for v in scores if math.isfinite(v)]
    return full / len(images), recon / len(images), float(np.mean(finite)) if finite else math.inf


def _check_finite(step: int, value: float, params: ModelParams, grads=None) -> None:
    if math.isfinite(value):
        bad = [n for n, t in params.tensors().items() if not np.all(np.isfinite(t.data))]
        if not bad:
            return
        raise NonFiniteError(f"step {step}: non-finite values in {', '.join(bad)}")
    offenders = []
    if grads is not None:
        offenders = [n for n, t in params.trainables().items()
                     if grads.get(t) is not None and not np.all(np.isfinite(grads.get(t)))]
    detail = f" (non-finite gradients: {', '.join(offenders)})" if offenders else ""
    raise NonFiniteError(f"step {step}: loss is {value}{detail}")


def train(
    train_images: np.ndarray,
    config: TrainConfig,
    net: NetworkConfig,
    val_images: np.ndarray | None = None,
    params: ModelParams | None = None,
    max_seconds: float | None = None,
    checkpoint_path=None,
    progress=None,
) -> TrainResult:
    """Train on ``[N, 1, H, W]`` high-resolution images in [0, 1].

    Stops after ``config.epochs`` epochs, ``config.max_steps`` steps or
    ``max_seconds`` of wall time, whichever comes first. Wall-time stopping is
    not reproducible, so deterministic runs should rely on step counts.
    """
    if train_images.ndim != 4 or len(train_images) == 0:
        raise ConfigurationError(f"need a non-empty [N, 1, H, W] training set, got {train_images.shape}")
    with default_dtype(net.precision):
        return _train(train_images, config, net, val_images, params, max_seconds, checkpoint_path, progress)


def _train(train_images, config, net, val_images, params, max_seconds, checkpoint_path, progress):
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(net, seed=int(rng.integers(2**31)))
    trainables = params.trainables()
    assigned = lr_map(params, config, 0)
    if set(assigned) != set(trainables):
        raise ConfigurationError("learning-rate groups do not cover every trainable")

    adam = AdamState(beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    history: list[HistoryRow] = []
    sparsity_history: list = []
    sparsity(params.bank, 0, sparsity_history)
    x_all = train_images.astype(net.dtype, copy=False)
    gt_low_all = data.downscale(x_all, net.s).astype(net.dtype)
    n = len(x_all)
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    eval_every = config.eval_every or steps_per_epoch
    start = time.perf_counter()
    step = 0
    stopped_by = "epochs"

    if val_images is not None and len(val_images):
        v_full, v_recon, v_psnr = validate(params, net, config, val_images)
        history.append(HistoryRow(0, 0, math.nan, v_full, v_recon, v_psnr,
                                  config.lr_recon, config.lr_residual,
                                  sparsity_history[-1].fraction_ones))

    done = False
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            x, gt_low = x_all[idx], gt_low_all[idx]
            lrs = lr_map(params, config, step)
            tape = Tape()
            with use_tape(tape):
                pre, fin = forward(x, params, net)
                value = loss(pre, fin, gt_low, x, params, config)
                loss_value = value.item()
                if not math.isfinite(loss_value):
                    _check_finite(step, loss_value, params)
                grads = backward(value, tape)
            adam_step(trainables, grads, adam, lrs, bank=params.bank)
            step += 1
            _check_finite(step, loss_value, params, grads)
            frac = sparsity(params.bank, step, sparsity_history).fraction_ones
            row = HistoryRow(step, epoch, loss_value, lr_recon=lrs.get("recon_kernels", 0.0),
                             lr_residual=lrs.get("feat_kernels", 0.0), fraction_ones=frac)
            if val_images is not None and len(val_images) and step % eval_every == 0:
                row.val_loss, row.val_recon_loss, row.val_psnr = validate(params, net, config, val_images)
            history.append(row)
            if progress is not None:
                progress(row)
            if checkpoint_path is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, params, net, step, extra=adam.arrays())
            if config.max_steps is not None and step >= config.max_steps:
                stopped_by, done = "max_steps", True
                break
            if max_seconds is not None and time.perf_counter() - start >= max_seconds:
                stopped_by, done = "time", True
                break
        if done:
            break

    if val_images is not None and len(val_images) and history[-1].val_loss is None:
        last = history[-1]
        last.val_loss, last.val_recon_loss, last.val_psnr = validate(params, net, config, val_images)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, net, step, extra=adam.arrays())
    return TrainResult(params, history, sparsity_history, adam, step, stopped_by)
