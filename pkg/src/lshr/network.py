"""The LSHR model: binary sensing at low resolution, transposed-convolution
reconstruction of a preliminary image, then recursive residual correction and
sub-pixel upscaling to the full output size.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import container, data
from .errors import ConfigurationError, DimensionError
from .sensing import LEARNED, MODES, PatternBank, init_bernoulli, init_uniform, sense
from .tensor import (
    Tensor,
    add,
    conv2d,
    leaky_relu,
    pixel_shuffle,
    scale,
    transposed_conv2d,
)

CHECKPOINT_KIND = "lshr-checkpoint"


def kernel_count(R: float, n: int) -> int:
    """Number of sensing patterns for ratio ``R`` over ``n`` pixels (half away from zero)."""
    if not 0.0 < R <= 1.0:
        raise ConfigurationError(f"measurement ratio must lie in (0, 1], got {R}")
    if n < 1:
        raise ConfigurationError(f"pixel count must be >= 1, got {n}")
    return max(1, math.floor(R * n + 0.5))


@dataclass(frozen=True)
class NetworkConfig:
    K: int = 16
    R: float = 0.25
    s: int = 2
    channels: int = 64
    blocks: int = 6
    leaky_p: float = 0.2
    pattern_mode: str = LEARNED
    image_size: int = 32  # high-resolution side used to size the pattern bank
    block_bias: bool = False
    precision: str = "single"

    def __post_init__(self):
        problems = []
        if not 0.0 < self.R <= 1.0:
            problems.append(f"R={self.R} must lie in (0, 1]")
        for name in ("K", "s", "channels", "blocks", "image_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name}={getattr(self, name)} must be >= 1")
        if not 0.0 <= self.leaky_p < 1.0:
            problems.append(f"leaky_p={self.leaky_p} must lie in [0, 1)")
        if self.pattern_mode not in MODES:
            problems.append(f"pattern_mode={self.pattern_mode!r} must be one of {MODES}")
        if self.precision not in ("single", "double"):
            problems.append(f"precision={self.precision!r} must be 'single' or 'double'")
        if self.s >= 1 and self.K >= 1 and self.image_size % (self.s * self.K):
            problems.append(f"image_size={self.image_size} must be a multiple of s*K={self.s * self.K}")
        if problems:
            raise ConfigurationError("; ".join(problems))

    @property
    def sensing_size(self) -> int:
        return self.image_size // self.s

    @property
    def m(self) -> int:
        return kernel_count(self.R, self.sensing_size**2)

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown network keys: {', '.join(unknown)}")
        return cls(**d)


# Groups for the two learning-rate schedules.
RECON_PARAMS = ("bank.shadow", "recon_kernels", "recon_bias")


@dataclass(eq=False)
class ModelParams:
    bank: PatternBank
    recon_kernels: Tensor  # [m, 1, K, K], real-valued
    recon_bias: Tensor  # [1]
    feat_kernels: Tensor  # [C, 1, 3, 3]
    feat_bias: Tensor
    block_w1: Tensor  # [C, C, 3, 3], shared by every block
    block_w2: Tensor
    res_out_kernels: Tensor  # [s*s, C, 3, 3]
    res_out_bias: Tensor
    up_kernels: Tensor  # [s*s, 1, 3, 3]
    up_bias: Tensor
    block_b1: Tensor | None = None
    block_b2: Tensor | None = None

    _TENSOR_FIELDS = (
        "recon_kernels", "recon_bias", "feat_kernels", "feat_bias", "block_w1", "block_w2",
        "block_b1", "block_b2", "res_out_kernels", "res_out_bias", "up_kernels", "up_bias",
    )

    def __post_init__(self):
        for name, t in self.tensors().items():
            if name != "bank.shadow":
                t.requires_grad = True
            t.name = name

    def tensors(self) -> dict[str, Tensor]:
        """Every real-valued stored tensor, shadow weights included."""
        out = {"bank.shadow": self.bank.shadow}
        for name in self._TENSOR_FIELDS:
            t = getattr(self, name)
            if t is not None:
                out[name] = t
        return out

    def trainables(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors().items() if t.requires_grad}

    def block_tensors(self) -> list[Tensor]:
        return [t for t in (self.block_w1, self.block_w2, self.block_b1, self.block_b2) if t is not None]

    def count(self) -> int:
        return sum(t.size for t in self.tensors().values())


def _kaiming_uniform(rng, shape, p, dtype, gain=1.0):
    fan_in = int(np.prod(shape[1:]))
    bound = gain * math.sqrt(6.0 / ((1.0 + p * p) * fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


def init_params(config: NetworkConfig, seed: int = 0) -> ModelParams:
    """Fresh parameters.

    The upscale branch starts as nearest-neighbour interpolation and the last
    residual layers start small, so the untrained model already outputs an
    upsampled preliminary image.
    """
    rng = np.random.default_rng(seed)
    dt = config.dtype
    m, K, C, s2, p = config.m, config.K, config.channels, config.s**2, config.leaky_p
    bank_seed = int(rng.integers(2**31))
    if config.pattern_mode == LEARNED:
        bank = init_uniform(m, K, seed=bank_seed, dtype=dt)
    else:
        bank = init_bernoulli(m, K, 0.5, seed=bank_seed, dtype=dt)
    recon_bound = 1.0 / math.sqrt(m)
    up = np.zeros((s2, 1, 3, 3), dtype=dt)
    up[:, 0, 1, 1] = 1.0
    return ModelParams(
        bank=bank,
        recon_kernels=Tensor(rng.uniform(-recon_bound, recon_bound, size=(m, 1, K, K)).astype(dt)),
        recon_bias=Tensor(np.zeros(1, dtype=dt)),
        feat_kernels=_kaiming_uniform(rng, (C, 1, 3, 3), p, dt),
        feat_bias=Tensor(np.zeros(C, dtype=dt)),
        block_w1=_kaiming_uniform(rng, (C, C, 3, 3), p, dt),
        block_w2=_kaiming_uniform(rng, (C, C, 3, 3), p, dt, gain=0.1),
        block_b1=Tensor(np.zeros(C, dtype=dt)) if config.block_bias else None,
        block_b2=Tensor(np.zeros(C, dtype=dt)) if config.block_bias else None,
        res_out_kernels=_kaiming_uniform(rng, (s2, C, 3, 3), p, dt, gain=0.1),
        res_out_bias=Tensor(np.zeros(s2, dtype=dt)),
        up_kernels=Tensor(up),
        up_bias=Tensor(np.zeros(s2, dtype=dt)),
    )


# --------------------------------------------------------------------------
# forward pieces


def measurement_scale(K: int) -> float:
    """Fixed factor applied to raw block sums before the transposed convolution."""
    return 1.0 / (K * K)


def reconstruct_preliminary(measurements: Tensor, params: ModelParams) -> Tensor:
    """Transposed convolution (stride K) of the measurements plus the scalar bias."""
    m, K = params.recon_kernels.shape[0], params.recon_kernels.shape[-1]
    if measurements.ndim != 4 or measurements.shape[1] != m:
        raise DimensionError(f"expected measurements [B, {m}, h, w], got {measurements.shape}")
    y = scale(measurements, measurement_scale(K))
    return transposed_conv2d(y, params.recon_kernels, stride=K, bias=params.recon_bias)


def residual_block(
    a_prev: Tensor,
    a0: Tensor,
    w1: Tensor,
    w2: Tensor,
    leaky_p: float,
    b1: Tensor | None = None,
    b2: Tensor | None = None,
) -> Tensor:
    """``w2 * act(w1 * act(a_prev)) + a0`` with size-preserving 3x3 convolutions."""
    if a_prev.shape != a0.shape:
        raise DimensionError(f"block input {a_prev.shape} and initial features {a0.shape} differ")
    h = conv2d(leaky_relu(a_prev, leaky_p), w1, bias=b1, padding=1)
    h = conv2d(leaky_relu(h, leaky_p), w2, bias=b2, padding=1)
    return add(h, a0)


def residual_correction(
    preliminary: Tensor,
    params: ModelParams,
    config: NetworkConfig,
    block_weights: list[tuple[Tensor, Tensor]] | None = None,
) -> Tensor:
    """Upscale the preliminary image by ``s`` and add the learned residual.

    ``block_weights`` replaces the shared block weights with one (w1, w2) pair
    per block; it exists to compare the recursive model with an unrolled one.
    """
    s, p = config.s, config.leaky_p
    a0 = conv2d(preliminary, params.feat_kernels, bias=params.feat_bias, padding=1)
    a = a0
    if block_weights is None:
        block_weights = [(params.block_w1, params.block_w2)] * config.blocks
    for w1, w2 in block_weights:
        a = residual_block(a, a0, w1, w2, p, params.block_b1, params.block_b2)
    residual = pixel_shuffle(conv2d(a, params.res_out_kernels, bias=params.res_out_bias, padding=1), s)
    upscaled = pixel_shuffle(conv2d(preliminary, params.up_kernels, bias=params.up_bias, padding=1), s)
    return add(residual, upscaled)


def check_input(shape: tuple[int, ...], config: NetworkConfig) -> None:
    if len(shape) != 4 or shape[1] != 1:
        raise DimensionError(f"expected a [B, 1, H, W] image batch, got {shape}")
    step = config.s * config.K
    if shape[2] % step or shape[3] % step:
        raise DimensionError(f"image {shape[2]}x{shape[3]} must be divisible by s*K={step}")


def sensing_image(image_highres, config: NetworkConfig) -> Tensor:
    """Bicubic downscale by ``s`` (clamped to [0, 1]) of a high-resolution batch."""
    arr = image_highres.data if isinstance(image_highres, Tensor) else np.asarray(image_highres)
    check_input(arr.shape, config)
    return Tensor(data.downscale(arr.astype(config.dtype, copy=False), config.s).astype(config.dtype))


def forward(
    image_highres, params: ModelParams, config: NetworkConfig, kernels: Tensor | None = None
) -> tuple[Tensor, Tensor]:
    """Full training-time pipeline; returns ``(preliminary, final)``.

    ``kernels`` overrides the binarized bank with an explicit sensing tensor.
    """
    low = sensing_image(image_highres, config)
    y = sense(low, params.bank if kernels is None else kernels)
    preliminary = reconstruct_preliminary(y, params)
    return preliminary, residual_correction(preliminary, params, config)


def reconstruct_from_measurements(measurements, params: ModelParams, config: NetworkConfig) -> Tensor:
    """Hardware inference path: measurements in raw block-sum units to the final image."""
    y = measurements if isinstance(measurements, Tensor) else Tensor(np.asarray(measurements, dtype=config.dtype))
    if y.ndim != 4 or y.shape[1] != params.bank.m:
        raise ConfigurationError(
            f"measurements have shape {y.shape}; this model expects [B, {params.bank.m}, h, w]"
        )
    return residual_correction(reconstruct_preliminary(y, params), params, config)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, config: NetworkConfig, step: int = 0,
                    extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    arrays = {name: t.data for name, t in params.tensors().items()}
    for name, arr in (extra or {}).items():
        arrays[f"extra/{name}"] = arr
    header = {
        "network": config.to_dict(),
        "step": int(step),
        "bank_mode": params.bank.mode,
        "bank_seed": int(params.bank.seed),
        "meta": meta or {},
    }
    container.write(path, CHECKPOINT_KIND, header, arrays)


@dataclass
class Checkpoint:
    params: ModelParams
    config: NetworkConfig
    step: int
    extra: dict[str, np.ndarray]
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    header, arrays = container.read(path, expect_kind=CHECKPOINT_KIND)
    info = header["meta"]
    config = NetworkConfig.from_dict(info["network"])
    bank = PatternBank(Tensor(arrays["bank.shadow"].copy()), info["bank_mode"], info["bank_seed"])
    kwargs = {
        name: Tensor(arrays[name].copy()) if name in arrays else None
        for name in ModelParams._TENSOR_FIELDS
    }
    params = ModelParams(bank=bank, **kwargs)
    extra = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return Checkpoint(params, config, info["step"], extra, info.get("meta", {}))
