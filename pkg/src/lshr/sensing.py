"""Binary sensing patterns: initialization, binarization, clipping and sensing.

A :class:`PatternBank` keeps real-valued shadow weights in ``[-1, 1]``. The
forward pass only ever sees their binarized ``{0, 1}`` view; in learned mode
the gradient reaching the binary kernels is handed unchanged to the shadows
(identity straight-through estimator).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, UsageError
from .tensor import Tensor, conv2d, get_default_dtype, record_op

STATIC = "static"
LEARNED = "learned"
MODES = (STATIC, LEARNED)


@dataclass(eq=False)
class PatternBank:
    shadow: Tensor  # [m, 1, K, K]
    mode: str
    seed: int

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"pattern mode must be one of {MODES}, got {self.mode!r}")
        if self.shadow.ndim != 4 or self.shadow.shape[1] != 1 or self.shadow.shape[2] != self.shadow.shape[3]:
            raise DimensionError(f"shadow weights must be [m, 1, K, K], got {self.shadow.shape}")
        self.shadow.requires_grad = self.mode == LEARNED
        self.shadow.name = self.shadow.name or "bank.shadow"

    @property
    def m(self) -> int:
        return self.shadow.shape[0]

    @property
    def K(self) -> int:
        return self.shadow.shape[2]

    @property
    def learned(self) -> bool:
        return self.mode == LEARNED

    def binary(self) -> np.ndarray:
        """The {0, 1} patterns in the shadow dtype."""
        return binarize(self.shadow.data).astype(self.shadow.dtype)

    def bits(self) -> np.ndarray:
        return binarize(self.shadow.data).astype(np.uint8)


@dataclass
class SparsityStats:
    step: int
    fraction_ones: float
    per_pattern_fraction: list[float] = field(default_factory=list)


def binarize(w_r):
    """1 where the real weight is strictly positive, else 0."""
    return (np.asarray(w_r) > 0).astype(np.uint8)


def init_bernoulli(m: int, K: int, prob_one: float = 0.5, seed: int = 0, dtype=None) -> PatternBank:
    """Static bank whose bits are i.i.d. Bernoulli(``prob_one``)."""
    _check_bank_args(m, K)
    if not 0.0 <= prob_one <= 1.0:
        raise ValueError(f"prob_one must lie in [0, 1], got {prob_one}")
    rng = np.random.default_rng(seed)
    bits = rng.random((m, 1, K, K)) < prob_one
    shadow = np.where(bits, 1.0, -1.0).astype(dtype or get_default_dtype())
    return PatternBank(Tensor(shadow), STATIC, seed)


def init_uniform(m: int, K: int, seed: int = 0, dtype=None) -> PatternBank:
    """Learned bank with shadows drawn from Uniform(-1, 1)."""
    _check_bank_args(m, K)
    rng = np.random.default_rng(seed)
    shadow = rng.uniform(-1.0, 1.0, size=(m, 1, K, K)).astype(dtype or get_default_dtype())
    return PatternBank(Tensor(shadow), LEARNED, seed)


def _check_bank_args(m: int, K: int) -> None:
    if m < 1 or K < 1:
        raise ValueError(f"need m >= 1 and K >= 1, got m={m}, K={K}")


def clip_shadow(bank: PatternBank) -> PatternBank:
    np.clip(bank.shadow.data, -1.0, 1.0, out=bank.shadow.data)
    return bank


def straight_through_grad(bank: PatternBank, upstream: np.ndarray) -> np.ndarray:
    """Gradient on the shadow weights given the gradient on the binary kernels."""
    if not bank.learned:
        raise UsageError("straight-through gradients only exist for learned banks")
    return upstream


def binary_kernels(bank: PatternBank) -> Tensor:
    """The binarized bank as a tensor; in learned mode it routes gradients to the shadows."""
    binary = bank.binary()
    if not bank.learned:
        return Tensor(binary)
    return record_op(
        "binarize_ste", binary, (bank.shadow,),
        lambda g: (straight_through_grad(bank, g),),
    )


def sense(image_lowres: Tensor, bank: PatternBank | Tensor) -> Tensor:
    """Block-wise single-pixel measurements, ``[B, 1, H', W'] -> [B, m, H'/K, W'/K]``.

    ``bank`` may also be a raw ``[m, 1, K, K]`` kernel tensor, which is used as
    given (useful for treating the binary kernels as continuous in checks).
    """
    kernels = binary_kernels(bank) if isinstance(bank, PatternBank) else bank
    K = kernels.shape[-1]
    if image_lowres.ndim != 4 or image_lowres.shape[1] != 1:
        raise DimensionError(f"sense expects a [B, 1, H, W] image, got {image_lowres.shape}")
    h, w = image_lowres.shape[-2:]
    if h % K or w % K:
        raise DimensionError(
            f"image {h}x{w} is not a whole number of {K}x{K} blocks; crop or pad it upstream"
        )
    return conv2d(image_lowres, kernels, stride=K)


def sparsity(bank: PatternBank, step: int = 0, history: list | None = None) -> SparsityStats:
    """Fraction of ones in the binarized bank; appended to ``history`` if given."""
    bits = bank.bits().reshape(bank.m, -1)
    per_pattern = bits.mean(axis=1)
    stats = SparsityStats(step, float(bits.sum()) / bits.size, [float(v) for v in per_pattern])
    if history is not None:
        history.append(stats)
    return stats
