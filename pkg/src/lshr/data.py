"""Image ingestion, patch augmentation, bicubic resampling and DCT sparsification.

Images are handled as float arrays in ``[0, 1]``; batches use the
``[B, 1, H, W]`` layout of the network.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import fft

from . import container

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm", ".bmp", ".ppm", ".pbm", ".tif", ".tiff")
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class ImagePatch:
    pixels: np.ndarray  # [1, 1, H, W], float in [0, 1]
    source_id: str
    crop_offset: tuple[int, int] = (0, 0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[-2:]


def load_grayscale(path) -> ImagePatch:
    """Read an image file as luminance in [0, 1] (BT.601 weights for colour)."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(img, dtype=np.float64) / 65535.0
            elif mode == "F":
                arr = np.asarray(img, dtype=np.float64)
            elif mode in ("L", "1"):
                arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
            elif mode == "LA":
                arr = np.asarray(img.getchannel("L"), dtype=np.float64) / 255.0
            else:
                rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
                arr = rgb @ _LUMA / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return ImagePatch(np.clip(arr, 0.0, 1.0)[None, None], source_id=str(path))


def save_grayscale(path, image: np.ndarray) -> None:
    """Write a [0, 1] image (any leading singleton axes) as an 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64).reshape(image.shape[-2:])
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise OSError(f"image directory {directory} does not exist")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_directory(directory) -> list[ImagePatch]:
    return [load_grayscale(p) for p in list_images(directory)]


# --------------------------------------------------------------------------
# cropping / augmentation


def _augment(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < 0.5:
        patch = patch[..., ::-1]
    return np.rot90(patch, k=int(rng.integers(4)), axes=(-2, -1))


def crop_and_augment(image: ImagePatch, count: int, size: int, seed: int) -> list[ImagePatch]:
    """``count`` random ``size``x``size`` crops, each randomly flipped and rotated.

    Flips are horizontal with probability 0.5, rotations are multiples of 90
    degrees. An image smaller than ``size`` yields no patches.
    """
    h, w = image.shape
    if h < size or w < size:
        log.warning("skipping %s: %dx%d is smaller than patch size %d", image.source_id, h, w, size)
        return []
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        top = int(rng.integers(h - size + 1))
        left = int(rng.integers(w - size + 1))
        crop = image.pixels[..., top : top + size, left : left + size]
        pixels = np.ascontiguousarray(_augment(crop, rng))
        out.append(ImagePatch(pixels, image.source_id, (top, left)))
    return out


def prepare_patches(
    images: Iterable[ImagePatch], count: int, size: int, seed: int
) -> tuple[np.ndarray, int]:
    """Crop every image and stack the patches into ``[N, 1, size, size]``.

    Returns the batch and the number of images skipped for being too small.
    Each image gets its own seed derived from ``seed`` and its position.
    """
    patches: list[np.ndarray] = []
    skipped = 0
    for i, image in enumerate(images):
        got = crop_and_augment(image, count, size, seed=_child_seed(seed, i))
        if not got:
            skipped += 1
        patches.extend(p.pixels[0] for p in got)
    if not patches:
        return np.zeros((0, 1, size, size)), skipped
    return np.stack(patches), skipped


def _child_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# --------------------------------------------------------------------------
# bicubic resampling


def cubic_kernel(t, a: float = -0.5):
    """Keys cubic convolution kernel; ``a = -0.5`` gives Catmull-Rom."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    near = ((a + 2) * t - (a + 3)) * t * t + 1
    far = ((a * t - 5 * a) * t + 8 * a) * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


@lru_cache(maxsize=64)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense ``[n_out, n_in]`` bicubic interpolation matrix with clamped edges.

    Output sample ``o`` sits at input coordinate ``(o + 0.5) * n_in / n_out - 0.5``.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"sizes must be >= 1, got {n_in} -> {n_out}")
    centre = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    first = np.floor(centre).astype(int) - 1
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for tap in range(4):
        src = first + tap
        np.add.at(mat, (rows, np.clip(src, 0, n_in - 1)), cubic_kernel(centre - src))
    mat.setflags(write=False)
    return mat


def bicubic_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable Catmull-Rom resize over the last two axes (no clamping of values)."""
    image = np.asarray(image)
    dtype = image.dtype if np.issubdtype(image.dtype, np.floating) else np.float64
    rows = resize_matrix(image.shape[-2], out_h).astype(dtype)
    cols = resize_matrix(image.shape[-1], out_w).astype(dtype)
    return rows @ image.astype(dtype, copy=False) @ cols.T


def downscale(image: np.ndarray, factor: int) -> np.ndarray:
    """Bicubic shrink by an integer factor, clamped to [0, 1]."""
    h, w = image.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"image {h}x{w} not divisible by factor {factor}")
    return np.clip(bicubic_resize(image, h // factor, w // factor), 0.0, 1.0)


def upscale(image: np.ndarray, factor: int) -> np.ndarray:
    h, w = image.shape[-2:]
    return np.clip(bicubic_resize(image, h * factor, w * factor), 0.0, 1.0)


def crop_to_multiple(image: np.ndarray, multiple: int) -> np.ndarray:
    """Centre-crop the last two axes down to multiples of ``multiple``."""
    h, w = image.shape[-2:]
    nh, nw = h - h % multiple, w - w % multiple
    if nh == 0 or nw == 0:
        raise ValueError(f"image {h}x{w} is smaller than {multiple}")
    top, left = (h - nh) // 2, (w - nw) // 2
    return image[..., top : top + nh, left : left + nw]


# --------------------------------------------------------------------------
# DCT


def dct2(image: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II over the last two axes."""
    return fft.dctn(np.asarray(image, dtype=np.float64), type=2, norm="ortho", axes=(-2, -1))


def idct2(coefficients: np.ndarray) -> np.ndarray:
    return fft.idctn(np.asarray(coefficients, dtype=np.float64), type=2, norm="ortho", axes=(-2, -1))


def top_k_mask(coefficients: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Boolean mask of the ``ceil(keep_fraction * N)`` largest magnitudes.

    Ties go to the lower flat index.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    flat = np.abs(coefficients).reshape(-1)
    k = math.ceil(keep_fraction * flat.size)
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(coefficients.shape)


def sparsify_dct(image: np.ndarray, keep_fraction: float, clamp: bool = True) -> np.ndarray:
    """Keep the largest DCT coefficients of a 2-D image and invert."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim > 2:
        return np.stack([sparsify_dct(im, keep_fraction, clamp) for im in image])
    coeffs = dct2(image)
    out = idct2(np.where(top_k_mask(coeffs, keep_fraction), coeffs, 0.0))
    return np.clip(out, 0.0, 1.0) if clamp else out


# --------------------------------------------------------------------------
# corpora


def load_digits_corpus(size: int = 32) -> np.ndarray:
    """The scikit-learn handwritten digits as ``[1797, 1, size, size]`` in [0, 1].

    Each 8x8 source cell is a count of ink pixels in a 4x4 block of the
    original 32x32 bitmap; cells are expanded back to blocks (nearest
    neighbour), then centre-padded or cropped to ``size``.
    """
    from sklearn.datasets import load_digits

    cells = load_digits().images / 16.0
    blocks = np.kron(cells, np.ones((4, 4)))
    pad = size - 32
    if pad > 0:
        before = pad // 2
        blocks = np.pad(blocks, ((0, 0), (before, pad - before), (before, pad - before)))
    elif pad < 0:
        start = -pad // 2
        blocks = blocks[:, start : start + size, start : start + size]
    return np.ascontiguousarray(blocks[:, None])


def split(images: np.ndarray, holdout: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle and split into (train, held-out)."""
    order = np.random.default_rng(seed).permutation(len(images))
    n_hold = max(1, int(round(holdout * len(images))))
    return images[order[n_hold:]], images[order[:n_hold]]


def save_patches(path, patches: np.ndarray, sources: Sequence[str] = ()) -> None:
    container.write(path, "patches", {"sources": list(sources)}, {"patches": patches})


def load_patches(path) -> np.ndarray:
    _, arrays = container.read(path, expect_kind="patches")
    return arrays["patches"]
