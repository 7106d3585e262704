"""Hard quantizers used to synthesize observations, plus threshold selection."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import ChannelMismatchError, ImageTensor

OTSU_BINS = 256


class DegenerateHistogramError(ValueError):
    pass


@dataclass(frozen=True)
class UniformQuantizer:
    """``m`` levels per channel with centers ``(i - 0.5) / m``."""

    m: int

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"number of levels must be a positive integer, got {self.m}")

    @property
    def levels(self) -> np.ndarray:
        return (np.arange(1, self.m + 1) - 0.5) / self.m

    @property
    def colors(self) -> int:
        return self.m ** 3


@dataclass(frozen=True, eq=False)
class PaletteQuantizer:
    palette: np.ndarray

    def __post_init__(self):
        q = np.array(self.palette, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != 3:
            raise ValueError(f"palette must be an (M, 3) array, got shape {q.shape}")
        if q.shape[0] == 0:
            raise ValueError("palette is empty")
        if q.min() < 0 or q.max() > 1:
            raise ValueError("palette colors must lie in [0, 1]^3")
        if len(np.unique(q, axis=0)) < len(q):
            warnings.warn("palette contains duplicate colors", stacklevel=3)
        q.setflags(write=False)
        object.__setattr__(self, "palette", q)

    def __len__(self):
        return self.palette.shape[0]

    @classmethod
    def uniform_grid(cls, m: int) -> "PaletteQuantizer":
        c = UniformQuantizer(m).levels
        r, g, b = np.meshgrid(c, c, c, indexing="ij")
        return cls(np.stack([r.ravel(), g.ravel(), b.ravel()], axis=1))


@dataclass(frozen=True)
class ThresholdQuantizer:
    delta: float

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.delta}")


def uniform_bin_index(r: np.ndarray, m: int) -> np.ndarray:
    # bins are (i-1)/m < r <= i/m; r = 0 joins the first bin
    idx = np.ceil(np.asarray(r, dtype=np.float64) * m).astype(np.int64) - 1
    return np.clip(idx, 0, m - 1)


def quantize_uniform(img: ImageTensor, q: UniformQuantizer) -> ImageTensor:
    idx = uniform_bin_index(img.data, q.m)
    return ImageTensor((idx + 0.5) / q.m)


def nearest_palette_index(pixels: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Index of the closest palette color per row of ``pixels`` (ties -> lowest)."""
    d2 = ((pixels[:, None, :] - palette[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def quantize_palette(img: ImageTensor, q: PaletteQuantizer) -> ImageTensor:
    if img.channels != 3:
        raise ChannelMismatchError("palette quantization needs a 3-channel image")
    pixels = img.data.reshape(-1, 3)
    idx = nearest_palette_index(pixels, q.palette)
    return ImageTensor(q.palette[idx].reshape(img.shape))


def quantize_threshold(intensity: ImageTensor, t: ThresholdQuantizer) -> ImageTensor:
    if intensity.channels != 1:
        raise ChannelMismatchError("threshold quantization needs a 1-channel image")
    return ImageTensor((intensity.data >= t.delta).astype(np.float64))


def intensity_histogram(values: np.ndarray, bins: int = OTSU_BINS) -> np.ndarray:
    """Integer counts over ``bins`` equal bins of [0, 1]; 1.0 lands in the last bin."""
    idx = np.clip(np.floor(np.asarray(values, dtype=np.float64).ravel() * bins), 0, bins - 1)
    return np.bincount(idx.astype(np.int64), minlength=bins)


def otsu_threshold(intensity: ImageTensor) -> float:
    """Otsu threshold of a single-channel image, as a bin edge ``t / 256``.

    Pixels in bins ``< t`` form the lower class. Scores are compared in exact
    integer arithmetic so ties resolve to the lowest edge deterministically.
    """
    if intensity.channels != 1:
        raise ChannelMismatchError("Otsu thresholding needs a 1-channel image")
    hist = intensity_histogram(intensity.data)
    if np.count_nonzero(hist) < 2:
        raise DegenerateHistogramError("Otsu threshold undefined: all pixels fall into one histogram bin")
    t = _otsu_edge(hist)
    return t / OTSU_BINS


def _otsu_edge(hist: np.ndarray) -> int:
    total = int(hist.sum())
    total_sum = int((hist * np.arange(len(hist))).sum())
    n0 = np.cumsum(hist)
    s0 = np.cumsum(hist * np.arange(len(hist)))
    best_t, best_num, best_den = None, 0, 1
    for t in range(1, len(hist)):
        c0, m0 = int(n0[t - 1]), int(s0[t - 1])
        c1, m1 = total - c0, total_sum - m0
        if c0 == 0 or c1 == 0:
            continue
        # between-class variance up to a constant: (m1*c0 - m0*c1)^2 / (c0*c1)
        num = (m1 * c0 - m0 * c1) ** 2
        den = c0 * c1
        if best_t is None or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def kmeans_palette(img: ImageTensor, M: int, seed: int = 0, max_iter: int = 300) -> PaletteQuantizer:
    """Lloyd's k-means over pixel colors, initialized at M distinct colors."""
    if img.channels != 3:
        raise ChannelMismatchError("k-means palette needs a 3-channel image")
    pixels = img.data.reshape(-1, 3)
    distinct = np.unique(pixels, axis=0)
    if M < 1 or M > len(distinct):
        raise ValueError(f"cannot pick {M} colors from {len(distinct)} distinct pixel colors")
    rng = np.random.default_rng(seed)
    centers = distinct[rng.choice(len(distinct), size=M, replace=False)]
    assign = None
    for _ in range(max_iter):
        new_assign = nearest_palette_index(pixels, centers)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(M):
            members = pixels[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return PaletteQuantizer(np.clip(centers, 0.0, 1.0))


def load_palette(path) -> PaletteQuantizer:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'r g b', got {line!r}")
        rows.append([float(p) for p in parts])
    return PaletteQuantizer(np.array(rows).reshape(-1, 3))


def save_palette(q: PaletteQuantizer, path) -> None:
    lines = [" ".join(repr(float(v)) for v in color) for color in q.palette]
    Path(path).write_text("\n".join(lines) + "\n")
