"""Image container, color transforms, quality metrics and file I/O.

All pixel data lives in the unit interval. Arrays are stored as
``(height, width, channels)`` float64, which is the row-major,
channel-interleaved layout used by the model files and the generators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageFormatError(ValueError):
    """Raised for unreadable, malformed or unsupported image files."""


class ChannelMismatchError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """Immutable H x W x C image with values in [0, 1].

    Construction rejects out-of-range or non-finite values; use
    :meth:`clamped` when clipping is really what you want.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ShapeMismatchError(f"expected a (H, W, C) array, got shape {arr.shape}")
        h, w, c = arr.shape
        if h < 1 or w < 1:
            raise ShapeMismatchError(f"empty image of shape {arr.shape}")
        if c not in (1, 3):
            raise ChannelMismatchError(f"channels must be 1 or 3, got {c}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"image values must lie in [0, 1], found range [{lo}, {hi}]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def clamped(cls, data) -> "ImageTensor":
        return cls(np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0))

    @classmethod
    def from_flat(cls, values: Sequence[float], height: int, width: int, channels: int) -> "ImageTensor":
        flat = np.asarray(values, dtype=np.float64)
        if flat.size != height * width * channels:
            raise ShapeMismatchError(
                f"{flat.size} values cannot fill a {height}x{width}x{channels} image"
            )
        return cls(flat.reshape(height, width, channels))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        """Number of scalar elements (the observation dimension N)."""
        return self.data.size

    @property
    def pixels(self) -> int:
        return self.height * self.width

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"ImageTensor({self.height}x{self.width}x{self.channels})"


def clamp(data) -> ImageTensor:
    """Clip an array (or image) into [0, 1] and wrap it."""
    if isinstance(data, ImageTensor):
        return data
    return ImageTensor.clamped(data)


@dataclass(frozen=True)
class GrayscaleCoefficients:
    a_r: float = 0.2126
    a_g: float = 0.7152
    a_b: float = 0.0722

    def __post_init__(self):
        if min(self.a_r, self.a_g, self.a_b) < 0:
            raise ValueError("grayscale coefficients must be nonnegative")

    def as_array(self) -> np.ndarray:
        return np.array([self.a_r, self.a_g, self.a_b], dtype=np.float64)


def rgb_to_intensity(img: ImageTensor, coeffs: GrayscaleCoefficients | None = None) -> ImageTensor:
    if img.channels != 3:
        raise ChannelMismatchError(f"intensity needs a 3-channel image, got {img.channels}")
    coeffs = coeffs or GrayscaleCoefficients()
    a = coeffs.as_array()
    out = img.data @ a
    # weights summing slightly above one may overshoot by an ulp
    if a.sum() <= 1.0 + 1e-12:
        out = np.clip(out, 0.0, 1.0)
    return ImageTensor(out[:, :, None])


def _check_same_shape(a: ImageTensor, b: ImageTensor):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")


def mse(a: ImageTensor, b: ImageTensor) -> float:
    _check_same_shape(a, b)
    diff = a.data - b.data
    return float(np.mean(diff * diff))


def psnr(a: ImageTensor, b: ImageTensor, cap: float | None = None) -> float:
    """PSNR in dB with unit peak.

    Identical images give ``inf`` unless ``cap`` is set, in which case the
    result is limited to ``cap``.
    """
    err = mse(a, b)
    value = math.inf if err == 0.0 else 10.0 * math.log10(1.0 / err)
    if cap is not None:
        value = min(value, cap)
    return value


def mean_psnr(pairs: Iterable[tuple[ImageTensor, ImageTensor]], cap: float | None = None) -> float:
    """Average of per-image PSNRs (not the PSNR of the pooled error)."""
    values = [psnr(a, b, cap=cap) for a, b in pairs]
    if not values:
        raise ValueError("no image pairs given")
    return float(np.mean(values))


# --- file I/O ---------------------------------------------------------------

_PNM_SUFFIXES = {".ppm", ".pgm", ".pnm"}


def to_bytes(img: ImageTensor) -> np.ndarray:
    """Map [0, 1] to uint8, rounding half away from zero."""
    scaled = np.floor(img.data * 255.0 + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def from_bytes(arr: np.ndarray) -> ImageTensor:
    return ImageTensor(np.asarray(arr, dtype=np.float64) / 255.0)


def load_image(path) -> ImageTensor:
    path = Path(path)
    if path.suffix.lower() in _PNM_SUFFIXES:
        return from_bytes(_read_pnm(path.read_bytes(), str(path)))
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("RGBA", "LA", "PA") or (mode == "P" and "transparency" in im.info):
                raise ImageFormatError(f"{path}: alpha channels are not supported (mode {mode})")
            if mode in ("I;16", "I;16B", "I;16L", "I", "F"):
                raise ImageFormatError(f"{path}: unsupported bit depth (mode {mode})")
            if mode == "P":
                im = im.convert("RGB")
            elif mode == "1":
                im = im.convert("L")
            elif mode not in ("L", "RGB"):
                raise ImageFormatError(f"{path}: unsupported image mode {mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: cannot decode image ({exc})") from exc
    return from_bytes(arr)


def save_image(img: ImageTensor, path) -> None:
    path = Path(path)
    arr = to_bytes(img)
    if path.suffix.lower() in _PNM_SUFFIXES:
        path.write_bytes(_encode_pnm(arr))
        return
    if img.channels == 1:
        pil = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(arr, mode="RGB")
    pil.save(path, format="PNG")


def _encode_pnm(arr: np.ndarray) -> bytes:
    h, w, c = arr.shape
    magic = b"P6" if c == 3 else b"P5"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def _read_pnm(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    """Parse a binary P5/P6 file with maxval 255."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        # skip whitespace and comments
        while pos < len(raw) and (raw[pos:pos + 1].isspace() or raw[pos:pos + 1] == b"#"):
            if raw[pos:pos + 1] == b"#":
                end = raw.find(b"\n", pos)
                pos = len(raw) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{name}: truncated PNM header")
        tokens.append(raw[start:pos])
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{name}: unsupported PNM magic {magic!r} (only binary P5/P6)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"{name}: non-numeric PNM header field") from None
    if width < 1 or height < 1:
        raise ImageFormatError(f"{name}: invalid dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"{name}: unsupported bit depth (maxval {maxval}, need 255)")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ImageFormatError(f"{name}: malformed PNM header")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    body = raw[pos:pos + need]
    if len(body) < need:
        raise ImageFormatError(f"{name}: truncated pixel data ({len(body)} of {need} bytes)")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels)
