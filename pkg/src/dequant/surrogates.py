"""Smooth stand-ins for the hard quantizers, with exact partial derivatives.

Sharpness ``k`` and threshold ``delta`` are optimized through unconstrained
raw values: ``k = exp(kappa)`` and ``delta = logistic(delta_raw)``. Every
derivative returned here is taken with respect to those raw values.

For a softmax over centers c_i with weights w_i ~ exp(-k d_i), the input
derivative reduces to ``2k * Cov_w(c, c)``, so the scalar surrogate is
nondecreasing for every k.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .image import ChannelMismatchError, ImageTensor

K_INIT = 10.0
DELTA_INIT = 0.5


def logistic(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0, e) / (1.0 + e)
    return out if out.ndim else float(out)


def logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def _softmax_weights(neg_energy: np.ndarray) -> np.ndarray:
    """Softmax over axis 0, max-shifted so large k cannot overflow."""
    w = neg_energy - neg_energy.max(axis=0)
    np.exp(w, out=w)
    w /= w.sum(axis=0)
    return w


@dataclass(frozen=True)
class SurrogateParams:
    kappa: float = math.log(K_INIT)
    delta_raw: float = 0.0
    train_k: bool = True
    train_delta: bool = False

    @classmethod
    def initial(cls, k: float = K_INIT, delta: float = DELTA_INIT,
                train_k: bool = True, train_delta: bool = False) -> "SurrogateParams":
        if k <= 0:
            raise ValueError("k must be positive")
        if not 0.0 < delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        return cls(math.log(k), logit(delta), train_k, train_delta)

    @property
    def k(self) -> float:
        return math.exp(self.kappa)

    @property
    def delta(self) -> float:
        return float(logistic(self.delta_raw))

    def with_raw(self, kappa: float, delta_raw: float) -> "SurrogateParams":
        return replace(self, kappa=float(kappa), delta_raw=float(delta_raw))


# --- scalar / per-pixel surrogates -----------------------------------------------

def soft_uniform(r, m: int, k: float):
    """Softmax relaxation of the m-level uniform quantizer.

    Returns ``(value, d/dr, d/dkappa)`` with the shape of ``r``.
    """
    r = np.asarray(r, dtype=np.float64)
    shape = r.shape
    c = (np.arange(1, m + 1) - 0.5) / m
    cc = c[:, None]
    # (m, n) layout: reductions over centers become row sums
    d2 = (r.reshape(-1) - cc) ** 2
    w = _softmax_weights(-k * d2)
    value = c @ w
    dev = cc - value
    wdev = w * dev
    d_dr = (2.0 * k) * (wdev * dev).sum(axis=0)
    # d/dk = Cov_w(c, -d2); d/dkappa = k d/dk
    d_dkappa = -k * (wdev * d2).sum(axis=0)
    return value.reshape(shape), d_dr.reshape(shape), d_dkappa.reshape(shape)


def _palette_parts(x, palette, k):
    """Softmax weights ``(M, P)`` and deviations ``(M, P, 3)`` over flattened pixels."""
    x = np.asarray(x, dtype=np.float64)
    q = np.asarray(palette, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != 3 or len(q) == 0:
        raise ValueError("palette must be a nonempty (M, 3) array")
    if x.shape[-1:] != (3,):
        raise ValueError(f"palette surrogate needs 3-vectors, got shape {x.shape}")
    qq = q[:, None, :]
    d2 = ((x.reshape(-1, 3) - qq) ** 2).sum(axis=-1)
    w = _softmax_weights(-k * d2)
    value = w.T @ q
    dev = qq - value
    return value, w, dev, d2


def soft_palette(x, palette, k: float):
    """Softmax relaxation of nearest-palette quantization.

    ``x`` has shape ``(..., 3)``. Returns ``(value (...,3), jacobian (...,3,3),
    d/dkappa (...,3))``; the Jacobian is symmetric.
    """
    shape = np.shape(x)
    value, w, dev, d2 = _palette_parts(x, palette, k)
    wdev = w[..., None] * dev
    jac = 2.0 * k * np.einsum("ipa,ipb->pab", wdev, dev)
    d_dkappa = -k * (wdev * d2[..., None]).sum(axis=0)
    return value.reshape(shape), jac.reshape(shape + (3,)), d_dkappa.reshape(shape)


def soft_threshold(intensity, k: float, delta: float):
    """Sigmoid ``1 / (1 + exp(-k (I - delta)))``.

    Returns ``(value, d/dI, d/dkappa, d/ddelta_raw)``.
    """
    i = np.asarray(intensity, dtype=np.float64)
    gap = i - delta
    s = np.asarray(logistic(k * gap))
    slope = s * (1.0 - s)
    d_di = k * slope
    d_dkappa = k * gap * slope
    d_ddelta_raw = -k * slope * delta * (1.0 - delta)
    return s, d_di, d_dkappa, d_ddelta_raw


# --- kinds and vectorized application -------------------------------------------

@dataclass(frozen=True, eq=False)
class SurrogateContext:
    """Captured partials of one surrogate application.

    ``vjp`` maps a cotangent on the output to ``(grad_input, grad_kappa,
    grad_delta_raw)``.
    """

    kind: "SurrogateKind"
    d_input: np.ndarray | Callable | None
    d_kappa: np.ndarray | None = None
    d_delta_raw: np.ndarray | None = None

    def vjp(self, upstream: np.ndarray):
        upstream = np.asarray(upstream, dtype=np.float64)
        if self.d_input is None:
            return upstream.copy(), 0.0, 0.0
        if callable(self.d_input):
            grad = self.d_input(upstream)
        else:
            grad = self.d_input * upstream
        g_kappa = float(np.sum(self.d_kappa * upstream)) if self.d_kappa is not None else 0.0
        g_delta = float(np.sum(self.d_delta_raw * upstream)) if self.d_delta_raw is not None else 0.0
        return grad, g_kappa, g_delta


class SurrogateKind:
    name = "abstract"
    channels: int | None = None
    uses_k = False
    uses_delta = False

    def apply(self, x: np.ndarray, params: SurrogateParams):
        raise NotImplementedError

    def check_channels(self, channels: int):
        if self.channels is not None and channels != self.channels:
            raise ChannelMismatchError(
                f"{self.name} surrogate needs {self.channels}-channel input, got {channels}"
            )

    def __repr__(self):
        return f"{type(self).__name__}()"


class Identity(SurrogateKind):
    name = "identity"

    def apply(self, x, params=None):
        return np.array(x, dtype=np.float64), SurrogateContext(self, None)


class SoftUniform(SurrogateKind):
    name = "soft-uniform"
    uses_k = True

    def __init__(self, m: int):
        if int(m) != m or m < 1:
            raise ValueError(f"number of levels must be a positive integer, got {m}")
        self.m = int(m)

    def apply(self, x, params):
        value, d_dr, d_dkappa = soft_uniform(x, self.m, params.k)
        return value, SurrogateContext(self, d_dr, d_dkappa)

    def __repr__(self):
        return f"SoftUniform(m={self.m})"


class SoftPalette(SurrogateKind):
    name = "soft-palette"
    channels = 3
    uses_k = True

    def __init__(self, palette):
        q = np.asarray(getattr(palette, "palette", palette), dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != 3 or len(q) == 0:
            raise ValueError("palette must be a nonempty (M, 3) array")
        self.palette = q

    def apply(self, x, params):
        k = params.k
        shape = np.shape(x)
        value, w, dev, d2 = _palette_parts(x, self.palette, k)
        wdev = w[..., None] * dev
        d_dkappa = -k * (wdev * d2[..., None]).sum(axis=0)

        def jvp(u):
            # symmetric Jacobian 2k sum_i w_i dev_i dev_i^T applied to u
            u = u.reshape(-1, 3)
            g = (2.0 * k) * (wdev * (dev * u).sum(axis=-1)[..., None]).sum(axis=0)
            return g.reshape(shape)

        return value.reshape(shape), SurrogateContext(self, jvp, d_dkappa.reshape(shape))

    def __repr__(self):
        return f"SoftPalette(M={len(self.palette)})"


class SoftThreshold(SurrogateKind):
    name = "soft-threshold"
    channels = 1
    uses_k = True
    uses_delta = True

    def apply(self, x, params):
        value, d_di, d_dkappa, d_ddelta = soft_threshold(x, params.k, params.delta)
        return value, SurrogateContext(self, d_di, d_dkappa, d_ddelta)


def apply_surrogate(x, kind: SurrogateKind, params: SurrogateParams | None = None):
    """Apply ``kind`` to an image (or raw ``(H, W, C)`` array).

    Returns the transformed array and a :class:`SurrogateContext`.
    """
    arr = x.data if isinstance(x, ImageTensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        kind.check_channels(arr.shape[2])
    if params is None:
        params = SurrogateParams()
    return kind.apply(arr, params)


def write_curve_csv(path, m: int, ks: Iterable[float], samples: int = 1001) -> None:
    """Dump ``(k, r, value)`` rows of the soft-uniform curve, plus the hard staircase as ``k=inf``."""
    from .quantizers import uniform_bin_index

    r = np.linspace(0.0, 1.0, samples)
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "r", "value"])
        for k in ks:
            value = soft_uniform(r, m, float(k))[0]
            writer.writerows((repr(float(k)), repr(float(a)), repr(float(b))) for a, b in zip(r, value))
        hard = (uniform_bin_index(r, m) + 0.5) / m
        writer.writerows(("inf", repr(float(a)), repr(float(b))) for a, b in zip(r, hard))
