"""Finite-difference validation of every analytic gradient in the package."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .generator import make_toy_generator
from .image import GrayscaleCoefficients, ImageTensor
from .restoration import ObjectiveSpec, loss_and_grads, loss_value
from .surrogates import (
    SoftPalette,
    SoftThreshold,
    SoftUniform,
    SurrogateParams,
    logistic,
    logit,
    soft_palette,
    soft_threshold,
    soft_uniform,
)

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-8


def central_difference(f: Callable[[np.ndarray], np.ndarray], x, h: float = STEP) -> np.ndarray:
    """Jacobian of ``f`` at ``x`` by the five-point stencil, shape ``out + in``."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)

    def at(i, offset):
        moved = flat.copy()
        moved[i] += offset
        return np.asarray(f(moved.reshape(x.shape)), dtype=np.float64)

    cols = [(8.0 * (at(i, h) - at(i, -h)) - (at(i, 2 * h) - at(i, -2 * h))) / (12.0 * h)
            for i in range(flat.size)]
    jac = np.stack(cols, axis=-1)
    return jac.reshape(np.shape(cols[0]) + x.shape)


def relative_error(analytic, numeric, floor: float = FLOOR) -> float:
    """Largest componentwise deviation relative to the gradient's magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n)) / (np.max(np.abs(n)) + floor))


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    points: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _worst(errors):
    return max(errors) if errors else 0.0


BATCH = 16


def _pairing(u):
    return lambda out: float(np.sum(u * out))


def _near_edges(rng, m, k):
    # half uniform, half within a few widths 1/sqrt(k) of a bin edge; plateau-only batches are roundoff
    edges = rng.integers(1, m, size=BATCH // 2) / m if m > 1 else np.full(BATCH // 2, 0.5)
    near = np.clip(edges + rng.normal(0.0, 1.0 / math.sqrt(k), size=BATCH // 2), 0.0, 1.0)
    return np.concatenate([rng.uniform(0.0, 1.0, size=BATCH - BATCH // 2), near])


def check_soft_uniform(points=100, seed=0, corrupt=False):
    """Each point is a batch of inputs paired with a random cotangent."""
    rng = np.random.default_rng(seed)
    err_r, err_kappa = [], []
    for _ in range(points):
        m = int(rng.integers(1, 7))
        kappa = rng.uniform(0.0, math.log(200.0 * m * m))
        r = _near_edges(rng, m, math.exp(kappa))
        u = rng.standard_normal(BATCH)
        dot = _pairing(u)
        _, d_dr, d_dkappa = soft_uniform(r, m, math.exp(kappa))
        g_r, g_kappa = d_dr * u, float(np.sum(d_dkappa * u))
        if corrupt:
            g_r = g_r * (1 + 1e-2)
        num_r = central_difference(lambda v: dot(soft_uniform(v, m, math.exp(kappa))[0]), r)
        num_k = central_difference(lambda v: dot(soft_uniform(r, m, math.exp(v))[0]), kappa)
        err_r.append(relative_error(g_r, num_r))
        err_kappa.append(relative_error(g_kappa, num_k))
    return [CheckResult("soft_uniform d/dr", _worst(err_r), points),
            CheckResult("soft_uniform d/dkappa", _worst(err_kappa), points)]


def check_soft_palette(points=100, seed=1, corrupt=False):
    rng = np.random.default_rng(seed)
    err_x, err_kappa = [], []
    for _ in range(points):
        q = rng.uniform(0.0, 1.0, size=(int(rng.integers(1, 9)), 3))
        kappa = rng.uniform(0.0, math.log(200.0))
        x = rng.uniform(0.0, 1.0, size=(BATCH, 3))
        u = rng.standard_normal((BATCH, 3))
        dot = _pairing(u)
        _, jac, d_dkappa = soft_palette(x, q, math.exp(kappa))
        g_x, g_kappa = np.einsum("pab,pb->pa", jac, u), float(np.sum(d_dkappa * u))
        if corrupt:
            g_x = g_x * (1 + 1e-2)
        num_x = central_difference(lambda v: dot(soft_palette(v, q, math.exp(kappa))[0]), x)
        num_k = central_difference(lambda v: dot(soft_palette(x, q, math.exp(v))[0]), kappa)
        err_x.append(relative_error(g_x, num_x))
        err_kappa.append(relative_error(g_kappa, num_k))
    return [CheckResult("soft_palette d/dx", _worst(err_x), points),
            CheckResult("soft_palette d/dkappa", _worst(err_kappa), points)]


def check_soft_threshold(points=100, seed=2, corrupt=False):
    rng = np.random.default_rng(seed)
    errs = {"d/dI": [], "d/dkappa": [], "d/ddelta_raw": []}
    for _ in range(points):
        kappa = rng.uniform(0.0, math.log(200.0))
        d_raw = logit(rng.uniform(0.1, 0.9))
        i = rng.uniform(0.0, 1.0, size=BATCH)
        u = rng.standard_normal(BATCH)
        dot = _pairing(u)
        _, d_di, d_dk, d_dd = soft_threshold(i, math.exp(kappa), logistic(d_raw))
        g_i, g_k, g_d = d_di * u, float(np.sum(d_dk * u)), float(np.sum(d_dd * u))
        if corrupt:
            g_d = g_d * (1 + 1e-2)
        f = lambda a, b, c: dot(soft_threshold(a, math.exp(b), logistic(c))[0])  # noqa: E731
        errs["d/dI"].append(relative_error(g_i, central_difference(lambda v: f(v, kappa, d_raw), i)))
        errs["d/dkappa"].append(relative_error(g_k, central_difference(lambda v: f(i, v, d_raw), kappa)))
        errs["d/ddelta_raw"].append(relative_error(g_d, central_difference(lambda v: f(i, kappa, v), d_raw)))
    return [CheckResult(f"soft_threshold {name}", _worst(e), points) for name, e in errs.items()]


def check_generator_vjp(points=100, seed=3, corrupt=False):
    gen = make_toy_generator("mlp", (4, 4, 3), seed=seed, latent_dim=4, widths=(16, 24))
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(points):
        z = rng.standard_normal(gen.latent_dim)
        u = rng.standard_normal(gen.output_shape)
        g = gen.vjp(z, u)
        if corrupt:
            g = g * (1 + 1e-2)
        num = central_difference(lambda v: float(np.sum(u * gen.forward_flat(v).reshape(u.shape))), z)
        errs.append(relative_error(g, num))
    return [CheckResult("generator vjp", _worst(errs), points)]


def _objective_specs(seed):
    rng = np.random.default_rng(seed)
    rgb = make_toy_generator("mlp", (4, 4, 3), seed=seed, latent_dim=4, widths=(12,))
    y_rgb = ImageTensor(rng.uniform(size=(4, 4, 3)))
    y_bin = ImageTensor((rng.uniform(size=(4, 4, 1)) > 0.5).astype(float))
    palette = rng.uniform(size=(5, 3))
    yield "full objective (soft-uniform)", ObjectiveSpec(
        rgb, y_rgb, SoftUniform(3), SurrogateParams.initial(k=20.0))
    yield "full objective (soft-palette)", ObjectiveSpec(
        rgb, y_rgb, SoftPalette(palette), SurrogateParams.initial(k=20.0))
    yield "full objective (soft-threshold)", ObjectiveSpec(
        rgb, y_bin, SoftThreshold(), SurrogateParams.initial(k=8.0, delta=0.45, train_delta=True),
        grayscale=GrayscaleCoefficients())
    yield "identity objective", ObjectiveSpec(rgb, y_rgb, variant="identity")


def check_objective(points=100, seed=4, corrupt=False):
    """Gradients of the full objective in z, kappa and delta_raw."""
    results = []
    for name, spec in _objective_specs(seed):
        rng = np.random.default_rng(seed)
        errs = {"z": [], "kappa": [], "delta_raw": []}
        for _ in range(points):
            z = rng.standard_normal(spec.generator.latent_dim)
            params = spec.params.with_raw(spec.params.kappa + rng.normal(0, 0.5),
                                          spec.params.delta_raw + rng.normal(0, 0.5))
            _, g_z, g_k, g_d = loss_and_grads(spec, z, params)
            if corrupt:
                g_z = g_z * (1 + 1e-2)
            f = lambda zz, kk, dd: loss_value(spec, zz, params.with_raw(kk, dd)).total  # noqa: E731
            errs["z"].append(relative_error(g_z, central_difference(lambda v: f(v, params.kappa, params.delta_raw), z)))
            if spec.trains_k:
                num = central_difference(lambda v: f(z, v, params.delta_raw), params.kappa)
                errs["kappa"].append(relative_error(g_k, num))
            if spec.trains_delta:
                num = central_difference(lambda v: f(z, params.kappa, v), params.delta_raw)
                errs["delta_raw"].append(relative_error(g_d, num))
        for block, e in errs.items():
            if e:
                results.append(CheckResult(f"{name} d/d{block}", _worst(e), len(e)))
    return results


CHECKS = {
    "soft_uniform": check_soft_uniform,
    "soft_palette": check_soft_palette,
    "soft_threshold": check_soft_threshold,
    "generator": check_generator_vjp,
    "objective": check_objective,
}


def run_gradcheck(points: int = 100, corrupt: str | None = None) -> list[CheckResult]:
    """Run every check; ``corrupt`` names a check whose analytic gradient is perturbed by 1%."""
    if corrupt is not None and corrupt not in CHECKS:
        raise ValueError(f"unknown check {corrupt!r}; choose from {sorted(CHECKS)}")
    results = []
    for name, fn in CHECKS.items():
        results.extend(fn(points=points, corrupt=(name == corrupt)))
    return results
