"""MAP restoration in the latent space of a known generator.

The objective, after eliminating the Gaussian noise scale analytically, is::

    N * log(max(S, eps)) + ||z||^2,   S = ||Y - T~(G(z), alpha)||^2

minimized jointly over ``z`` and the raw surrogate parameters by momentum
descent on per-block normalized gradients.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .generator import GeneratorModel
from .image import GrayscaleCoefficients, ImageTensor, ShapeMismatchError
from .surrogates import Identity, SoftThreshold, SurrogateKind, SurrogateParams

FULL, IDENTITY = "full", "identity"
TRACE_HEADER = ["iter", "loss", "S", "znorm2", "k", "delta", "beta2"]

# practical parameter set for the raw surrogate variables; keeps exp/logistic finite
KAPPA_BOUNDS = (-20.0, 20.0)
DELTA_RAW_BOUNDS = (-15.0, 15.0)


class NonFiniteLossError(FloatingPointError):
    """Loss or gradient became non-finite; carries the offending state."""

    def __init__(self, message, iteration=None, z=None, params=None, trace=None):
        super().__init__(message)
        self.iteration = iteration
        self.z = z
        self.params = params
        self.trace = trace


@dataclass(frozen=True, eq=False)
class ObjectiveSpec:
    generator: GeneratorModel
    observation: ImageTensor
    surrogate: SurrogateKind = field(default_factory=Identity)
    params: SurrogateParams = field(default_factory=SurrogateParams)
    variant: str = FULL
    grayscale: GrayscaleCoefficients | None = None

    def __post_init__(self):
        if self.variant not in (FULL, IDENTITY):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == IDENTITY and not isinstance(self.surrogate, Identity):
            object.__setattr__(self, "surrogate", Identity())
        h, w, c = self.generator.output_shape
        if self.grayscale is not None:
            if c != 3:
                raise ShapeMismatchError("grayscale stage needs a 3-channel generator")
            c = 1
        if (h, w, c) != self.observation.shape:
            raise ShapeMismatchError(
                f"transformed generator output {(h, w, c)} does not match observation {self.observation.shape}"
            )
        self.surrogate.check_channels(c)

    @property
    def N(self) -> int:
        return self.observation.size

    @property
    def trains_k(self) -> bool:
        return self.surrogate.uses_k and self.params.train_k

    @property
    def trains_delta(self) -> bool:
        return self.surrogate.uses_delta and self.params.train_delta


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.1
    momentum: float = 0.999
    iterations: int = 20_000
    seed: int = 0
    restarts: int = 1
    eps: float = 1e-12
    stride: int = 100
    select: str = "best"

    def __post_init__(self):
        if self.select not in ("best", "last"):
            raise ValueError("select must be 'best' or 'last'")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.iterations < 1 or self.restarts < 1 or self.stride < 1:
            raise ValueError("iterations, restarts and stride must be positive")


REFERENCE_CONFIG = OptimizerConfig(iterations=200_000)
# lr / (1 - momentum) bounds the per-step travel; 0.1 suits small dense generators
DESK_CONFIG = OptimizerConfig(lr=0.01, momentum=0.9, iterations=20_000)


@dataclass(frozen=True)
class LossValue:
    total: float
    data_term: float
    prior_term: float
    residual: float  # S, before flooring


def _transform(spec: ObjectiveSpec, z, params: SurrogateParams):
    x, tape = spec.generator.forward_with_tape(z)
    img = x.reshape(spec.generator.output_shape)
    if spec.grayscale is not None:
        img = img @ spec.grayscale.as_array()
        img = img[:, :, None]
    out, ctx = spec.surrogate.apply(img, params)
    return out, ctx, tape


def loss_value(spec: ObjectiveSpec, z, params: SurrogateParams | None = None, eps: float = 1e-12) -> LossValue:
    params = params or spec.params
    z = np.asarray(z, dtype=np.float64)
    out, _, _ = _transform(spec, z, params)
    resid = spec.observation.data - out
    s = float(np.sum(resid * resid))
    data = spec.N * math.log(max(s, eps))
    prior = float(z @ z)
    return LossValue(data + prior, data, prior, s)


def loss_and_grads(spec: ObjectiveSpec, z, params: SurrogateParams | None = None, eps: float = 1e-12):
    """Objective value and its gradients.

    Returns ``(LossValue, grad_z, grad_kappa, grad_delta_raw)``. Parameter
    gradients are zero for parameters that are frozen or unused by the
    surrogate; below the residual floor the data term contributes nothing.
    """
    params = params or spec.params
    z = np.asarray(z, dtype=np.float64)
    out, ctx, tape = _transform(spec, z, params)
    resid = spec.observation.data - out
    s = float(np.sum(resid * resid))
    n = spec.N
    data = n * math.log(max(s, eps))
    prior = float(z @ z)
    lv = LossValue(data + prior, data, prior, s)
    if not math.isfinite(lv.total):
        raise NonFiniteLossError(f"non-finite loss {lv.total}", z=z.copy(), params=params)

    scale = n / s if s > eps else 0.0
    g_out = (-2.0 * scale) * resid
    g_in, g_kappa, g_delta = ctx.vjp(g_out)
    if spec.grayscale is not None:
        g_in = g_in * spec.grayscale.as_array()
    g_z = spec.generator.backward(tape, g_in) + 2.0 * z
    g_kappa = g_kappa if spec.surrogate.uses_k and params.train_k else 0.0
    g_delta = g_delta if spec.surrogate.uses_delta and params.train_delta else 0.0
    if not (np.all(np.isfinite(g_z)) and math.isfinite(g_kappa) and math.isfinite(g_delta)):
        raise NonFiniteLossError("non-finite gradient", z=z.copy(), params=params)
    return lv, g_z, g_kappa, g_delta


# --- optimizer ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OptimState:
    z: np.ndarray
    kappa: float
    delta_raw: float
    v_z: np.ndarray
    v_kappa: float = 0.0
    v_delta: float = 0.0

    @classmethod
    def start(cls, z, params: SurrogateParams) -> "OptimState":
        z = np.asarray(z, dtype=np.float64)
        return cls(z, params.kappa, params.delta_raw, np.zeros_like(z))


def _normalized(g, floor=1e-12):
    if np.ndim(g):
        return g / max(math.sqrt(float(g @ g)), floor)
    return g / max(abs(g), floor)


def step(state: OptimState, grads, config: OptimizerConfig) -> OptimState:
    """One heavy-ball step on per-block L2-normalized gradients.

    ``grads`` is ``(grad_z, grad_kappa, grad_delta_raw)``.
    """
    g_z, g_kappa, g_delta = grads
    mu, lr = config.momentum, config.lr
    v_z = mu * state.v_z + _normalized(np.asarray(g_z, dtype=np.float64))
    v_kappa = mu * state.v_kappa + _normalized(float(g_kappa))
    v_delta = mu * state.v_delta + _normalized(float(g_delta))
    kappa = min(max(state.kappa - lr * v_kappa, KAPPA_BOUNDS[0]), KAPPA_BOUNDS[1])
    delta_raw = min(max(state.delta_raw - lr * v_delta, DELTA_RAW_BOUNDS[0]), DELTA_RAW_BOUNDS[1])
    return OptimState(state.z - lr * v_z, kappa, delta_raw, v_z, v_kappa, v_delta)


# --- traces -----------------------------------------------------------------------

@dataclass
class RunTrace:
    N: int
    iters: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    S: list = field(default_factory=list)
    znorm2: list = field(default_factory=list)
    k: list = field(default_factory=list)
    delta: list = field(default_factory=list)
    delta_unconstrained: bool = False

    def record(self, t, lv: LossValue, params: SurrogateParams, uses_k: bool, uses_delta: bool):
        self.iters.append(t)
        self.loss.append(lv.total)
        self.S.append(lv.residual)
        self.znorm2.append(lv.prior_term)
        self.k.append(params.k if uses_k else math.nan)
        self.delta.append(params.delta if uses_delta else math.nan)

    @property
    def beta2(self) -> list:
        return [s / self.N for s in self.S]

    def __len__(self):
        return len(self.iters)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for row in zip(self.iters, self.loss, self.S, self.znorm2, self.k, self.delta, self.beta2):
            writer.writerow([row[0], *(repr(float(v)) for v in row[1:])])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def read_trace_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        rows = list(reader)
    return {name: np.array([float(r[name]) for r in rows]) for name in fields}


@dataclass(frozen=True, eq=False)
class RestoreResult:
    z: np.ndarray
    params: SurrogateParams
    xhat: ImageTensor
    trace: RunTrace
    loss: LossValue
    restart: int = 0

    @property
    def k(self) -> float:
        return self.params.k

    @property
    def delta(self) -> float:
        return self.params.delta


def _run_once(spec: ObjectiveSpec, config: OptimizerConfig, restart: int) -> RestoreResult:
    rng = np.random.default_rng([config.seed, restart])
    state = OptimState.start(rng.standard_normal(spec.generator.latent_dim), spec.params)
    trace = RunTrace(spec.N)
    uses_k, uses_delta = spec.surrogate.uses_k, spec.surrogate.uses_delta
    train_k, train_delta = spec.params.train_k, spec.params.train_delta
    best = None
    for t in range(config.iterations):
        params = SurrogateParams(state.kappa, state.delta_raw, train_k, train_delta)
        try:
            lv, g_z, g_kappa, g_delta = loss_and_grads(spec, state.z, params, config.eps)
        except NonFiniteLossError as exc:
            exc.iteration, exc.trace = t, trace
            raise
        if t % config.stride == 0:
            trace.record(t, lv, params, uses_k, uses_delta)
        if best is None or lv.total < best[0].total:
            best = (lv, state.z, params)
        state = step(state, (g_z, g_kappa, g_delta), config)
    params = SurrogateParams(state.kappa, state.delta_raw, train_k, train_delta)
    final = loss_value(spec, state.z, params, config.eps)
    if not math.isfinite(final.total):
        raise NonFiniteLossError("non-finite final loss", config.iterations, state.z, params, trace)
    z = state.z
    # normalized steps never shrink, so the last iterate keeps oscillating
    if config.select == "best" and best[0].total < final.total:
        final, z, params = best
    return RestoreResult(z, params, spec.generator.forward(z), trace, final, restart)


def restore(spec: ObjectiveSpec, config: OptimizerConfig | None = None) -> RestoreResult:
    """Run ``config.restarts`` seeded descents and keep the lowest loss.

    Each descent starts from ``z ~ N(0, I)`` seeded by ``(seed, restart)``.
    With ``config.select == "best"`` a run reports its lowest-loss iterate,
    otherwise its last one.
    """
    config = config or OptimizerConfig()
    best = None
    for r in range(config.restarts):
        result = _run_once(spec, config, r)
        if best is None or result.loss.total < best.loss.total:
            best = result
    return best


def restore_with_unknown_threshold(spec: ObjectiveSpec, config: OptimizerConfig | None = None) -> RestoreResult:
    """Restore a binarized observation while estimating ``k`` and ``delta``.

    A constant observation carries no information about the threshold; the
    run still completes but ``trace.delta_unconstrained`` is set.
    """
    if not isinstance(spec.surrogate, SoftThreshold):
        raise ValueError("threshold estimation needs a soft-threshold surrogate")
    if not (spec.params.train_k and spec.params.train_delta):
        spec = replace(spec, params=replace(spec.params, train_k=True, train_delta=True))
    result = restore(spec, config)
    y = spec.observation.data
    result.trace.delta_unconstrained = bool(y.min() == y.max())
    return result


def _restore_job(args):
    spec, config, catch = args
    try:
        if isinstance(spec.surrogate, SoftThreshold) and spec.params.train_delta:
            return restore_with_unknown_threshold(spec, config)
        return restore(spec, config)
    except (NonFiniteLossError, ValueError) as exc:
        if not catch:
            raise
        return exc


def restore_batch(specs: Sequence[ObjectiveSpec], config: OptimizerConfig | Sequence[OptimizerConfig],
                  workers: int = 1, return_exceptions: bool = False) -> list:
    """Independent restorations, optionally across a process pool. Order is preserved.

    With ``return_exceptions`` a failed run yields its exception in place of a
    :class:`RestoreResult` instead of aborting the batch.
    """
    configs = [config] * len(specs) if isinstance(config, OptimizerConfig) else list(config)
    if len(configs) != len(specs):
        raise ValueError("need one optimizer config per spec")
    jobs = [(s, c, return_exceptions) for s, c in zip(specs, configs)]
    if workers <= 1 or len(jobs) <= 1:
        return [_restore_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_restore_job, jobs))


def delta_error_variance(delta_traces: Sequence[Sequence[float]], true_deltas: Sequence[float]) -> np.ndarray:
    """Pointwise ensemble mean of squared threshold errors."""
    if len(delta_traces) != len(true_deltas) or not delta_traces:
        raise ValueError("need one true threshold per trace")
    arr = np.array([np.asarray(d, dtype=np.float64) for d in delta_traces])
    err = arr - np.asarray(true_deltas, dtype=np.float64)[:, None]
    return np.mean(err * err, axis=0)


def write_delta_variance_csv(path, iters, variance) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iter", "delta_err_var"])
        for t, v in zip(iters, variance):
            writer.writerow([int(t), repr(float(v))])
