"""Layer dispatch, optimizers and finite-difference gradient checking."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class LayerKind(enum.Enum):
    CONV3X3 = "conv3"
    FACTORIZED_CONV5X5 = "fconv5"
    IDENTITY = "id"
    AVG_POOL3X3 = "avg3"
    MAX_POOL3X3 = "max3"
    CONV1X1 = "conv1"
    BATCH_NORM = "bn"
    RELU = "relu"
    LINEAR = "linear"
    GLOBAL_AVG_POOL = "gap"
    CONCAT = "concat"
    ADD = "add"


# the five operations a block may apply, in canonical index order
BLOCK_OPS = (
    LayerKind.CONV3X3,
    LayerKind.FACTORIZED_CONV5X5,
    LayerKind.IDENTITY,
    LayerKind.AVG_POOL3X3,
    LayerKind.MAX_POOL3X3,
)


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL_RUNNING = "eval_running"
    EVAL_TRANSDUCTION = "eval_transduction"


@dataclass
class BNStats:
    """Running statistics of one BatchNorm layer (mutated in Train mode)."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BNStats":
        return cls(np.zeros(channels), np.ones(channels))


def forward(kind: LayerKind, inputs: Sequence[Tensor], params: Sequence[Tensor] = (),
            mode: Mode = Mode.TRAIN, stats: BNStats | None = None) -> Tensor:
    """Apply one layer.

    Parameter layouts: convs ``[w, b]`` (factorized 5x5: ``[w1x5, b1, w5x1, b2]``),
    BatchNorm ``[gamma, beta]`` plus ``stats`` for running statistics,
    Linear ``[w, b]`` with ``w`` shaped (out, in).
    """
    if kind in (LayerKind.CONCAT, LayerKind.ADD):
        if not inputs:
            raise ValueError(f"{kind.value} needs at least one input")
        if kind is LayerKind.ADD:
            return T.add_n(list(inputs))
        return T.concat(list(inputs), axis=1)

    if len(inputs) != 1:
        raise ValueError(f"{kind.value} takes exactly one input")
    x = inputs[0]
    if kind is LayerKind.IDENTITY:
        return x
    if kind is LayerKind.RELU:
        return T.relu(x)
    if kind is LayerKind.CONV3X3:
        w, b = params
        return T.conv2d(x, w, b, (1, 1))
    if kind is LayerKind.CONV1X1:
        w, b = params
        return T.conv2d(x, w, b, (0, 0))
    if kind is LayerKind.FACTORIZED_CONV5X5:
        w1, b1, w2, b2 = params
        return T.conv2d(T.conv2d(x, w1, b1, (0, 2)), w2, b2, (2, 0))
    if kind is LayerKind.AVG_POOL3X3:
        return T.avg_pool3(x)
    if kind is LayerKind.MAX_POOL3X3:
        return T.max_pool3(x)
    if kind is LayerKind.GLOBAL_AVG_POOL:
        return T.global_avg_pool(x)
    if kind is LayerKind.LINEAR:
        w, b = params
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ValueError(f"linear shape mismatch: {x.shape} vs {w.shape}")
        return T.linear(x, w, b)
    if kind is LayerKind.BATCH_NORM:
        gamma, beta = params
        if stats is None:
            stats = BNStats.fresh(gamma.shape[0])
        if mode is Mode.EVAL_RUNNING:
            return T.batch_norm(x, gamma, beta, use_batch_stats=False,
                                running_mean=stats.mean, running_var=stats.var, eps=BN_EPS)
        return T.batch_norm(x, gamma, beta, use_batch_stats=True,
                            running_mean=stats.mean, running_var=stats.var,
                            momentum=BN_MOMENTUM, eps=BN_EPS,
                            update_running=mode is Mode.TRAIN)
    raise ValueError(f"unknown layer kind {kind}")


# ---------------------------------------------------------------- optimizers

@dataclass
class OptimState:
    kind: str = "adam"  # "adam" | "sgd"
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def step(opt: OptimState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    """One optimizer step; returns new parameter arrays, updates ``opt`` in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads are not aligned")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    opt.step_count += 1
    lr = opt.learning_rate
    if opt.kind == "sgd":
        return [p - lr * g for p, g in zip(params, grads)]

    if not opt.m:
        opt.m = [np.zeros_like(p) for p in params]
        opt.v = [np.zeros_like(p) for p in params]
    b1, b2, t = opt.adam_beta1, opt.adam_beta2, opt.step_count
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if opt.m[i].shape != p.shape:
            raise ValueError("moment shape does not match parameter")
        m = b1 * opt.m[i] + (1.0 - b1) * g
        v = b2 * opt.v[i] + (1.0 - b2) * (g * g)
        opt.m[i], opt.v[i] = m, v
        out.append(p - lr * (m / c1) / (np.sqrt(v / c2) + opt.adam_eps))
    return out


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    checked: int
    skipped_kinks: int

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], tolerance: float = 1e-4,
               h: float = 1e-3, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild the loss from the current ``.data`` of ``params``.
    Coordinates whose +/-h perturbation flips a ReLU or max-pool selection are
    non-differentiable there and are counted in ``skipped_kinks`` instead of
    being compared. ``max_entries`` subsamples coordinates per parameter.
    """
    names = list(params)
    if sum(params[n].data.size for n in names) >= 10_000 and max_entries is None:
        raise ValueError("grad_check is meant for fragments under 10^4 parameters")
    loss = loss_fn()
    analytic = T.backward(loss, [params[n] for n in names])
    rng = rng or np.random.default_rng(0)

    def evaluate():
        kinks: list = []
        with T.no_grad(), T.record_kinks(kinks):
            value = float(loss_fn().data)
        return value, kinks

    _, base_kinks = evaluate()
    errors: dict[str, float] = {}
    checked = skipped = 0
    for name in names:
        p = params[name]
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError(f"parameter {name!r} must be C-contiguous for perturbation")
        ga = analytic[p].reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp, kp = evaluate()
            flat[i] = orig - h
            fm, km = evaluate()
            flat[i] = orig
            if kp != base_kinks or km != base_kinks:
                skipped += 1
                continue
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, relative_error(float(ga[i]), numeric))
            checked += 1
        errors[name] = worst
    return GradCheckReport(errors, tolerance, checked, skipped)
