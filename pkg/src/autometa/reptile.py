"""First-order meta-learning (Reptile) over a compiled network."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .network import ModelState, Network
from .nn import Mode, OptimState, step
from .seeding import rng_for, stable_hash
from .tasks import Episode, TaskSampler


@dataclass(frozen=True)
class MetaConfig:
    inner_iterations: int = 8
    inner_batch: int = 10
    inner_lr: float = 0.01
    inner_optimizer: str = "adam"
    meta_batch: int = 5
    outer_step: float = 1.0
    anneal: str = "linear"  # "linear" | "constant"
    outer_iterations: int = 1000
    transduction: bool = False
    eval_inner_iterations: int | None = None

    def __post_init__(self):
        if self.inner_iterations < 0 or self.inner_batch < 1 or self.meta_batch < 1:
            raise ValueError("inner_iterations >= 0, inner_batch >= 1, meta_batch >= 1 required")
        if self.outer_iterations < 0:
            raise ValueError("outer_iterations must be >= 0")
        if not 0.0 < self.outer_step <= 1.0:
            raise ValueError("outer_step must lie in (0, 1]")
        if self.anneal not in ("linear", "constant"):
            raise ValueError(f"unknown anneal schedule {self.anneal!r}")
        if self.inner_optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown inner optimizer {self.inner_optimizer!r}")

    @property
    def eval_iterations(self) -> int:
        return self.inner_iterations if self.eval_inner_iterations is None else self.eval_inner_iterations

    def outer_step_at(self, i: int) -> float:
        if self.anneal == "constant" or self.outer_iterations == 0:
            return self.outer_step
        return self.outer_step * (1.0 - i / self.outer_iterations)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TraceRow:
    outer_iter: int
    meta_test_acc: float
    ci95: float
    wall_seconds: float


def inner_adapt(net: Network, theta: ModelState, x: np.ndarray, y: np.ndarray, config: MetaConfig,
                rng: np.random.Generator, iterations: int | None = None) -> ModelState:
    """Adapt a copy of ``theta`` to one support set; ``theta`` is left untouched.

    When the support set fits in one inner batch every step uses all of it;
    otherwise each step draws ``inner_batch`` examples with replacement.
    Optimizer moments start fresh for every call.
    """
    n = len(x)
    if n == 0:
        raise ValueError("empty support set")
    iterations = config.inner_iterations if iterations is None else iterations
    phi = theta.copy()
    if iterations == 0:
        return phi
    names = list(phi.params)
    opt = OptimState(config.inner_optimizer, config.inner_lr)
    for _ in range(iterations):
        if n <= config.inner_batch:
            xb, yb = x, y
        else:
            idx = rng.integers(0, n, size=config.inner_batch)
            xb, yb = x[idx], y[idx]
        _, grads = net.loss_and_grads(phi, xb, yb, Mode.TRAIN)
        updated = step(opt, [phi.params[k] for k in names], [grads[k] for k in names])
        phi.params = dict(zip(names, updated))
    return phi


def interpolate(theta: ModelState, adapted: Sequence[ModelState], epsilon: float) -> ModelState:
    """theta + epsilon * mean_j(phi_j - theta), applied to parameters and BN buffers."""
    def move(a: dict, others: list[dict]) -> dict:
        out = {}
        for k, v in a.items():
            delta = others[0][k] - v
            for o in others[1:]:
                delta = delta + (o[k] - v)
            out[k] = v + epsilon * (delta / len(others))
        return out

    return ModelState(move(theta.params, [p.params for p in adapted]),
                      move(theta.buffers, [p.buffers for p in adapted]))


def reptile_outer_step(net: Network, theta: ModelState, episodes: Sequence[Episode], config: MetaConfig,
                       epsilon: float, rngs: Sequence[np.random.Generator]) -> ModelState:
    if not episodes:
        raise ValueError("meta batch is empty")
    adapted = [inner_adapt(net, theta, ep.support_x, ep.support_y, config, rng)
               for ep, rng in zip(episodes, rngs)]
    return interpolate(theta, adapted, epsilon)


def episode_accuracies(net: Network, theta: ModelState, episodes: Sequence[Episode], config: MetaConfig,
                       seed: int = 0, modes: Sequence[Mode] = (Mode.EVAL_RUNNING,)) -> dict[Mode, np.ndarray]:
    """Per-episode query accuracy after adaptation, for each prediction mode."""
    out = {m: np.empty(len(episodes)) for m in modes}
    for e, ep in enumerate(episodes):
        phi = inner_adapt(net, theta, ep.support_x, ep.support_y, config,
                          rng_for(seed, "eval-inner", e), iterations=config.eval_iterations)
        for m in modes:
            pred = net.logits(phi, ep.query_x, m).argmax(axis=1)
            out[m][e] = np.mean(pred == ep.query_y)
    return out


def summarize(acc: np.ndarray) -> tuple[float, float]:
    """Mean and 95% half-width (1.96 sd / sqrt(E))."""
    n = len(acc)
    sd = acc.std(ddof=1) if n > 1 else 0.0
    return float(acc.mean()), float(1.96 * sd / np.sqrt(n))


def evaluate_meta(net: Network, theta: ModelState, episodes: Sequence[Episode], config: MetaConfig,
                  seed: int = 0, transduction: bool | None = None) -> tuple[float, float]:
    if not episodes:
        raise ValueError("no evaluation episodes")
    transduction = config.transduction if transduction is None else transduction
    mode = Mode.EVAL_TRANSDUCTION if transduction else Mode.EVAL_RUNNING
    return summarize(episode_accuracies(net, theta, episodes, config, seed, (mode,))[mode])


def heldout_episodes(sampler: TaskSampler, count: int, seed: int, purpose: str = "eval") -> list[Episode]:
    return [sampler.test_episode(rng_for(seed, purpose, e)) for e in range(count)]


def reptile_train(net: Network, sampler: TaskSampler, config: MetaConfig, seed: int,
                  theta: ModelState | None = None, trace_every: int = 0, trace_episodes: int = 20,
                  on_trace: Callable[[TraceRow], None] | None = None) -> tuple[ModelState, list[TraceRow]]:
    """Meta-train from a seeded initialization; returns final parameters and trace.

    Every random stream is derived from ``seed`` plus its (iteration, task)
    coordinates, so results do not depend on evaluation order.
    """
    if theta is None:
        theta = net.init_state(stable_hash(seed, "init"))
    trace: list[TraceRow] = []
    probe = heldout_episodes(sampler, trace_episodes, seed, "trace") if trace_every else []
    t0 = time.perf_counter()

    def record(i):
        acc, ci = evaluate_meta(net, theta, probe, config, seed)
        row = TraceRow(i, acc, ci, time.perf_counter() - t0)
        trace.append(row)
        if on_trace:
            on_trace(row)

    for i in range(config.outer_iterations):
        if trace_every and i % trace_every == 0:
            record(i)
        episodes = [sampler.train_episode(rng_for(seed, "train-episode", i, j))
                    for j in range(config.meta_batch)]
        rngs = [rng_for(seed, "inner", i, j) for j in range(config.meta_batch)]
        theta = reptile_outer_step(net, theta, episodes, config, config.outer_step_at(i), rngs)
    if trace_every:
        record(config.outer_iterations)
    return theta, trace


def with_overrides(config: MetaConfig, **kw) -> MetaConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
