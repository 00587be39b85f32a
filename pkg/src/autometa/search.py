"""Progressive cell search: beam over block counts, surrogate-ranked expansions."""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import jsonschema
import numpy as np

from .cells import Cell, cell_depth, depth_distribution, enumerate_expansions
from .network import ModelState, Network, NetworkSpec
from .nn import Mode
from .reptile import MetaConfig, episode_accuracies, heldout_episodes, reptile_train, summarize
from .seeding import rng_for, stable_hash
from .surrogate import SurrogateModel, surrogate_fit, surrogate_predict
from .tasks import TaskSampler, load_dataset, synthetic_sampler
from .tensor import NumericError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "autometa-search"
CHECKPOINT_VERSION = 1

Scorer = Callable[[Sequence[Cell]], Sequence[float | None]]
Predictor = Callable[[Sequence[tuple[Cell, float]], Sequence[Cell]], Sequence[float]]


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    max_blocks: int = 5
    beam: int = 5
    filters: int = 10
    unroll: int = 0
    feature_scale_rate: int = 2
    n_stages: int = 2
    eval_episodes: int = 50
    global_seed: int = 0
    workers: int = 1
    dataset: str = "synthetic"
    data_seed: int = 0
    test_classes: int = 20
    n_way: int = 5
    k_shot: int = 1
    query_per_class: int = 15
    surrogate_epochs: int = 200
    meta: MetaConfig = field(default_factory=lambda: MetaConfig(outer_iterations=100))
    final_meta: MetaConfig = field(default_factory=lambda: MetaConfig(outer_iterations=1000))
    final_episodes: int = 200

    def __post_init__(self):
        if self.beam < 1 or self.max_blocks < 1 or self.eval_episodes < 1:
            raise ValueError("beam, max_blocks and eval_episodes must all be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def network_spec(self, cell: Cell) -> NetworkSpec:
        return NetworkSpec(cell, self.filters, self.unroll, self.feature_scale_rate,
                           self.n_stages, self.n_way)

    def make_sampler(self) -> TaskSampler:
        if self.dataset == "synthetic":
            return synthetic_sampler(self.data_seed, n_test=self.test_classes, n_way=self.n_way,
                                     k_shot=self.k_shot, query_per_class=self.query_per_class)
        train, test = load_dataset(self.dataset).split(self.test_classes)
        return TaskSampler(train, test, self.n_way, self.k_shot, self.query_per_class)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown search config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("meta", "final_meta"):
            if k in d and isinstance(d[k], dict):
                d[k] = MetaConfig(**d[k])
        return cls(**d)


@dataclass
class StageRecord:
    blocks: int
    candidates: int
    trained: list[dict]  # {"cell", "predicted", "score"} in canonical key order
    beam: list[tuple[str, float]]


@dataclass
class SearchState:
    config: SearchConfig
    stage: int = 0
    history: list[tuple[str, float]] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    stages: list[StageRecord] = field(default_factory=list)
    surrogate: dict | None = None

    @property
    def beam(self) -> list[tuple[str, float]]:
        return self.stages[-1].beam if self.stages else []

    def best(self) -> tuple[Cell, float]:
        if not self.beam:
            raise ValueError("search has no completed stage")
        key, score = sorted(self.beam, key=lambda kv: (-kv[1], kv[0]))[0]
        return Cell.from_json(key), score

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "rng": {"global_seed": self.config.global_seed, "next_stage": self.stage + 1},
            "stage": self.stage,
            "history": [[k, s] for k, s in self.history],
            "failures": list(self.failures),
            "stages": [{"blocks": r.blocks, "candidates": r.candidates, "trained": r.trained,
                        "beam": [[k, s] for k, s in r.beam]} for r in self.stages],
            "surrogate": self.surrogate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchState":
        if not isinstance(d, dict) or d.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError("not a search checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {d.get('version')!r} is not {CHECKPOINT_VERSION}")
        try:
            return cls(
                config=SearchConfig.from_dict(d["config"]),
                stage=int(d["stage"]),
                history=[(str(k), float(s)) for k, s in d["history"]],
                failures=[str(k) for k in d["failures"]],
                stages=[StageRecord(int(r["blocks"]), int(r["candidates"]), list(r["trained"]),
                                    [(str(k), float(s)) for k, s in r["beam"]]) for r in d["stages"]],
                surrogate=d["surrogate"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc}") from exc


def checkpoint_dumps(state: SearchState) -> str:
    return json.dumps(state.to_dict(), sort_keys=True, indent=1) + "\n"


def checkpoint_save(state: SearchState, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(checkpoint_dumps(state))
    os.replace(tmp, path)


def checkpoint_load(path) -> SearchState:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed JSON in checkpoint: {exc}") from exc
    return SearchState.from_dict(raw)


# ---------------------------------------------------------------- candidate scoring

def candidate_seed(global_seed: int, cell: Cell) -> int:
    return stable_hash(global_seed, cell.key())


def score_candidate(cell: Cell, config: SearchConfig, sampler: TaskSampler) -> float:
    """Meta-train ``cell`` with the search budget and return its meta-test accuracy."""
    net = Network(config.network_spec(cell))
    seed = candidate_seed(config.global_seed, cell)
    theta, _ = reptile_train(net, sampler, config.meta, seed)
    episodes = heldout_episodes(sampler, config.eval_episodes, config.global_seed, "score")
    mode = Mode.EVAL_TRANSDUCTION if config.meta.transduction else Mode.EVAL_RUNNING
    acc = episode_accuracies(net, theta, episodes, config.meta, config.global_seed, (mode,))[mode]
    return float(acc.mean())


def _safe_score(cell: Cell, config: SearchConfig, sampler: TaskSampler) -> float | None:
    try:
        return score_candidate(cell, config, sampler)
    except (NumericError, FloatingPointError) as exc:
        log.warning("candidate %s failed: %s", cell.key(), exc)
        return None


def pool_scorer(config: SearchConfig, sampler: TaskSampler) -> Scorer:
    def run(cells: Sequence[Cell]) -> list[float | None]:
        if config.workers == 1:
            return [_safe_score(c, config, sampler) for c in cells]
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(lambda c: _safe_score(c, config, sampler), cells))
    return run


# ---------------------------------------------------------------- search loop

def _top(items: Sequence[tuple[str, float]], k: int) -> list[tuple[str, float]]:
    return sorted(items, key=lambda kv: (-kv[1], kv[0]))[:k]


def run_pnas_search(config: SearchConfig, *, sampler: TaskSampler | None = None,
                    scorer: Scorer | None = None, predictor: Predictor | None = None,
                    state: SearchState | None = None, stop_after: int | None = None,
                    checkpoint_path=None) -> tuple[Cell | None, SearchState]:
    """Run (or resume) the progressive search.

    ``scorer`` and ``predictor`` default to real meta-training and the LSTM
    surrogate; injecting them isolates the beam logic. With ``stop_after`` the
    loop returns after that stage (best cell is then None).
    """
    if state is None:
        state = SearchState(config)
    elif state.config != config:
        raise CheckpointError("checkpoint was produced with a different configuration")
    if scorer is None:
        scorer = pool_scorer(config, sampler if sampler is not None else config.make_sampler())

    surrogate_model = SurrogateModel.from_dict(state.surrogate) if state.surrogate else None

    def predict(cells: list[Cell]) -> list[float]:
        if predictor is not None:
            hist = [(Cell.from_json(k), s) for k, s in state.history]
            return list(predictor(hist, cells))
        return surrogate_predict(surrogate_model, cells)

    for b in range(state.stage + 1, config.max_blocks + 1):
        if b == 1:
            candidates = enumerate_expansions(None, 0, config.max_blocks)
            pool = candidates
            predicted = [None] * len(candidates)
        else:
            seen: dict[str, Cell] = {}
            for key, _ in state.beam:
                for child in enumerate_expansions(Cell.from_json(key), b - 1, config.max_blocks):
                    seen.setdefault(child.key(), child)
            pool = [seen[k] for k in sorted(seen)]
            preds = predict(pool)
            chosen = _top([(c.key(), p) for c, p in zip(pool, preds)], config.beam)
            pred_of = dict(chosen)
            candidates = sorted((seen[k] for k, _ in chosen), key=Cell.key)
            predicted = [pred_of[c.key()] for c in candidates]

        log.info("stage %d: %d expansions, training %d", b, len(pool), len(candidates))
        scores = list(scorer(candidates))
        trained, scored = [], []
        for cell, pred, score in zip(candidates, predicted, scores):
            key = cell.key()
            trained.append({"cell": key, "predicted": pred, "score": score})
            if score is None:
                state.failures.append(key)
            else:
                scored.append((key, float(score)))
        state.history.extend(scored)
        beam = _top(scored, config.beam)
        state.stages.append(StageRecord(b, len(pool), trained, beam))
        state.stage = b

        if predictor is None and b < config.max_blocks and state.history:
            hist = [(Cell.from_json(k), s) for k, s in state.history]
            surrogate_model, _ = surrogate_fit(hist, seed=stable_hash(config.global_seed, "surrogate", b),
                                               epochs=config.surrogate_epochs, max_blocks=config.max_blocks)
            state.surrogate = surrogate_model.to_dict()
        if checkpoint_path is not None:
            checkpoint_save(state, checkpoint_path)
        if stop_after is not None and b >= stop_after and b < config.max_blocks:
            return None, state

    best, _ = state.best()
    return best, state


# ---------------------------------------------------------------- final training and reports

REPORT_SCHEMA = {
    "type": "object",
    "required": ["cell", "cell_key", "param_count", "seed", "episodes", "accuracy", "network", "meta"],
    "properties": {
        "cell": {"type": "array", "items": {"type": "array", "minItems": 4, "maxItems": 4}},
        "cell_key": {"type": "string"},
        "param_count": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "episodes": {"type": "integer", "minimum": 1},
        "accuracy": {
            "type": "object",
            "required": ["transduction", "running"],
            "additionalProperties": False,
            "properties": {
                m: {"type": "object", "required": ["mean", "ci95"],
                    "properties": {"mean": {"type": "number", "minimum": 0, "maximum": 1},
                                   "ci95": {"type": "number", "minimum": 0}}}
                for m in ("transduction", "running")
            },
        },
        "network": {"type": "object"},
        "meta": {"type": "object"},
    },
}


def final_train(cell: Cell, config: SearchConfig, sampler: TaskSampler | None = None,
                trace_every: int = 0) -> tuple[Network, ModelState, dict, list]:
    """Retrain ``cell`` with the full budget and a fresh seed; evaluate both BN modes."""
    sampler = sampler if sampler is not None else config.make_sampler()
    spec = config.network_spec(cell)
    net = Network(spec)
    seed = stable_hash(config.global_seed, "final", cell.key())
    theta, trace = reptile_train(net, sampler, config.final_meta, seed, trace_every=trace_every)
    episodes = heldout_episodes(sampler, config.final_episodes, seed, "final-eval")
    acc = episode_accuracies(net, theta, episodes, config.final_meta, seed,
                             (Mode.EVAL_TRANSDUCTION, Mode.EVAL_RUNNING))
    report = {
        "cell": cell.to_list(),
        "cell_key": cell.key(),
        "param_count": net.param_count(),
        "seed": seed,
        "episodes": config.final_episodes,
        "accuracy": {
            "transduction": dict(zip(("mean", "ci95"), summarize(acc[Mode.EVAL_TRANSDUCTION]))),
            "running": dict(zip(("mean", "ci95"), summarize(acc[Mode.EVAL_RUNNING]))),
        },
        "network": spec.to_dict(),
        "meta": config.final_meta.to_dict(),
    }
    jsonschema.validate(report, REPORT_SCHEMA)
    return net, theta, report, trace


def stage_depth_histograms(state: SearchState) -> list[tuple[int, dict[int, int]]]:
    return [(r.blocks, depth_distribution(Cell.from_json(k) for k, _ in r.beam))
            for r in state.stages if r.beam]


def mean_depth_per_stage(state: SearchState) -> dict[int, float]:
    return {r.blocks: float(np.mean([cell_depth(Cell.from_json(k)) for k, _ in r.beam]))
            for r in state.stages if r.beam}


def emit_report(state: SearchState, out_dir) -> dict[str, Path]:
    """Write depth histograms, the score trajectory and the best cell as data files."""
    if not state.stages:
        raise ValueError("no completed stage to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in
             ("depth_hist.csv", "scores.csv", "best_cell.json", "depth_summary.json")}

    with paths["depth_hist.csv"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "depth", "count"])
        for stage, hist in stage_depth_histograms(state):
            for depth, count in hist.items():
                w.writerow([stage, depth, count])

    with paths["scores.csv"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "cell", "depth", "predicted", "score", "in_beam"])
        for r in state.stages:
            beam_keys = {k for k, _ in r.beam}
            for t in r.trained:
                w.writerow([r.blocks, t["cell"], cell_depth(Cell.from_json(t["cell"])),
                            "" if t["predicted"] is None else repr(t["predicted"]),
                            "" if t["score"] is None else repr(t["score"]), int(t["cell"] in beam_keys)])

    best, score = state.best()
    paths["best_cell.json"].write_text(json.dumps({"cell": best.to_list(), "score": score}) + "\n")

    means = mean_depth_per_stage(state)
    ordered = [means[k] for k in sorted(means)]
    summary = {"mean_depth": {str(k): v for k, v in sorted(means.items())},
               "deepening": all(a <= b for a, b in zip(ordered, ordered[1:]))}
    paths["depth_summary.json"].write_text(json.dumps(summary, indent=1) + "\n")
    return paths


def random_cells(n_blocks: int, count: int, seed: int, max_blocks: int = 5) -> list[Cell]:
    """Uniformly grown random cells (one uniform expansion per step)."""
    rng = rng_for(seed, "random-cells", n_blocks)
    out = []
    for _ in range(count):
        cell = None
        for b in range(n_blocks):
            options = enumerate_expansions(cell, b, max_blocks)
            cell = options[rng.integers(len(options))]
        out.append(cell)
    return out
