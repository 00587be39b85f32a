"""Command line entry point: search, train, eval, report, gen-data."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cells import Cell
from .network import ModelState, Network, NetworkSpec
from .reptile import MetaConfig, evaluate_meta, heldout_episodes
from .search import (SearchConfig, checkpoint_load, checkpoint_save, emit_report, final_train,
                     run_pnas_search)
from .tasks import generate_synthetic_glyphs, save_dataset

PARAMS_FORMAT = "autometa-params"


def _add_network_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--filters", type=int, default=10)
    p.add_argument("--unroll", type=int, default=0)
    p.add_argument("--scale", type=int, default=2, choices=(1, 2))
    p.add_argument("--stages", type=int, default=2)


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", default="synthetic", help="FSDS file or 'synthetic'")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--test-classes", type=int, default=20)
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=1)
    p.add_argument("--query", type=int, default=15)


def _add_meta_flags(p: argparse.ArgumentParser, outer_default: int) -> None:
    p.add_argument("--inner-iterations", type=int, default=8)
    p.add_argument("--inner-batch", type=int, default=10)
    p.add_argument("--inner-lr", type=float, default=0.01)
    p.add_argument("--inner-optimizer", default="adam", choices=("adam", "sgd"))
    p.add_argument("--meta-batch", type=int, default=5)
    p.add_argument("--outer-step", type=float, default=1.0)
    p.add_argument("--anneal", default="linear", choices=("linear", "constant"))
    p.add_argument("--outer-iterations", type=int, default=outer_default)
    p.add_argument("--eval-inner-iterations", type=int, default=None)
    p.add_argument("--transduction", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autometa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="progressive cell search")
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--blocks", type=int, default=5)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--eval-episodes", type=int, default=50)
    p.add_argument("--final-iterations", type=int, default=1000)
    p.add_argument("--final-episodes", type=int, default=200)
    p.add_argument("--skip-final", action="store_true", help="stop after the search")
    p.add_argument("--resume", action="store_true", help="continue from OUT/state.json")
    p.add_argument("--out", required=True)
    _add_network_flags(p)
    _add_data_flags(p)
    _add_meta_flags(p, outer_default=100)

    p = sub.add_parser("train", help="meta-train one cell")
    p.add_argument("--config")
    p.add_argument("--cell", required=True, help="cell JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--trace-every", type=int, default=100)
    p.add_argument("--trace-episodes", type=int, default=20)
    p.add_argument("--out", required=True)
    _add_network_flags(p)
    _add_data_flags(p)
    _add_meta_flags(p, outer_default=1000)

    p = sub.add_parser("eval", help="meta-test a trained parameter file")
    p.add_argument("--config")
    p.add_argument("--params", required=True)
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--transduction", action="store_true")

    p = sub.add_parser("report", help="write report files from a search checkpoint")
    p.add_argument("--state", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic glyph dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=100)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--out", required=True)
    return parser


def read_config_file(path) -> dict[str, str]:
    """Parse flat ``key=value`` lines; '#' starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config_defaults(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = action.type(raw) if action.type else raw
    sub.set_defaults(**defaults)


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config_defaults(sub, read_config_file(args.config))
        args = parser.parse_args(argv)
    return args


def _meta_from(args) -> MetaConfig:
    return MetaConfig(inner_iterations=args.inner_iterations, inner_batch=args.inner_batch,
                      inner_lr=args.inner_lr, inner_optimizer=args.inner_optimizer,
                      meta_batch=args.meta_batch, outer_step=args.outer_step, anneal=args.anneal,
                      outer_iterations=args.outer_iterations, transduction=args.transduction,
                      eval_inner_iterations=args.eval_inner_iterations)


def _search_config_from(args, **extra) -> SearchConfig:
    return SearchConfig(filters=args.filters, unroll=args.unroll, feature_scale_rate=args.scale,
                        n_stages=args.stages, dataset=args.dataset, data_seed=args.data_seed,
                        test_classes=args.test_classes, n_way=args.way, k_shot=args.shot,
                        query_per_class=args.query, **extra)


def _write_trace(rows, path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["outer_iter", "meta_test_acc", "ci95", "wall_seconds"])
        for r in rows:
            w.writerow([r.outer_iter, repr(r.meta_test_acc), repr(r.ci95), f"{r.wall_seconds:.3f}"])


def save_params(path, config: SearchConfig, spec: NetworkSpec, theta: ModelState) -> None:
    def pack(d):
        return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in d.items()}
    doc = {"format": PARAMS_FORMAT, "version": 1, "config": config.to_dict(), "network": spec.to_dict(),
           "params": pack(theta.params), "buffers": pack(theta.buffers)}
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_params(path) -> tuple[SearchConfig, NetworkSpec, ModelState]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != PARAMS_FORMAT:
        raise ValueError(f"{path} is not a parameter file")

    def unpack(d):
        return {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}
    return (SearchConfig.from_dict(doc["config"]), NetworkSpec.from_dict(doc["network"]),
            ModelState(unpack(doc["params"]), unpack(doc["buffers"])))


def _load_cell(path) -> Cell:
    raw = json.loads(Path(path).read_text())
    return Cell.from_list(raw["cell"] if isinstance(raw, dict) else raw)


def cmd_search(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = _search_config_from(
        args, max_blocks=args.blocks, beam=args.beam, eval_episodes=args.eval_episodes,
        global_seed=args.seed, workers=args.workers, meta=_meta_from(args),
        final_meta=replace(_meta_from(args), outer_iterations=args.final_iterations),
        final_episodes=args.final_episodes)
    state_path = out / "state.json"
    state = checkpoint_load(state_path) if args.resume and state_path.exists() else None
    best, state = run_pnas_search(config, state=state, checkpoint_path=state_path)
    checkpoint_save(state, state_path)
    emit_report(state, out)
    print(f"best cell {best.key()} score {state.best()[1]:.4f}")
    if not args.skip_final:
        net, theta, report, trace = final_train(best, config, trace_every=max(1, args.final_iterations // 10))
        (out / "report.json").write_text(json.dumps(report, indent=1) + "\n")
        _write_trace(trace, out / "trace.csv")
        save_params(out / "params.json", config, net.spec, theta)
        acc = report["accuracy"]
        print(f"final: transduction {acc['transduction']['mean']:.4f} "
              f"running {acc['running']['mean']:.4f} params {report['param_count']}")
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = _search_config_from(args, global_seed=args.seed, final_meta=_meta_from(args),
                                 final_episodes=args.episodes)
    cell = _load_cell(args.cell)
    net, theta, report, trace = final_train(cell, config, trace_every=args.trace_every)
    _write_trace(trace, out / "trace.csv")
    (out / "report.json").write_text(json.dumps(report, indent=1) + "\n")
    save_params(out / "params.json", config, net.spec, theta)
    print(json.dumps(report["accuracy"]))
    return 0


def cmd_eval(args) -> int:
    config, spec, theta = load_params(args.params)
    net = Network(spec)
    sampler = config.make_sampler()
    episodes = heldout_episodes(sampler, args.episodes, args.seed, "cli-eval")
    mean, ci = evaluate_meta(net, theta, episodes, config.final_meta, args.seed,
                             transduction=args.transduction)
    print(json.dumps({"mean": mean, "ci95": ci, "episodes": args.episodes,
                      "transduction": args.transduction}))
    return 0


def cmd_report(args) -> int:
    paths = emit_report(checkpoint_load(args.state), args.out)
    for p in paths.values():
        print(p)
    return 0


def cmd_gen_data(args) -> int:
    ds = generate_synthetic_glyphs(args.seed, args.classes, args.per_class, args.size)
    save_dataset(ds, args.out)
    print(f"wrote {ds.n_classes} classes x {ds.per_class} images of {args.size}x{args.size} to {args.out}")
    return 0


COMMANDS = {"search": cmd_search, "train": cmd_train, "eval": cmd_eval,
            "report": cmd_report, "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
