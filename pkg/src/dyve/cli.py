"""``dyve`` command line: train a fixture, tune knobs, run inference, benchmark, effort maps.

Every report embeds a run manifest. Failures print one line
``error: <category>: <message>`` on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .data import holdout_split, load_dataset, save_dataset
from .engine import dyve_forward, validate_config
from .errors import DyveError
from .knobs import KnobConfig
from .metrics import benchmark, effort_maps, export_effort_map, map_inputs, reduction_ratio
from .model import load_model, save_model

EXIT_ERROR = 2
EXIT_BUDGET = 3


class BudgetViolation(DyveError):
    code = "budget_violation"


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("DYVE_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise DyveError(f"DYVE_SEED is not an integer: {env!r}") from None


def _manifest(args, outputs: dict) -> dict:
    return {
        "command": args.command,
        "model": getattr(args, "model", None),
        "data": getattr(args, "data", None),
        "knobs": getattr(args, "knobs", None),
        "seed": _seed(args),
        "outputs": outputs,
        "timestamp": None if args.no_timestamp else datetime.now(timezone.utc).isoformat(),
    }


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _write_json(path, doc) -> None:
    text = json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _split(ds, name: str, limit: int | None):
    part = ds.split(name) if name != "all" else ds
    if len(part) == 0:
        raise DyveError(f"dataset has no '{name}' samples")
    if limit is not None:
        part = part.subset(np.arange(min(limit, len(part))))
    return part


def _knobs(args, net) -> KnobConfig:
    if getattr(args, "knobs", None) is None:
        return KnobConfig.inert(len(net.layers))
    cfg = KnobConfig.load(args.knobs)
    validate_config(net, cfg)
    return cfg


# ------------------------------------------------------------------ commands

def cmd_train_fixture(args) -> int:
    from .trainer import build_fixture

    seed = _seed(args)
    fx = build_fixture(seed=seed, data_seed=args.data_seed, per_class_train=args.per_class_train,
                       per_class_eval=args.per_class_eval, epochs=args.epochs, lr=args.lr)
    save_model(fx.net, args.out_model)
    save_dataset(fx.data, args.out_data)
    report = {
        "manifest": _manifest(args, {"model": args.out_model, "data": args.out_data}),
        "train_accuracy": fx.train_accuracy,
        "heldout_accuracy": fx.heldout_accuracy,
        "samples": {s: int(np.sum(fx.data.splits == s)) for s in ("train", "tune", "heldout")},
    }
    _write_json(args.report, report)
    return 0


def cmd_tune(args) -> int:
    from .tuner import TuningSet, tune_network

    net = load_model(args.model)
    ds = load_dataset(args.data)
    if not np.any(ds.splits == "tune"):
        ds = holdout_split(ds, 0.05, seed=_seed(args))
    tuning = TuningSet.from_dataset(ds.split("tune"))
    cfg, rep = tune_network(net, tuning, budget_pp=args.budget)
    cfg.save(args.out)
    doc = rep.to_json()
    doc["manifest"] = _manifest(args, {"knobs": args.out, "report": args.report})
    _write_json(args.report, doc)
    if rep.final_accuracy < rep.baseline_accuracy - args.budget / 100.0 - 1e-12:
        raise BudgetViolation(f"tuned accuracy {rep.final_accuracy:.4f} breaks the {args.budget} point budget")
    return 0


def cmd_infer(args) -> int:
    net = load_model(args.model)
    part = _split(load_dataset(args.data), args.split, args.limit)
    cfg = _knobs(args, net)
    traces = map_inputs(lambda x: dyve_forward(net, x, cfg, record=False), list(part.inputs), args.threads)
    from .counters import OpCounters

    total = OpCounters.empty(len(net.layers))
    for t in traces:
        total.merge(t.counters)
    preds = [t.predicted for t in traces]
    report = {
        "manifest": _manifest(args, {"report": args.report}),
        "inputs": len(part),
        "baseline_ops": total.baseline_ops,
        "dyve_ops": total.spent_ops,
        "overhead_ops": total.overhead_ops,
        "reduction_ratio": total.baseline_ops / total.total_ops,
        "per_layer": [dict(layer=i, kind=net.layers[i].kind, **t.to_dict()) for i, t in enumerate(total.layers)],
        "per_knob": total.saved_by_knob(),
        "accuracy_baseline": None,
        "accuracy_dyve": float(np.mean(np.array(preds) == part.labels)),
        "predictions": preds,
    }
    _write_json(args.report, report)
    return 0


def cmd_bench(args) -> int:
    net = load_model(args.model)
    part = _split(load_dataset(args.data), args.split, args.limit)
    cfg = _knobs(args, net)
    report = benchmark(net, part.inputs, part.labels, cfg, threads=args.threads)
    if args.no_timestamp:
        report["wall_clock_informational"] = None  # timings would break byte-identical reruns
    report["manifest"] = _manifest(args, {"report": args.report})
    _write_json(args.report, report)
    return 0


def cmd_effort_map(args) -> int:
    net = load_model(args.model)
    ds = load_dataset(args.data)
    part = _split(ds, args.split, None)
    if not 0 <= args.input_index < len(part):
        raise DyveError(f"input index {args.input_index} outside [0, {len(part)})")
    cfg = _knobs(args, net)
    trace = dyve_forward(net, part.inputs[args.input_index], cfg)
    maps = effort_maps(trace, args.layer)
    out = Path(args.out)
    written = []
    if args.all:
        out.mkdir(parents=True, exist_ok=True)
        for m in maps:
            written.append(str(export_effort_map(m, out / f"layer{args.layer}_ch{m.channel}.{args.format}", args.format)))
    else:
        if not 0 <= args.channel < len(maps):
            raise DyveError(f"channel {args.channel} outside [0, {len(maps)})")
        written.append(str(export_effort_map(maps[args.channel], out, args.format)))
    doc = {
        "manifest": _manifest(args, {"maps": written}),
        "layer": args.layer,
        "input_index": args.input_index,
        "mean_effort": {str(m.channel): float(m.grid.mean()) for m in maps},
    }
    _write_json(args.report, doc)
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dyve", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="falls back to $DYVE_SEED, then 0")
        sp.add_argument("--no-timestamp", action="store_true", help="omit the manifest timestamp")
        sp.add_argument("--threads", type=int, default=1, help="parallelism across inputs only")
        return sp

    t = common(sub.add_parser("train-fixture", help="train the fixture CNN on synthetic data"))
    t.add_argument("--out-model", required=True)
    t.add_argument("--out-data", required=True)
    t.add_argument("--report", default="-")
    t.add_argument("--data-seed", type=int, default=0)
    t.add_argument("--per-class-train", type=int, default=200)
    t.add_argument("--per-class-eval", type=int, default=2000)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=0.03)
    t.set_defaults(func=cmd_train_fixture)

    t = common(sub.add_parser("tune", help="search knob thresholds on the tune split"))
    t.add_argument("--model", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--budget", type=float, default=0.5, help="accuracy budget, percentage points")
    t.add_argument("--out", required=True, help="knob config JSON")
    t.add_argument("--report", default="-")
    t.set_defaults(func=cmd_tune)

    for name, fn, helptext in (("infer", cmd_infer, "run the knob engine"),
                               ("bench", cmd_bench, "compare reference and knob engines")):
        t = common(sub.add_parser(name, help=helptext))
        t.add_argument("--model", required=True)
        t.add_argument("--data", required=True)
        t.add_argument("--knobs", default=None)
        t.add_argument("--split", default="heldout", choices=("train", "tune", "heldout", "all"))
        t.add_argument("--limit", type=int, default=None)
        t.add_argument("--report", default="-")
        t.set_defaults(func=fn)

    t = common(sub.add_parser("effort-map", help="export per-neuron effort maps"))
    t.add_argument("--model", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--knobs", default=None)
    t.add_argument("--split", default="heldout", choices=("train", "tune", "heldout", "all"))
    t.add_argument("--input-index", type=int, required=True)
    t.add_argument("--layer", type=int, required=True)
    which = t.add_mutually_exclusive_group(required=True)
    which.add_argument("--channel", type=int)
    which.add_argument("--all", action="store_true")
    t.add_argument("--format", choices=("pgm", "csv"), default="pgm")
    t.add_argument("--out", required=True, help="file, or directory with --all")
    t.add_argument("--report", default="-")
    t.set_defaults(func=cmd_effort_map)
    return p


def _category(exc: BaseException) -> str:
    if isinstance(exc, DyveError):
        return exc.code
    if isinstance(exc, FileNotFoundError):
        return "missing_file"
    if isinstance(exc, (json.JSONDecodeError, UnicodeDecodeError)):
        return "parse_error"
    if isinstance(exc, OSError):
        return "io_error"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DyveError, OSError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {_category(exc)}: {msg}", file=sys.stderr)
        return EXIT_BUDGET if isinstance(exc, BudgetViolation) else EXIT_ERROR
