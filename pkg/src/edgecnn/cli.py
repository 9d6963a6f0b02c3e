"""Command-line pipeline: prepare/synth -> train -> quantize/prune -> eval/bench -> report.

Exit codes: 0 success, 1 validation or numeric error, 2 usage or I/O error.
Set ``EDGECNN_LOG=DEBUG`` (or INFO/WARNING) for log verbosity.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .data import GESTURE_NAMES, STANDARD_SIZES, Nuisance, build_size_variants, scan_class_folders, \
    synthesize, write_class_folders
from .evalbench import EvalResult, BenchResult, ReportRow, bench_latency, evaluate, measure_size, \
    report
from .exceptions import ConfigError, EdgeCNNError
from .fileformat import atomic_write
from .model import Checkpoint, DeployedModel, build, export_deployed, load_any, load_checkpoint, \
    param_count, save_checkpoint, save_deployed
from .quantize import prune_channels
from .train import TrainConfig, fit

log = logging.getLogger("edgecnn")

CONFUSABLE = ("one", "three", "four")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _tree_checksum(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file() and not p.name.startswith("manifest"):
            h.update(str(p.relative_to(root)).encode())
            h.update(_sha256(p).encode())
    return h.hexdigest()


def write_manifest(args, outputs, manifest_path):
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    checksums = {}
    for p in outputs:
        p = Path(p)
        checksums[str(p)] = _tree_checksum(p) if p.is_dir() else _sha256(p)
    manifest = {"tool": "edgecnn", "version": __version__, "subcommand": args.command,
                "seed": config.get("seed"), "config": config, "artifacts": checksums}
    atomic_write(manifest_path, (json.dumps(manifest, indent=2, sort_keys=True, default=str)
                                 + "\n").encode())


def _load_dataset(path, size=None):
    return scan_class_folders(path, size=size)


def cmd_prepare(args):
    written = build_size_variants(args.source, args.out, args.sizes)
    write_manifest(args, list(written.values()), Path(args.out) / "manifest.json")
    print(f"wrote {', '.join(str(p) for p in written.values())}")


def cmd_synth(args):
    nuisance = Nuisance.none() if args.no_nuisance else Nuisance()
    ds = synthesize(args.classes, args.per_class, args.size, args.seed, nuisance)
    write_class_folders(ds, args.out)
    write_manifest(args, [args.out], Path(args.out) / "manifest.json")
    print(f"wrote {len(ds)} images of {args.size}x{args.size} to {args.out}")


def _class_weights(args, class_names):
    if args.class_weights:
        return args.class_weights
    return [args.confusable_weight if n in CONFUSABLE else 1.0 for n in class_names]


def cmd_train(args):
    ds = _load_dataset(args.data, args.input_size)
    cfg = TrainConfig(batch_size=args.batch_size, max_epochs=args.epochs, patience=args.patience,
                      learning_rate=args.lr, class_weights=_class_weights(args, ds.class_names),
                      hflip_prob=args.hflip, split_fraction=args.split, seed=args.seed)
    graph = build(args.input_size, len(ds.class_names), seed=args.seed)
    ckpt, history = fit(graph, ds, cfg)
    ckpt.extra["class_names"] = ds.class_names
    ckpt.extra["train_config"] = cfg.to_dict()
    save_checkpoint(ckpt, args.out)
    metrics = args.metrics or f"{args.out}.metrics.csv"
    history.to_csv(metrics)
    write_manifest(args, [args.out, metrics], f"{args.out}.manifest.json")
    print(f"best epoch {history.best_epoch}/{len(history)} val_loss "
          f"{history.val_loss[history.best_epoch - 1]:.4f} val_acc "
          f"{history.val_acc[history.best_epoch - 1]:.4f} -> {args.out}")


def cmd_quantize(args):
    if args.mode == "i8" and not args.calib:
        raise ConfigError("--mode i8 requires --calib (representative dataset folder)")
    ckpt = load_checkpoint(args.model)
    calib = None
    if args.calib:
        calib = _load_dataset(args.calib, ckpt.config["input_size"])
        if args.calib_limit:
            calib = calib.subset(slice(0, args.calib_limit))
    deployed = export_deployed(ckpt, args.mode, calib)
    save_deployed(deployed, args.out)
    write_manifest(args, [args.out], f"{args.out}.manifest.json")
    print(f"{args.mode} model, {param_count(deployed)} parameters, "
          f"{measure_size(args.out)} bytes -> {args.out}")


def cmd_prune(args):
    ckpt = load_checkpoint(args.model)
    targets = {k: v for k, v in (("conv1", args.conv1), ("conv2", args.conv2)) if v}
    calib = _load_dataset(args.calib, ckpt.config["input_size"]) if args.calib else None
    pruned = prune_channels(ckpt, targets, args.ranking, calib)
    save_checkpoint(pruned, args.out)
    write_manifest(args, [args.out], f"{args.out}.manifest.json")
    print(f"parameters {param_count(ckpt)} -> {param_count(pruned)} -> {args.out}")


def _describe(model):
    if isinstance(model, DeployedModel):
        return True, model.precision
    return False, "checkpoint"


def cmd_eval(args):
    model = load_any(args.model)
    ds = _load_dataset(args.data, model.config["input_size"])
    result = evaluate(model, ds)
    optimized, precision = _describe(model)
    doc = {"model": str(args.model), "image_size": model.config["input_size"],
           "optimized": optimized, "precision": precision,
           "model_size": measure_size(args.model), "eval": result.to_dict(),
           "class_names": ds.class_names}
    if args.bench:
        b = bench_latency(model, iterations=args.iterations, warmup=args.warmup, seed=args.seed,
                          size_path=args.model)
        doc["latencies"] = b.latencies
    out = args.out or f"{args.model}.eval.json"
    atomic_write(out, (json.dumps(doc, indent=2) + "\n").encode())
    write_manifest(args, [out], f"{out}.manifest.json")
    print(f"accuracy {result.accuracy:.5f} loss {result.loss:.6f} on {result.n_examples} "
          f"examples -> {out}")


def cmd_bench(args):
    model = load_any(args.model)
    b = bench_latency(model, iterations=args.iterations, warmup=args.warmup, seed=args.seed,
                      size_path=args.model)
    doc = dict(b.summary(), latencies=b.latencies, model=str(args.model))
    out = args.out or f"{args.model}.bench.json"
    atomic_write(out, (json.dumps(doc, indent=2) + "\n").encode())
    print(json.dumps(b.summary()))


def load_runs(runs_dir):
    rows = []
    for p in sorted(Path(runs_dir).glob("*.eval.json")):
        doc = json.loads(p.read_text(encoding="utf-8"))
        bench = BenchResult(doc["model_size"], doc["latencies"]) if doc.get("latencies") else None
        rows.append(ReportRow(doc["image_size"], doc["optimized"],
                              EvalResult.from_dict(doc["eval"]), bench, doc["model_size"],
                              doc.get("precision", "")))
    return rows


def cmd_report(args):
    rows = load_runs(args.runs)
    if not rows:
        raise ConfigError(f"no *.eval.json files under {args.runs}")
    paths = report(rows, args.out)
    write_manifest(args, [paths["csv"], paths["json"]], Path(args.out) / "manifest.json")
    print(Path(paths["csv"]).read_text(encoding="utf-8"), end="")


def build_parser():
    p = argparse.ArgumentParser(prog="edgecnn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="JSON or YAML file of flag defaults (flags win)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="resize a class-folder tree into folder_<size> variants")
    s.add_argument("--source", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--sizes", type=int, nargs="+", default=list(STANDARD_SIZES))
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("synth", help="render the synthetic gesture dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=96)
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--classes", type=int, default=len(GESTURE_NAMES))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-nuisance", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--input-size", type=int, default=96)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=25)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--patience", type=int, default=3)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--hflip", type=float, default=0.5)
    s.add_argument("--split", type=float, default=0.85)
    s.add_argument("--confusable-weight", type=float, default=1.2,
                   help="loss weight for classes named one/three/four")
    s.add_argument("--class-weights", type=float, nargs="+")
    s.add_argument("--metrics", help="per-epoch CSV (default <out>.metrics.csv)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("quantize", help="export a deployed model at reduced precision")
    s.add_argument("--model", required=True)
    s.add_argument("--mode", choices=("f32", "f16", "i8"), default="i8")
    s.add_argument("--calib")
    s.add_argument("--calib-limit", type=int, help="use only the first N calibration images")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("prune", help="remove low-ranked conv channels")
    s.add_argument("--model", required=True)
    s.add_argument("--conv1", type=float, default=0.0, help="fraction of conv1 channels")
    s.add_argument("--conv2", type=float, default=0.0, help="fraction of conv2 channels")
    s.add_argument("--ranking", choices=("weight-L1", "activation-L1"), default="weight-L1")
    s.add_argument("--calib")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prune)

    for name, func, text in (("eval", cmd_eval, "evaluate a model on a class-folder dataset"),
                             ("bench", cmd_bench, "time single-image inference")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--model", required=True)
        if name == "eval":
            s.add_argument("--data", required=True)
            s.add_argument("--bench", action="store_true", help="also record latency samples")
        s.add_argument("--iterations", type=int, default=30)
        s.add_argument("--warmup", type=int, default=5)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out")
        s.set_defaults(func=func)

    s = sub.add_parser("report", help="collect eval runs into a baseline-vs-optimized comparison report")
    s.add_argument("--runs", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def _read_config(path):
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith((".yaml", ".yml")):
        import yaml
        return yaml.safe_load(text) or {}
    return json.loads(text)


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = _read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(values) - known
        if unknown:
            parser.error(f"config file sets unknown options: {', '.join(sorted(unknown))}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    logging.basicConfig(level=os.environ.get("EDGECNN_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = parse_args(argv)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except EdgeCNNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
