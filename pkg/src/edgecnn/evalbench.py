"""Accuracy, loss, model size and latency measurement plus baseline-vs-optimized comparison reports."""
from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import ConfigError
from .model import Checkpoint, DeployedModel, ModelGraph, as_graph
from .train import normalize, per_example_ce

TABLE_COLUMNS = ["image_size", "optimized", "loss", "accuracy", "model_size"]
LATENCY_COLUMNS = ["latency_mean_ms", "latency_p50_ms", "latency_p95_ms"]


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    n_examples: int
    confusion: np.ndarray

    def to_dict(self):
        return {"accuracy": self.accuracy, "loss": self.loss, "n_examples": self.n_examples,
                "confusion": self.confusion.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["accuracy"], d["loss"], d["n_examples"], np.asarray(d["confusion"]))

    def misclassifications(self, class_names=None):
        """Off-diagonal confusion counts as ``(true, predicted, count)``, largest first."""
        names = class_names or list(range(len(self.confusion)))
        out = [(names[i], names[j], int(self.confusion[i, j]))
               for i in range(len(self.confusion)) for j in range(len(self.confusion))
               if i != j and self.confusion[i, j]]
        return sorted(out, key=lambda r: -r[2])


@dataclass
class BenchResult:
    model_size: Optional[int]
    latencies: list = field(default_factory=list)  # seconds

    @property
    def mean(self):
        return float(np.mean(self.latencies))

    @property
    def p50(self):
        return float(np.percentile(self.latencies, 50))

    @property
    def p95(self):
        return float(np.percentile(self.latencies, 95))

    def summary(self):
        return {"model_size": self.model_size, "samples": len(self.latencies),
                "mean_ms": 1e3 * self.mean, "p50_ms": 1e3 * self.p50, "p95_ms": 1e3 * self.p95}


def _predict_proba(model, x):
    if not isinstance(model, (ModelGraph, Checkpoint, DeployedModel)):
        return np.asarray(model.predict_proba(x))
    graph, aq = as_graph(model)
    return graph.predict_proba(x, act_qparams=aq)


def evaluate(model, dataset, batch_size=32) -> EvalResult:
    """Accuracy, unweighted mean cross-entropy and confusion matrix on ``dataset``.

    ``model`` may be a graph, checkpoint, deployed model or any object with
    ``predict_proba`` on normalized NHWC batches.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    n_classes = len(dataset.class_names)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    losses = []
    for i in range(0, len(dataset), batch_size):
        x = normalize(dataset.images[i:i + batch_size])
        y = dataset.labels[i:i + batch_size]
        probs = _predict_proba(model, x).astype(np.float64)
        if probs.shape != (len(y), n_classes):
            raise ConfigError(f"model emits {probs.shape[1]} classes, dataset has {n_classes}")
        losses.append(per_example_ce(probs, y))
        np.add.at(confusion, (y, probs.argmax(axis=1)), 1)
    n = len(dataset)
    return EvalResult(float(np.trace(confusion)) / n, float(np.concatenate(losses).mean()),
                      n, confusion)


def measure_size(path) -> int:
    return os.stat(path).st_size


def bench_latency(model, input_size=None, iterations=30, warmup=5, seed=0, size_path=None):
    """Wall-clock time of single-image inference on a fixed random input."""
    if iterations < 30 or warmup < 5:
        raise ConfigError("need at least 30 timed iterations after at least 5 warm-up calls")
    graph, aq = as_graph(model)
    input_size = input_size or graph.input_size
    x = np.random.default_rng(seed).random((1, input_size, input_size, 3), dtype=np.float32)
    for _ in range(warmup):
        graph.forward(x, act_qparams=aq)
    samples = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        graph.forward(x, act_qparams=aq)
        samples.append(time.perf_counter() - t0)
    size = measure_size(size_path) if size_path is not None else None
    return BenchResult(size, samples)


@dataclass
class ReportRow:
    image_size: int
    optimized: bool
    eval: EvalResult
    bench: Optional[BenchResult] = None
    model_size: Optional[int] = None
    precision: str = ""

    def cells(self):
        size = self.model_size if self.model_size is not None else \
            (self.bench.model_size if self.bench else None)
        row = {"image_size": f"{self.image_size} x {self.image_size}",
               "optimized": "Yes" if self.optimized else "No",
               "loss": f"{self.eval.loss:.6f}", "accuracy": f"{self.eval.accuracy:.5f}",
               "model_size": "" if size is None else str(size)}
        lat = self.bench.latencies if self.bench else []
        if lat:
            row.update({"latency_mean_ms": f"{1e3 * self.bench.mean:.3f}",
                        "latency_p50_ms": f"{1e3 * self.bench.p50:.3f}",
                        "latency_p95_ms": f"{1e3 * self.bench.p95:.3f}"})
        else:
            row.update({c: "" for c in LATENCY_COLUMNS})
        row["precision"] = self.precision
        return row


def _sorted_rows(rows):
    return sorted(rows, key=lambda r: (r.image_size, r.optimized))


def report(rows, out_dir):
    """Write table2.csv, table2.json and per-metric plot-data TSVs; returns written paths."""
    if not rows:
        raise ConfigError("report needs at least one row")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = TABLE_COLUMNS + LATENCY_COLUMNS + ["precision"]
    cells = [r.cells() for r in _sorted_rows(rows)]
    paths = {"csv": out_dir / "table2.csv", "json": out_dir / "table2.json"}
    with open(paths["csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(cells)
    paths["json"].write_text(json.dumps({"columns": columns, "rows": cells}, indent=2),
                             encoding="utf-8")
    for metric in ("accuracy", "loss", "model_size"):
        for optimized in (False, True):
            series = [r for r in _sorted_rows(rows) if r.optimized == optimized]
            if not series:
                continue
            tag = "optimized" if optimized else "baseline"
            p = out_dir / f"{metric}_{tag}.tsv"
            with open(p, "w", encoding="utf-8") as fh:
                fh.write(f"image_size\t{metric}\n")
                for r, c in zip(series, [x.cells() for x in series]):
                    fh.write(f"{r.image_size}\t{c[metric]}\n")
            paths[f"{metric}_{tag}"] = p
    return paths


def csv_from_json(json_path) -> str:
    """Re-render a JSON report as CSV text (used to check the two formats agree)."""
    import io
    doc = json.loads(Path(json_path).read_text(encoding="utf-8"))
    buf = io.StringIO(newline="")
    w = csv.DictWriter(buf, fieldnames=doc["columns"])
    w.writeheader()
    w.writerows(doc["rows"])
    return buf.getvalue()
