import csv
import math

import numpy as np
import pytest

from edgecnn.data import LabeledDataset
from edgecnn.evalbench import (BenchResult, EvalResult, ReportRow, bench_latency, csv_from_json,
                               evaluate, measure_size, report)
from edgecnn.exceptions import ConfigError
from edgecnn.model import build


def _coded_dataset(per_class=4, classes=5):
    labels = np.repeat(np.arange(classes), per_class)
    images = np.zeros((len(labels), 8, 8, 3), np.uint8)
    images[:, 0, 0, 0] = labels * 10
    return LabeledDataset(images, labels, [f"c{i}" for i in range(classes)])


class Oracle:
    """Reads the class code planted in pixel (0, 0, 0)."""

    def predict_proba(self, x):
        y = np.rint(x[:, 0, 0, 0] * 255 / 10).astype(int)
        return np.eye(5)[y]


class Uniform:
    def predict_proba(self, x):
        return np.full((len(x), 5), 0.2)


def test_evaluate_perfect_model():
    r = evaluate(Oracle(), _coded_dataset())
    assert r.accuracy == 1.0 and r.loss == 0.0 and r.n_examples == 20
    assert np.array_equal(r.confusion, 4 * np.eye(5, dtype=int))


def test_evaluate_uniform_model():
    r = evaluate(Uniform(), _coded_dataset())
    assert r.accuracy == pytest.approx(0.2)
    assert r.loss == pytest.approx(math.log(5))


def test_confusion_consistency_random_model(tiny_dataset):
    g = build(16, 5, seed=9)
    r = evaluate(g, tiny_dataset)
    assert np.trace(r.confusion) / r.n_examples == pytest.approx(r.accuracy)
    assert r.confusion.sum(axis=1).tolist() == tiny_dataset.class_counts().tolist()
    assert evaluate(g, tiny_dataset).to_dict() == r.to_dict()


def test_evaluate_empty():
    with pytest.raises(ConfigError):
        evaluate(Uniform(), _coded_dataset().subset(slice(0, 0)))


def test_misclassifications_listing():
    r = EvalResult(0.5, 1.0, 4, np.array([[1, 1], [0, 2]]))
    assert r.misclassifications(["a", "b"]) == [("a", "b", 1)]


def test_measure_size(tmp_path):
    p = tmp_path / "f.bin"
    p.write_bytes(b"x" * 1234)
    assert measure_size(p) == 1234
    with pytest.raises(FileNotFoundError):
        measure_size(tmp_path / "missing")


def test_bench_order_statistics_and_size(tmp_path):
    g = build(16, 5)
    p = tmp_path / "f.bin"
    p.write_bytes(b"y" * 99)
    a = bench_latency(g, iterations=30, warmup=5, size_path=p)
    b = bench_latency(g, iterations=30, warmup=5, size_path=p)
    assert len(a.latencies) == 30 and a.p50 <= a.p95
    assert a.model_size == b.model_size == 99
    with pytest.raises(ConfigError):
        bench_latency(g, iterations=10)


def test_bench_latency_grows_with_input_size():
    small = bench_latency(build(64, 5), iterations=30, warmup=5)
    large = bench_latency(build(256, 5), iterations=30, warmup=5)
    assert small.mean * 1.5 < large.mean


def _rows(latency=True):
    rows = []
    for size in (128, 64, 96, 256):
        for opt in (False, True):
            r = EvalResult(0.9, 0.3, 100, np.eye(5, dtype=int))
            bench = BenchResult(1000, [0.01, 0.02] * 15) if latency else None
            rows.append(ReportRow(size, opt, r, bench, model_size=size * (1 if opt else 3)))
    return rows


def test_report_table_shape(tmp_path):
    paths = report(_rows(), tmp_path)
    rows = list(csv.DictReader(open(paths["csv"], encoding="utf-8")))
    assert len(rows) == 8
    assert list(rows[0])[:5] == ["image_size", "optimized", "loss", "accuracy", "model_size"]
    assert rows[0]["image_size"] == "64 x 64" and rows[0]["optimized"] == "No"
    assert rows[0]["latency_p50_ms"] != ""
    tsv = (tmp_path / "model_size_optimized.tsv").read_text().splitlines()
    assert tsv[0] == "image_size\tmodel_size" and tsv[1] == "64\t64" and len(tsv) == 5


def test_report_empty_latency_cells(tmp_path):
    paths = report(_rows(latency=False), tmp_path)
    rows = list(csv.DictReader(open(paths["csv"], encoding="utf-8")))
    assert "latency_mean_ms" in rows[0] and rows[0]["latency_mean_ms"] == ""


def test_report_json_matches_csv(tmp_path):
    paths = report(_rows(), tmp_path)
    with open(paths["csv"], encoding="utf-8", newline="") as fh:
        assert csv_from_json(paths["json"]) == fh.read()


def test_report_needs_rows(tmp_path):
    with pytest.raises(ConfigError):
        report([], tmp_path)
