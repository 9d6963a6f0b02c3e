"""Post-training optimization: f16 / int8-affine precision reduction and channel pruning.

int8 models are evaluated by dequantizing each weight tensor to f32 and
fake-quantizing activations at the calibrated points, so there is a single
arithmetic path to validate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, FormatError, NumericError
from .model import Checkpoint, DeployedModel, as_graph
from .tensor import QuantParams, Tensor

QMIN, QMAX = -128, 127


@dataclass
class CalibrationStats:
    min: float
    max: float
    count: int = 1

    def __post_init__(self):
        if self.min > self.max:
            raise ValueError(f"min {self.min} exceeds max {self.max}")
        if self.count < 1:
            raise ValueError("sample count must be >= 1")

    def merge(self, other):
        return CalibrationStats(min(self.min, other.min), max(self.max, other.max),
                                self.count + other.count)


@dataclass
class PruneSpec:
    channels: dict = field(default_factory=dict)  # conv layer name -> removed output channels
    ranking: str = "weight-L1"

    def validate(self, filters: dict):
        for name, idx in self.channels.items():
            if name not in filters:
                raise ConfigError(f"unknown conv layer {name!r}")
            if len(set(idx)) != len(idx) or any(not 0 <= i < filters[name] for i in idx):
                raise ConfigError(f"{name}: channel indices must be distinct and in range")
            if len(idx) >= filters[name]:
                raise ConfigError(f"{name}: pruning would remove all {filters[name]} channels")


def _as_inputs(calib):
    images = getattr(calib, "images", calib)
    images = np.asarray(images)
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / np.float32(255.0)
    return images


def calibrate(model, calib, batch_size=16):
    """Min/max of every weight tensor and of each activation point over ``calib``.

    Activation entries are keyed ``act.<point>``.
    """
    x = _as_inputs(calib)
    if len(x) == 0:
        raise ConfigError("representative set is empty")
    graph, _ = as_graph(model)
    if x.shape[1:] != (graph.input_size, graph.input_size, 3):
        raise ConfigError(f"representative images are {x.shape[1:3]}, model expects "
                          f"{graph.input_size}")
    stats = {k: CalibrationStats(float(a.min()), float(a.max()), 1)
             for k, a in graph.named_params().items()}

    def observe(name, a):
        s = CalibrationStats(float(a.min()), float(a.max()), len(a))
        key = f"act.{name}"
        stats[key] = stats[key].merge(s) if key in stats else s

    for i in range(0, len(x), batch_size):
        graph.forward(x[i:i + batch_size], observer=observe)
    return stats


def make_qparams(lo, hi) -> QuantParams:
    """Asymmetric int8 mapping of [lo, hi], widened so real zero is exact."""
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise NumericError(f"non-finite calibration range [{lo}, {hi}]")
    if lo > hi:
        raise ValueError(f"min {lo} exceeds max {hi}")
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    exact = (hi - lo) / (QMAX - QMIN)
    if exact < np.finfo(np.float32).tiny:
        return QuantParams(1.0, 0)
    scale = float(np.float32(exact))  # stored as f32
    zp = int(np.rint(-lo / exact)) + QMIN
    return QuantParams(scale, int(np.clip(zp, QMIN, QMAX)))


def quantize_tensor(t, qp: QuantParams) -> Tensor:
    data = t.widen() if isinstance(t, Tensor) else np.asarray(t)
    q = np.rint(data.astype(np.float64) / qp.scale) + qp.zero_point
    return Tensor(np.clip(q, QMIN, QMAX).astype(np.int8), qp)


def dequantize_tensor(t: Tensor) -> np.ndarray:
    if t.quant is None:
        raise FormatError("tensor carries no quantization parameters")
    return t.widen()


def quantize_model(ckpt: Checkpoint, mode="i8", calib=None) -> DeployedModel:
    """Convert trained weights to f16 or int8; int8 needs a representative set."""
    if mode == "f16":
        tensors = {k: Tensor(np.asarray(a, dtype=np.float16)) for k, a in ckpt.weights.items()}
        return DeployedModel(dict(ckpt.config), "f16", tensors, extra=dict(ckpt.extra))
    if mode != "i8":
        raise ConfigError(f"unknown quantization mode {mode!r}")
    if calib is None:
        raise ConfigError("int8 quantization requires a representative calibration set (--calib)")
    stats = calibrate(ckpt, calib)
    tensors = {}
    for k, a in ckpt.weights.items():
        if k.endswith(".bias"):
            tensors[k] = Tensor(np.asarray(a, dtype=np.float32).copy())
        else:
            s = stats[k]
            tensors[k] = quantize_tensor(np.asarray(a, dtype=np.float32), make_qparams(s.min, s.max))
    act = {k[4:]: make_qparams(s.min, s.max) for k, s in stats.items() if k.startswith("act.")}
    return DeployedModel(dict(ckpt.config), "i8", tensors, act, extra=dict(ckpt.extra))


CONV_LAYERS = ("conv1", "conv2")


def channel_scores(ckpt: Checkpoint, layer, ranking="weight-L1", calib=None):
    """Importance of each output channel of ``layer`` (lower = pruned first)."""
    if ranking == "weight-L1":
        k = ckpt.weights[f"{layer}.kernel"]
        return np.abs(k).sum(axis=(0, 1, 2))
    if ranking == "activation-L1":
        if calib is None:
            raise ConfigError("activation-L1 ranking requires a calibration set")
        x = _as_inputs(calib)
        graph = ckpt.to_graph()
        acc = {"sum": 0.0, "n": 0}

        def observe(name, a):
            if name == layer:
                acc["sum"] = acc["sum"] + np.abs(a.astype(np.float64)).sum(axis=(0, 1, 2))
                acc["n"] += a.shape[0] * a.shape[1] * a.shape[2]

        for i in range(0, len(x), 16):
            graph.forward(x[i:i + 16], observer=observe)
        return acc["sum"] / max(acc["n"], 1)
    raise ConfigError(f"unknown ranking {ranking!r}")


def plan_pruning(ckpt, targets, ranking="weight-L1", calib=None) -> PruneSpec:
    filters = {name: ckpt.weights[f"{name}.kernel"].shape[3] for name in CONV_LAYERS}
    spec = PruneSpec({}, ranking)
    for name, fraction in targets.items():
        if name not in filters:
            raise ConfigError(f"unknown conv layer {name!r}")
        if not 0 <= fraction < 1:
            raise ConfigError(f"{name}: prune fraction must lie in [0, 1), got {fraction}")
        n = int(np.floor(fraction * filters[name] + 0.5))
        if n >= filters[name]:
            raise ConfigError(f"{name}: fraction {fraction} would remove every channel")
        if n:
            order = np.argsort(channel_scores(ckpt, name, ranking, calib), kind="stable")
            spec.channels[name] = sorted(int(i) for i in order[:n])
    spec.validate(filters)
    return spec


def apply_pruning(ckpt: Checkpoint, spec: PruneSpec) -> Checkpoint:
    """Remove the listed output channels and rewire their consumers."""
    filters = {name: ckpt.weights[f"{name}.kernel"].shape[3] for name in CONV_LAYERS}
    spec.validate(filters)

    def prune_group(g):
        g = {k: a.copy() for k, a in g.items()}
        for name, removed in spec.channels.items():
            keep = np.setdiff1d(np.arange(filters[name]), removed)
            g[f"{name}.kernel"] = g[f"{name}.kernel"][..., keep]
            g[f"{name}.bias"] = g[f"{name}.bias"][keep]
            if name == "conv1":
                g["conv2.kernel"] = g["conv2.kernel"][:, :, keep, :]
            else:
                w = g["dense1.weight"]
                c = filters["conv2"]
                side = int(round(np.sqrt(w.shape[0] // c)))
                g["dense1.weight"] = np.ascontiguousarray(
                    w.reshape(side, side, c, w.shape[1])[:, :, keep, :].reshape(-1, w.shape[1]))
        return g

    extra = dict(ckpt.extra)
    extra["pruned"] = {"ranking": spec.ranking, "channels": spec.channels}
    return Checkpoint(dict(ckpt.config), prune_group(ckpt.weights), prune_group(ckpt.m),
                      prune_group(ckpt.v), ckpt.step, ckpt.epoch, ckpt.best_val_loss, extra)


def prune_channels(ckpt: Checkpoint, targets, ranking="weight-L1", calib=None) -> Checkpoint:
    """Structured pruning: ``targets`` maps conv layer name to the fraction of channels removed."""
    return apply_pruning(ckpt, plan_pruning(ckpt, targets, ranking, calib))


def predicted_param_drop(ckpt, spec: PruneSpec) -> int:
    """Closed-form parameter reduction of applying ``spec``."""
    w = ckpt.weights
    c1, c2 = w["conv1.kernel"].shape[3], w["conv2.kernel"].shape[3]
    cin = w["conv1.kernel"].shape[2]
    r1 = len(spec.channels.get("conv1", ()))
    r2 = len(spec.channels.get("conv2", ()))
    spatial = w["dense1.weight"].shape[0] // c2
    units = w["dense1.weight"].shape[1]
    drop = r1 * (9 * cin + 1)                      # conv1 kernels + biases
    drop += 9 * (c1 * c2 - (c1 - r1) * (c2 - r2)) + r2  # conv2 kernels + biases
    drop += spatial * r2 * units                   # dense1 rows
    return drop
