"""The gesture network: assembly, parameter accounting, inference and artifacts."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fileformat
from .exceptions import ConfigError, FormatError, ShapeError
from .initializers import he_init, zeros_bias
from .layers import Conv2D, Dense, Dropout, Flatten, MaxPool2D, softmax
from .tensor import QuantParams, Tensor

STANDARD_INPUT_SIZES = (64, 96, 128, 256)
DEFAULT_DROPOUT = (0.25, 0.25, 0.5)
MIN_INPUT_SIZE = 10

# Points at which activations are observed for calibration / fake-quantized in i8 inference.
ACTIVATION_POINTS = ("input", "conv1", "conv2", "dense1", "dense2")


def _flat_features(input_size, filters2=64):
    s = ((input_size - 2) // 2 - 2) // 2
    return s * s * filters2


def fake_quantize(x, qp: QuantParams):
    q = np.clip(np.rint(x / np.float32(qp.scale)) + qp.zero_point, -128, 127)
    return (np.float32(qp.scale) * (q - np.float32(qp.zero_point))).astype(x.dtype, copy=False)


class ModelGraph:
    """Ordered layer stack: Conv-Pool-Dropout-Conv-Pool-Dropout-Flatten-Dropout-Dense-Dense."""

    def __init__(self, layers, input_size, num_classes, dropout=DEFAULT_DROPOUT):
        self.layers = list(layers)
        self.input_size = int(input_size)
        self.num_classes = int(num_classes)
        self.dropout = tuple(dropout)
        self.shape_chain()  # validates wiring

    @property
    def config(self):
        return {"input_size": self.input_size, "num_classes": self.num_classes,
                "dropout": list(self.dropout)}

    @property
    def dtype(self):
        return self.layers[0].params["kernel"].dtype

    def param_layers(self):
        return [layer for layer in self.layers if layer.params]

    def named_params(self):
        return {f"{layer.name}.{k}": v for layer in self.layers for k, v in layer.params.items()}

    def shape_chain(self):
        """Per-layer output shapes (without the batch axis), input first."""
        shape = (self.input_size, self.input_size, 3)
        chain = [("Input", shape)]
        for layer in self.layers:
            shape = layer.output_shape(shape)
            chain.append((layer.kind, shape))
        return chain

    def summary(self):
        rows = [("Input", (None,) + self.shape_chain()[0][1], 0)]
        for layer, (_, shape) in zip(self.layers, self.shape_chain()[1:]):
            rows.append((layer.kind, (None,) + shape, layer.param_count()))
        return rows

    def forward(self, x, training=False, rng=None, act_qparams=None, observer=None,
                return_caches=False):
        """Return logits, plus the per-layer caches when ``return_caches`` is set.

        ``act_qparams`` fake-quantizes the named activation points and
        ``observer(name, array)`` sees each of them (used for calibration).
        """
        if x.shape[1:] != (self.input_size, self.input_size, 3):
            raise ShapeError(f"expected images of shape ({self.input_size}, {self.input_size}, 3), "
                             f"got {x.shape[1:]}")
        x = x.astype(self.dtype, copy=False)
        x = self._tap("input", x, act_qparams, observer)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, training=training, rng=rng)
            if layer.params:
                x = self._tap(layer.name, x, act_qparams, observer)
            caches.append(cache)
        return (x, caches) if return_caches else x

    @staticmethod
    def _tap(name, x, act_qparams, observer):
        if act_qparams and name in act_qparams:
            x = fake_quantize(x, act_qparams[name])
        if observer is not None:
            observer(name, x)
        return x

    def backward(self, caches, dlogits):
        grads = {}
        dy = dlogits
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            g = layer.backward(cache, dy)
            for k, v in g.params.items():
                grads[f"{layer.name}.{k}"] = v
            dy = g.input
        return grads, dy

    def predict_proba(self, x, batch_size=16, act_qparams=None):
        out = [softmax(self.forward(x[i:i + batch_size], act_qparams=act_qparams))
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))


def build(input_size=96, num_classes=5, seed=0, dtype=np.float32, dropout=DEFAULT_DROPOUT):
    """Instantiate the network with He-initialized weights and zero biases."""
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if input_size < MIN_INPUT_SIZE:
        raise ConfigError(f"input size {input_size} cannot survive two conv+pool stages "
                          f"(minimum {MIN_INPUT_SIZE})")
    if len(dropout) != 3:
        raise ConfigError("dropout needs three rates (after pool1, after pool2, after flatten)")
    rng = np.random.default_rng(seed)
    flat = _flat_features(input_size)
    layers = [
        Conv2D(he_init((3, 3, 3, 32), 27, rng, dtype), zeros_bias(32, dtype), name="conv1"),
        MaxPool2D(name="pool1"),
        Dropout(dropout[0], name="dropout1"),
        Conv2D(he_init((3, 3, 32, 64), 288, rng, dtype), zeros_bias(64, dtype), name="conv2"),
        MaxPool2D(name="pool2"),
        Dropout(dropout[1], name="dropout2"),
        Flatten(),
        Dropout(dropout[2], name="dropout3"),
        Dense(he_init((flat, 128), flat, rng, dtype), zeros_bias(128, dtype), "relu", name="dense1"),
        Dense(he_init((128, num_classes), 128, rng, dtype), zeros_bias(num_classes, dtype),
              name="dense2"),
    ]
    return ModelGraph(layers, input_size, num_classes, dropout)


def graph_from_params(config, params):
    """Rebuild a graph around existing parameter arrays (keys as in ``named_params``)."""
    p = params
    dropout = tuple(config.get("dropout", DEFAULT_DROPOUT))
    layers = [
        Conv2D(p["conv1.kernel"], p["conv1.bias"], name="conv1"),
        MaxPool2D(name="pool1"),
        Dropout(dropout[0], name="dropout1"),
        Conv2D(p["conv2.kernel"], p["conv2.bias"], name="conv2"),
        MaxPool2D(name="pool2"),
        Dropout(dropout[1], name="dropout2"),
        Flatten(),
        Dropout(dropout[2], name="dropout3"),
        Dense(p["dense1.weight"], p["dense1.bias"], "relu", name="dense1"),
        Dense(p["dense2.weight"], p["dense2.bias"], name="dense2"),
    ]
    return ModelGraph(layers, config["input_size"], config["num_classes"], dropout)


def param_count(graph) -> int:
    if isinstance(graph, (Checkpoint, DeployedModel)):
        return sum(int(t.size) for t in graph.parameter_arrays().values())
    return sum(layer.param_count() for layer in graph.layers)


@dataclass
class Checkpoint:
    """Training artifact: f32 weights plus the two Adam moment tensors per weight."""

    config: dict
    weights: dict
    m: dict
    v: dict
    step: int = 0
    epoch: int = 0
    best_val_loss: Optional[float] = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_graph(cls, graph, m=None, v=None, **kw):
        weights = {k: np.array(a, dtype=np.float32, copy=True) for k, a in graph.named_params().items()}
        m = m if m is not None else {k: np.zeros_like(a) for k, a in weights.items()}
        v = v if v is not None else {k: np.zeros_like(a) for k, a in weights.items()}
        return cls(graph.config, weights, m, v, **kw)

    def parameter_arrays(self):
        return self.weights

    def to_graph(self):
        return graph_from_params(self.config, self.weights)

    def meta(self):
        meta = {"config": self.config, "step": self.step, "epoch": self.epoch,
                "best_val_loss": self.best_val_loss}
        if self.extra:
            meta["extra"] = self.extra
        return meta

    def records(self):
        recs = {}
        for prefix, group in (("", self.weights), ("adam.m.", self.m), ("adam.v.", self.v)):
            for k, a in group.items():
                recs[prefix + k] = Tensor(np.asarray(a, dtype=np.float32))
        return recs

    def to_bytes(self) -> bytes:
        return fileformat.encode(fileformat.KIND_CHECKPOINT, self.meta(), self.records())

    @classmethod
    def from_bytes(cls, buf):
        kind, meta, recs = fileformat.decode(buf)
        if kind != fileformat.KIND_CHECKPOINT:
            raise FormatError("file holds a deployed model, not a checkpoint")
        groups = {"": {}, "adam.m.": {}, "adam.v.": {}}
        for name, t in recs.items():
            prefix = next((p for p in ("adam.m.", "adam.v.") if name.startswith(p)), "")
            groups[prefix][name[len(prefix):]] = t.data
        w, m, v = groups[""], groups["adam.m."], groups["adam.v."]
        if set(m) != set(w) or set(v) != set(w):
            raise FormatError("checkpoint moment records do not match weight records")
        return cls(meta["config"], w, {k: m[k] for k in w}, {k: v[k] for k in w},
                   meta.get("step", 0), meta.get("epoch", 0), meta.get("best_val_loss"),
                   meta.get("extra", {}))


def save_checkpoint(ckpt: Checkpoint, path):
    fileformat.atomic_write(path, ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read())


@dataclass
class DeployedModel:
    """Inference artifact: weights at one precision, no optimizer state."""

    config: dict
    precision: str
    tensors: dict
    act_qparams: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.precision not in ("f32", "f16", "i8"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        self._graph = None

    def parameter_arrays(self):
        return {k: t.data for k, t in self.tensors.items()}

    def graph(self) -> ModelGraph:
        if self._graph is None:
            params = {k: t.widen().astype(np.float32, copy=False) for k, t in self.tensors.items()}
            self._graph = graph_from_params(self.config, params)
        return self._graph

    @property
    def input_size(self):
        return self.config["input_size"]

    @property
    def num_classes(self):
        return self.config["num_classes"]

    def predict_proba(self, x, batch_size=16):
        return self.graph().predict_proba(x, batch_size, act_qparams=self.act_qparams or None)

    def meta(self):
        meta = {"config": self.config, "precision": self.precision,
                "act_qparams": {k: [q.scale, q.zero_point] for k, q in self.act_qparams.items()}}
        if self.extra:
            meta["extra"] = self.extra
        return meta

    def to_bytes(self) -> bytes:
        return fileformat.encode(fileformat.KIND_DEPLOYED, self.meta(), self.tensors)

    @classmethod
    def from_bytes(cls, buf):
        kind, meta, recs = fileformat.decode(buf)
        if kind != fileformat.KIND_DEPLOYED:
            raise FormatError("file holds a training checkpoint, not a deployed model")
        aq = {k: QuantParams(float(s), int(z)) for k, (s, z) in meta.get("act_qparams", {}).items()}
        return cls(meta["config"], meta["precision"], recs, aq, meta.get("extra", {}))


def save_deployed(model: DeployedModel, path):
    fileformat.atomic_write(path, model.to_bytes())


def load_deployed(path) -> DeployedModel:
    with open(path, "rb") as fh:
        return DeployedModel.from_bytes(fh.read())


def load_any(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) >= 7 and buf[:4] == fileformat.MAGIC and buf[6] == fileformat.KIND_DEPLOYED:
        return DeployedModel.from_bytes(buf)
    return Checkpoint.from_bytes(buf)


def export_deployed(ckpt: Checkpoint, precision="f32", calib=None) -> DeployedModel:
    """Strip optimizer state and store weights at ``precision``."""
    if precision == "f32":
        tensors = {k: Tensor(np.asarray(a, dtype=np.float32).copy()) for k, a in ckpt.weights.items()}
        return DeployedModel(dict(ckpt.config), "f32", tensors, extra=dict(ckpt.extra))
    from .quantize import quantize_model
    return quantize_model(ckpt, precision, calib)


def as_graph(model):
    if isinstance(model, ModelGraph):
        return model, None
    if isinstance(model, DeployedModel):
        return model.graph(), (model.act_qparams or None)
    if isinstance(model, Checkpoint):
        return model.to_graph(), None
    raise TypeError(f"cannot run inference on {type(model).__name__}")


def infer(model, image) -> np.ndarray:
    """Class probabilities for a single normalized (H, W, 3) image."""
    graph, aq = as_graph(model)
    image = np.asarray(image)
    if image.ndim != 3 or image.shape != (graph.input_size, graph.input_size, 3):
        raise ShapeError(f"expected a ({graph.input_size}, {graph.input_size}, 3) image, "
                         f"got {image.shape}")
    return graph.predict_proba(image[None], act_qparams=aq)[0]
