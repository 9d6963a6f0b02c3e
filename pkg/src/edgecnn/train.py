"""Training loop: weighted cross-entropy, Adam, stratified split, flips, early stopping."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ConfigError, InputError, NumericError
from .initializers import he_init  # noqa: F401  (re-exported)
from .layers import softmax
from .model import Checkpoint

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 25
    patience: int = 3
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    class_weights: Optional[list] = None
    hflip_prob: float = 0.5
    split_fraction: float = 0.85
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.split_fraction < 1:
            raise ConfigError(f"split_fraction must lie in (0, 1), got {self.split_fraction}")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.hflip_prob <= 1:
            raise ConfigError("hflip_prob must lie in [0, 1]")
        if self.class_weights is not None:
            self.class_weights = [float(w) for w in self.class_weights]
            if any(not w > 0 for w in self.class_weights):
                raise ConfigError("class weights must all be positive")

    def weights_for(self, num_classes):
        if self.class_weights is None:
            return np.ones(num_classes)
        if len(self.class_weights) != num_classes:
            raise ConfigError(f"{len(self.class_weights)} class weights for {num_classes} classes")
        return np.asarray(self.class_weights, dtype=np.float64)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = 0  # 1-based
    stopped_early: bool = False

    def __len__(self):
        return len(self.val_loss)

    def rows(self):
        return [(i + 1, self.train_loss[i], self.train_acc[i], self.val_loss[i], self.val_acc[i])
                for i in range(len(self))]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def cross_entropy(probs, target, weight=1.0):
    """Weighted categorical cross-entropy of one prediction against a one-hot target."""
    probs = np.asarray(probs, dtype=np.float64)
    target = np.asarray(target)
    if target.shape != probs.shape or np.count_nonzero(target == 1) != 1 or \
            np.count_nonzero(target) != 1:
        raise InputError(f"target must be one-hot with the shape of probs, got {target}")
    p_true = probs[int(np.argmax(target))]
    return float(weight * -np.log(max(p_true, LOG_CLAMP)))


def per_example_ce(probs, labels):
    p = probs[np.arange(len(labels)), labels]
    return -np.log(np.maximum(p, LOG_CLAMP))


def class_weighted_batch_loss(probs, labels, class_weights):
    """Mean over the batch of CE scaled by the weight of each example's true class.

    ``labels`` may be integer class indices or one-hot rows.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape != probs.shape:
            raise InputError(f"targets {labels.shape} do not match probabilities {probs.shape}")
        labels = labels.argmax(axis=1)
    if probs.ndim != 2 or len(labels) != len(probs):
        raise InputError(f"batch of {len(labels)} labels for probabilities {probs.shape}")
    w = np.asarray(class_weights, dtype=np.float64)
    if len(w) != probs.shape[1]:
        raise InputError(f"{len(w)} class weights for {probs.shape[1]} classes")
    return float(np.mean(w[labels] * per_example_ce(probs, labels)))


def loss_and_grads(graph, x, labels, class_weights, training=False, rng=None):
    """Forward + backward through softmax and weighted CE.

    Returns ``(loss, probs, param_grads, input_grad)``.
    """
    logits, caches = graph.forward(x, training=training, rng=rng, return_caches=True)
    probs = softmax(logits.astype(np.float64))
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    loss = float(np.mean(w * per_example_ce(probs, labels)))
    d = probs.copy()
    d[np.arange(len(labels)), labels] -= 1.0
    d *= (w / len(labels))[:, None]
    grads, dx = graph.backward(caches, d.astype(logits.dtype))
    return loss, probs, grads, dx


def adam_step(param, grad, m, v, t, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, applied in place; returns ``(param, m, v)``."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient encountered; aborting training")
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * np.square(grad)
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)
    return param, m, v


def split_dataset(dataset, fraction=0.85, seed=0):
    """Stratified, seeded split into (train, validation)."""
    if len(dataset) == 0:
        raise ConfigError("cannot split an empty dataset")
    if not 0 < fraction < 1:
        raise ConfigError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in range(len(dataset.class_names)):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < 2:
            raise ConfigError(f"class '{dataset.class_names[c]}' has {len(idx)} example(s); "
                              "need at least 2 to split")
        idx = rng.permutation(idx)
        n_train = int(np.floor(fraction * len(idx) + 0.5 + 1e-9))
        n_train = min(max(n_train, 1), len(idx) - 1)
        train_idx.append(idx[:n_train])
        val_idx.append(idx[n_train:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    val_idx = rng.permutation(np.concatenate(val_idx))
    return dataset.subset(train_idx), dataset.subset(val_idx)


def augment_batch(images, hflip_prob, rng):
    """Mirror each NHWC image left-right with probability ``hflip_prob``."""
    flips = rng.random(len(images)) < hflip_prob
    if not flips.any():
        return images
    out = images.copy()
    out[flips] = out[flips][:, :, ::-1, :]
    return out


def normalize(image):
    """Map 0-255 pixel values to float32 in [0, 1]."""
    a = np.asarray(image)
    if a.size and (a.min() < 0 or a.max() > 255):
        raise InputError(f"pixel values must lie in [0, 255], got [{a.min()}, {a.max()}]")
    return a.astype(np.float32) / np.float32(255.0)


class EarlyStopping:
    """Stop once validation loss has risen for ``patience`` consecutive epochs."""

    def __init__(self, patience=3):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.rises = 0
        self.epoch = 0
        self._last = None

    def update(self, val_loss) -> bool:
        self.epoch += 1
        if val_loss < self.best_loss:
            self.best_loss, self.best_epoch = val_loss, self.epoch
        if self._last is not None and val_loss > self._last:
            self.rises += 1
        else:
            self.rises = 0
        self._last = val_loss
        return self.rises >= self.patience

    @property
    def improved(self):
        return self.best_epoch == self.epoch


def simulate_early_stopping(val_losses, patience=3, max_epochs=25):
    """Return ``(epochs_run, best_epoch)`` for a sequence of validation losses."""
    rule = EarlyStopping(patience)
    for loss in val_losses[:max_epochs]:
        if rule.update(loss):
            break
    return rule.epoch, rule.best_epoch


def evaluate_loss_acc(graph, dataset, batch_size=32):
    losses, correct = [], 0
    for i in range(0, len(dataset), batch_size):
        x = normalize(dataset.images[i:i + batch_size])
        y = dataset.labels[i:i + batch_size]
        probs = softmax(graph.forward(x).astype(np.float64))
        losses.append(per_example_ce(probs, y))
        correct += int((probs.argmax(axis=1) == y).sum())
    return float(np.concatenate(losses).mean()), correct / len(dataset)


def fit(graph, dataset, config: TrainConfig = None, val=None, on_epoch=None):
    """Train ``graph`` in place; returns the best-epoch Checkpoint and the history.

    ``dataset`` is split per ``config.split_fraction`` unless ``val`` is given.
    """
    config = config or TrainConfig()
    if val is None:
        train_set, val_set = split_dataset(dataset, config.split_fraction, config.seed)
    else:
        train_set, val_set = dataset, val
    if train_set.images.shape[1:3] != (graph.input_size, graph.input_size):
        raise ConfigError(f"dataset images are {train_set.images.shape[1:3]}, "
                          f"model expects {graph.input_size}")
    weights = config.weights_for(graph.num_classes)
    rng = np.random.default_rng(config.seed)
    params = graph.named_params()
    m = {k: np.zeros_like(p) for k, p in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    history = TrainHistory()
    stopper = EarlyStopping(config.patience)
    best = None
    t = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_set))
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            x = normalize(augment_batch(train_set.images[idx], config.hflip_prob, rng))
            y = train_set.labels[idx]
            loss, probs, grads, _ = loss_and_grads(graph, x, y, weights, training=True, rng=rng)
            t += 1
            for k, p in params.items():
                adam_step(p, grads[k], m[k], v[k], t, config.learning_rate,
                          config.beta1, config.beta2, config.epsilon)
            total_loss += loss * len(idx)
            correct += int((probs.argmax(axis=1) == y).sum())
        val_loss, val_acc = evaluate_loss_acc(graph, val_set)
        history.train_loss.append(total_loss / len(train_set))
        history.train_acc.append(correct / len(train_set))
        history.val_loss.append(val_loss)
        history.val_acc.append(val_acc)
        stop = stopper.update(val_loss)
        if stopper.improved:
            best = Checkpoint.from_graph(
                graph, m={k: a.copy() for k, a in m.items()}, v={k: a.copy() for k, a in v.items()},
                step=t, epoch=epoch, best_val_loss=val_loss)
        log.info("epoch %d: loss %.4f acc %.4f val_loss %.4f val_acc %.4f", epoch,
                 history.train_loss[-1], history.train_acc[-1], val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(epoch, history)
        if stop:
            history.stopped_early = True
            break
    history.best_epoch = stopper.best_epoch
    # restore the best weights into the live graph as well
    for k, p in params.items():
        p[...] = best.weights[k]
    return best, history
