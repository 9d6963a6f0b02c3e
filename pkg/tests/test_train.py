import csv

import numpy as np
import pytest

from edgecnn.data import LabeledDataset, synthesize
from edgecnn.exceptions import ConfigError, InputError, NumericError
from edgecnn.gradcheck import max_relative_error, numeric_gradient
from edgecnn.layers import softmax
from edgecnn.model import build
from edgecnn.train import (TrainConfig, adam_step, augment_batch, class_weighted_batch_loss,
                           cross_entropy, fit, he_init, loss_and_grads, normalize,
                           simulate_early_stopping, split_dataset)


def test_he_init_moments():
    w = he_init((100_000,), 2, np.random.default_rng(0), np.float64)
    assert abs(w.std() - 1.0) < 0.02


def test_he_init_seeded():
    a = he_init((4, 4), 8, np.random.default_rng(3))
    b = he_init((4, 4), 8, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_build_biases_zero():
    for name, p in build(16, 3).named_params().items():
        if name.endswith("bias"):
            assert not p.any()


def test_cross_entropy_cases():
    assert cross_entropy([0, 1, 0], [0, 1, 0]) == 0
    assert cross_entropy(np.full(5, 0.2), [1, 0, 0, 0, 0]) == pytest.approx(1.60943791243, abs=1e-10)
    p = softmax(np.array([1.0, 2.0, 3.0]))
    assert cross_entropy(p, [0, 1, 0]) == pytest.approx(1.40760596444, abs=1e-10)
    assert cross_entropy([1.0, 0.0], [0, 1]) == pytest.approx(-np.log(1e-12))


@pytest.mark.parametrize("target", [[0, 0, 0], [1, 1, 0], [0, 2, 0], [0, 1]])
def test_cross_entropy_rejects_bad_target(target):
    with pytest.raises(InputError):
        cross_entropy([0.2, 0.3, 0.5], target)


def test_weighted_batch_loss(rng):
    probs = softmax(rng.standard_normal((2, 3)))
    labels = np.array([0, 2])
    l1, l2 = (cross_entropy(probs[i], np.eye(3)[labels[i]]) for i in range(2))
    assert class_weighted_batch_loss(probs, labels, [1, 1, 1]) == pytest.approx((l1 + l2) / 2)
    assert class_weighted_batch_loss(probs, labels, [1, 1, 2]) == pytest.approx((l1 + 2 * l2) / 2)
    assert class_weighted_batch_loss(probs, np.eye(3)[labels], [2, 1, 1]) == \
        pytest.approx((2 * l1 + l2) / 2)
    with pytest.raises(InputError):
        class_weighted_batch_loss(probs, np.array([0, 1, 2]), [1, 1, 1])


def test_adam_zero_gradient_fixed_point():
    p, m, v = np.array([1.5]), np.array([0.2]), np.array([0.1])
    adam_step(p, np.zeros(1), m, v, t=5)
    assert p[0] == pytest.approx(1.5 - 1e-3 * (0.18 / (1 - 0.9**5)) /
                                 (np.sqrt(0.0999 / (1 - 0.999**5)) + 1e-8))
    p2, m2, v2 = np.array([2.0]), np.zeros(1), np.zeros(1)
    adam_step(p2, np.zeros(1), m2, v2, t=1)
    assert p2[0] == 2.0 and m2[0] == 0 and v2[0] == 0


def test_adam_first_step_is_lr_sign():
    p, m, v = np.array([1.0]), np.zeros(1), np.zeros(1)
    adam_step(p, np.ones(1), m, v, t=1, lr=0.1)
    # m_hat = 1, v_hat = 1 -> p = 1 - 0.1 / (1 + 1e-8)
    assert p[0] == pytest.approx(0.9, abs=1e-8)


def test_adam_converges_on_quadratic():
    p, m, v = np.array([5.0]), np.zeros(1), np.zeros(1)
    for t in range(1, 501):
        adam_step(p, 2 * p, m, v, t, lr=0.1)
    assert abs(p[0]) < 0.01


def test_adam_rejects_nonfinite():
    with pytest.raises(NumericError):
        adam_step(np.ones(2), np.array([1.0, np.nan]), np.zeros(2), np.zeros(2), 1)


def _dataset(per_class, classes=5, size=4):
    n = per_class * classes
    return LabeledDataset(np.zeros((n, size, size, 3), np.uint8),
                          np.repeat(np.arange(classes), per_class), [str(i) for i in range(classes)])


def test_split_85_15():
    tr, va = split_dataset(_dataset(20), 0.85, seed=0)
    assert (len(tr), len(va)) == (85, 15)
    assert tr.class_counts().tolist() == [17] * 5 and va.class_counts().tolist() == [3] * 5


def test_split_deterministic_disjoint_exhaustive():
    ds = _dataset(20)
    ds.images[:, 0, 0, 0] = np.arange(len(ds))  # tag each example
    a = split_dataset(ds, 0.85, seed=9)
    b = split_dataset(ds, 0.85, seed=9)
    tags = lambda d: d.images[:, 0, 0, 0].tolist()  # noqa: E731
    assert tags(a[0]) == tags(b[0]) and tags(a[1]) == tags(b[1])
    assert sorted(tags(a[0]) + tags(a[1])) == list(range(100))


def test_split_rejects_tiny_class():
    ds = LabeledDataset(np.zeros((3, 4, 4, 3), np.uint8), [0, 0, 1], ["a", "b"])
    with pytest.raises(ConfigError):
        split_dataset(ds, 0.85)


def test_augment_cases(rng):
    imgs = rng.integers(0, 256, (4, 3, 5, 3), dtype=np.uint8)
    assert np.array_equal(augment_batch(imgs, 0.0, rng), imgs)
    flipped = augment_batch(imgs, 1.0, rng)
    assert np.array_equal(flipped[:, :, 0], imgs[:, :, 4])
    assert np.array_equal(flipped[:, :, 1], imgs[:, :, 3])
    assert np.array_equal(augment_batch(flipped, 1.0, rng), imgs)


def test_normalize_cases():
    assert normalize(np.array([0, 255, 51], np.uint8)).tolist() == [0.0, 1.0, np.float32(0.2)]
    np.testing.assert_allclose(normalize(np.full((2, 2, 3), 128, np.uint8)), 0.50196078, atol=1e-7)
    with pytest.raises(InputError):
        normalize(np.array([-1, 3]))
    with pytest.raises(InputError):
        normalize(np.array([256]))


@pytest.mark.parametrize("losses,expected", [
    ([1.0, 0.8, 0.7, 0.72, 0.75, 0.78], (6, 3)),
    (list(np.linspace(2, 0.1, 25)), (25, 25)),
    ([1.0, 1.1, 1.0, 1.2, 1.3, 0.9, 1.0, 1.1, 1.2], (9, 6)),
])
def test_early_stopping_rule(losses, expected):
    assert simulate_early_stopping(losses, patience=3) == expected


# a 1e-3 step crosses ReLU / max-pool switching points in the composed network
KINK_SAFE_EPS = 1e-5


def test_total_loss_gradient_tiny_network():
    rng = np.random.default_rng(11)
    g = build(12, 2, seed=4, dtype=np.float64)
    for k, p in g.named_params().items():
        if k.endswith("bias"):
            p[...] = rng.standard_normal(p.shape) * 0.1
    x = rng.random((3, 12, 12, 3))
    y = np.array([0, 1, 1])
    w = np.array([1.0, 1.7])
    _, _, grads, dx = loss_and_grads(g, x, y, w)

    def f():
        return loss_and_grads(g, x, y, w)[0]

    for k, p in g.named_params().items():
        idx = rng.choice(p.size, size=min(p.size, 40), replace=False)
        num = numeric_gradient(f, p, KINK_SAFE_EPS, idx)
        assert max_relative_error(grads[k], num) < 1e-4, k
    num = numeric_gradient(f, x, KINK_SAFE_EPS, rng.choice(x.size, 40, replace=False))
    assert max_relative_error(dx, num) < 1e-4


def test_uniform_class_weight_scaling_keeps_first_update_direction():
    rng = np.random.default_rng(5)
    x = rng.random((6, 12, 12, 3)).astype(np.float32)
    y = np.array([0, 1, 2, 0, 1, 2])
    updates = []
    for scale in (1.0, 3.0):
        g = build(12, 3, seed=1)
        before = {k: p.copy() for k, p in g.named_params().items()}
        loss, _, grads, _ = loss_and_grads(g, x, y, np.full(3, scale))
        updates.append((loss, np.concatenate([
            (adam_step(p, grads[k], np.zeros_like(p), np.zeros_like(p), 1)[0] - before[k]).ravel()
            for k, p in g.named_params().items()])))
    (l1, u1), (l3, u3) = updates
    assert l3 == pytest.approx(3 * l1)
    cos = u1 @ u3 / (np.linalg.norm(u1) * np.linalg.norm(u3))
    assert cos > 0.999


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(split_fraction=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(patience=0)
    with pytest.raises(ConfigError):
        TrainConfig(class_weights=[1, 0])


def test_fit_small_run_is_reproducible(tmp_path):
    ds = synthesize(classes=3, per_class=8, size=16, seed=2)
    cfg = TrainConfig(batch_size=8, max_epochs=3, seed=4)
    runs = [fit(build(16, 3, seed=1), ds, cfg) for _ in range(2)]
    (c1, h1), (c2, h2) = runs
    assert c1.to_bytes() == c2.to_bytes()
    assert h1.val_loss == h2.val_loss
    assert len(h1) <= 3 and h1.best_epoch == int(np.argmin(h1.val_loss)) + 1
    assert c1.best_val_loss == min(h1.val_loss)
    h1.to_csv(tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]
    assert len(rows) == len(h1) + 1


def test_fit_returns_best_epoch_weights(monkeypatch):
    # drive fit with a scripted validation-loss sequence
    import edgecnn.train as train_mod
    seq = iter([1.0, 0.8, 0.7, 0.72, 0.75, 0.78, 0.5])
    snapshots = []

    def fake_eval(graph, dataset, batch_size=32):
        snapshots.append(graph.named_params()["dense2.bias"].copy())
        return next(seq), 0.5

    monkeypatch.setattr(train_mod, "evaluate_loss_acc", fake_eval)
    ds = synthesize(classes=2, per_class=6, size=12, seed=0)
    ck, hist = fit(build(12, 2, seed=0), ds, TrainConfig(batch_size=4, max_epochs=25, seed=0))
    assert len(hist) == 6 and hist.stopped_early and hist.best_epoch == 3
    assert ck.epoch == 3 and ck.best_val_loss == 0.7
    assert np.array_equal(ck.weights["dense2.bias"], snapshots[2])


def test_fit_rejects_size_mismatch():
    ds = synthesize(classes=2, per_class=4, size=16, seed=0)
    with pytest.raises(ConfigError):
        fit(build(12, 2), ds, TrainConfig(max_epochs=1))
