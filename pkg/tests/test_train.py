import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amx.data import DatasetSplit, LabeledExample, stack, synth_dataset
from amx.errors import ConfigError, DimensionError, EvaluationError, TrainingError
from amx.train import AdamState, TrainConfig, adam_step, evaluate_accuracy, reconstruction_mse, train_autoencoder, train_classifier


def hand_adam(p, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


# ---------------------------------------------------------------- adam

def test_adam_matches_hand_oracle_on_square():
    p = np.array([1.0])
    state = AdamState.zeros_like([p])
    for _ in range(3):
        adam_step([p], [2 * p.copy()], state, lr=0.1)
    assert abs(p[0] - hand_adam(1.0, lambda q: 2 * q, 3, lr=0.1)) < 1e-12
    assert state.t == 3


@settings(max_examples=40)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.integers(1, 5))
def test_adam_zero_gradient_is_fixed_point(values, steps):
    p = np.array(values)
    before = p.copy()
    state = AdamState.zeros_like([p])
    for _ in range(steps):
        adam_step([p], [np.zeros_like(p)], state)
    assert p.tobytes() == before.tobytes()


@settings(max_examples=40)
@given(st.lists(st.floats(-1e3, 1e3, allow_subnormal=False), min_size=1, max_size=8), st.floats(1e-5, 1.0))
def test_adam_first_step_bounded_by_lr(grads, lr):
    p = np.zeros(len(grads))
    adam_step([p], [np.array(grads)], AdamState.zeros_like([p]), lr=lr)
    assert np.abs(p).max() <= lr * (1 + 1e-9)


def test_adam_shape_mismatch():
    p = np.zeros(3)
    with pytest.raises(DimensionError):
        adam_step([p], [np.zeros(4)], AdamState.zeros_like([p]))
    with pytest.raises(DimensionError):
        adam_step([p], [], AdamState.zeros_like([p]))


def test_adam_float32_params_stay_float32():
    p = np.ones(4, np.float32)
    adam_step([p], [np.ones(4)], AdamState.zeros_like([p]))
    assert p.dtype == np.float32 and (p < 1).all()


# ---------------------------------------------------------------- config

@pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"learning_rate": 0.0}, {"batch_size": 0},
                                    {"precision": "float16"}])
def test_train_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


# ---------------------------------------------------------------- training loops

@pytest.fixture(scope="module")
def tiny():
    return synth_dataset(3, 24, seed=0)


def test_classifier_training_is_deterministic_and_best_epoch(tiny):
    cfg = TrainConfig(epochs=2, batch_size=16, seed=4)
    m1, h1 = train_classifier(tiny, cfg)
    m2, h2 = train_classifier(tiny, cfg)
    assert h1.train_loss == h2.train_loss and h1.val_acc == h2.val_acc
    assert len(h1) == len(h1.val_loss) == len(h1.val_acc) == 2
    for k in m1.params:
        assert m1.params[k].data.tobytes() == m2.params[k].data.tobytes()
    assert h1.best_epoch in (1, 2)
    assert h1.val_acc[h1.best_epoch - 1] == max(h1.val_acc)


def test_classifier_history_csv(tiny, tmp_path):
    _, h = train_classifier(tiny, TrainConfig(epochs=1, batch_size=32))
    h.write_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_acc" and lines[1].startswith("1,")


def test_autoencoder_training_reduces_mse_and_is_deterministic(tiny):
    cfg = TrainConfig(epochs=2, batch_size=4, seed=1)
    m, h1 = train_autoencoder(tiny, cfg, latent_dim=16)
    _, h2 = train_autoencoder(tiny, cfg, latent_dim=16)
    assert h1.train_loss == h2.train_loss and h1.val_loss == h2.val_loss
    assert reconstruction_mse(m, stack(tiny.train)[0]) < h1.initial_train_loss


def test_empty_train_split_is_training_error():
    empty = DatasetSplit([], [], [], ["a", "b"])
    with pytest.raises(TrainingError):
        train_classifier(empty, TrainConfig(epochs=1))
    with pytest.raises(TrainingError):
        train_autoencoder(empty, TrainConfig(epochs=1))


def test_divergence_names_epoch_and_batch(tiny):
    with pytest.raises(TrainingError, match=r"epoch \d+, batch \d+"):
        train_classifier(tiny, TrainConfig(epochs=3, learning_rate=1e30, batch_size=8))


# ---------------------------------------------------------------- accuracy

def _examples(labels):
    return [LabeledExample(np.full((80, 64), lab / 10, np.float32), int(lab), "s") for lab in labels]


def test_accuracy_perfect_oracle():
    ex = _examples([0, 1, 2, 1])

    def oracle(x):
        return np.eye(3)[np.round(x[:, 0, 0] * 10).astype(int)]

    assert evaluate_accuracy(oracle, ex) == 1.0


def test_accuracy_constant_predictor_is_chance():
    ex = _examples([0, 1, 2, 3] * 5)
    assert evaluate_accuracy(lambda x: np.tile([0.0, 0, 1, 0], (len(x), 1)), ex) == 0.25


def test_accuracy_ties_break_to_lowest_index():
    ex = _examples([0, 1])
    assert evaluate_accuracy(lambda x: np.ones((len(x), 2)), ex) == 0.5


def test_accuracy_matches_loop_oracle():
    rng = np.random.default_rng(0)
    scores = rng.normal(size=(50, 4))
    y = rng.integers(0, 4, 50)
    x = np.zeros((50, 80, 64), np.float32)
    hits = 0
    for i in range(50):
        best = 0
        for k in range(1, 4):
            if scores[i, k] > scores[i, best]:
                best = k
        hits += best == y[i]
    assert evaluate_accuracy(lambda _: scores, (x, y)) == hits / 50


def test_accuracy_empty_is_error():
    with pytest.raises(EvaluationError):
        evaluate_accuracy(lambda x: x, [])
    with pytest.raises(EvaluationError):
        evaluate_accuracy(lambda x: x, (np.zeros((0, 80, 64)), np.zeros(0, int)))
