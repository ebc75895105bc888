import dataclasses

import numpy as np
import pytest

from herdlife import sequencing as sq
from herdlife import transformer as tf
from herdlife.autograd import Tensor, param_grad_check
from herdlife.checkpoint import CheckpointError

from conftest import random_histories

TINY = tf.ModelConfig(L=4, d_model=8, n_heads=2, n_layers=1, d_ff=16, dropout=0.0)


def random_batch(rng, B, L, min_valid=1):
    x = rng.normal(size=(B, L, 16))
    m = np.zeros((B, L))
    for b in range(B):
        k = int(rng.integers(min_valid, L + 1))
        m[b, L - k:] = 1
    x[m == 0] = 0.0
    return x, m


def samples(n, L=10, seed=0, **kw):
    return sq.build_sequences(random_histories(n, np.random.default_rng(seed), **kw), L)


# --- attention and masking ---------------------------------------------------

def test_attention_rows_sum_to_one_and_ignore_padding():
    cfg = tf.ModelConfig(L=6, d_model=16, n_heads=4, n_layers=2, d_ff=32)
    model = tf.init_model(cfg, seed=1)
    x, m = random_batch(np.random.default_rng(1), 8, 6)
    att = []
    tf.encode(x, m, model.params, cfg, attention=att)
    assert len(att) == 2
    for a in att:
        assert a.shape == (8, 4, 6, 6)
        assert np.allclose(a.sum(axis=-1), 1.0, atol=1e-12)
        padded_keys = np.broadcast_to(m[:, None, None, :] == 0, a.shape)
        assert np.all(a[padded_keys] == 0.0)


def test_padding_perturbation_does_not_change_output():
    cfg = tf.ModelConfig()
    model = tf.init_model(cfg, seed=2, head_scale=0.1)
    rng = np.random.default_rng(2)
    x, m = random_batch(rng, 100, 10)
    base = tf.forward(model, x, m).data
    noisy = x.copy()
    noisy[m == 0] = rng.normal(scale=1e3, size=(int((m == 0).sum()), 16))
    assert np.max(np.abs(tf.forward(model, noisy, m).data - base)) < 1e-6


def test_all_padding_sample_rejected():
    model = tf.init_model(TINY)
    with pytest.raises(ValueError, match="no valid"):
        tf.forward(model, np.zeros((1, 4, 16)), np.zeros((1, 4)))


def test_shape_mismatch_rejected():
    model = tf.init_model(TINY)
    with pytest.raises(ValueError):
        tf.forward(model, np.zeros((1, 5, 16)), np.ones((1, 5)))


def test_order_matters():
    # learned positions make the encoder sensitive to record order
    model = tf.init_model(TINY, seed=3, head_scale=1.0)
    x, m = random_batch(np.random.default_rng(3), 1, 4, min_valid=4)
    flipped = x[:, ::-1].copy()
    assert abs(tf.forward(model, x, m).item() - tf.forward(model, flipped, m).item()) > 1e-6


# --- gradients ---------------------------------------------------------------

def _grad_error(cfg, seed, head):
    cfg = dataclasses.replace(cfg, head=head, dropout=0.0)
    model = tf.init_model(cfg, seed=seed, head_scale=0.1)
    rng = np.random.default_rng(seed)
    x, m = random_batch(rng, 2, cfg.L)
    hl = rng.normal(size=2)
    cls = rng.integers(0, 3, size=2)
    return param_grad_check(lambda: tf._loss(model, x, m, hl, cls, None), model.param_list())


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("head", tf.HEADS)
def test_tiny_model_gradients(seed, head):
    assert _grad_error(TINY, seed, head) < 1e-4


def test_default_model_gradients_sampled():
    cfg = tf.ModelConfig(dropout=0.0)
    model = tf.init_model(cfg, seed=4, head_scale=0.1)
    rng = np.random.default_rng(4)
    x, m = random_batch(rng, 2, cfg.L)
    hl = rng.normal(size=2)
    err = param_grad_check(lambda: tf._loss(model, x, m, hl, None, None), model.param_list(), max_coords=12)
    assert err < 1e-4


# --- heads -------------------------------------------------------------------

def test_zero_head_predicts_training_mean():
    model = tf.init_model(TINY, target_mean=2617.0, target_sd=898.0)
    pred = tf.predict_hl(samples(5, L=4), model)
    assert np.all(pred == 2617.0)


def test_equal_logits_choose_low():
    model = tf.init_model(dataclasses.replace(TINY, head="classification"))
    cls, probs = tf.predict_class(samples(5, L=4), model)
    assert np.all(cls == 0)
    assert np.allclose(probs, 1 / 3)


def test_head_mismatch_rejected():
    with pytest.raises(ValueError):
        tf.predict_class(samples(2, L=4), tf.init_model(TINY))


# --- training ----------------------------------------------------------------

def fast(cfg=TINY, **kw):
    return dataclasses.replace(cfg, **{"epochs": 30, "batch_size": 8, "lr": 3e-3, "truncation_prob": 0.0, **kw})


def test_training_is_deterministic():
    data = samples(40, L=4)
    a, ha = tf.train(data[:32], data[32:], fast(epochs=4), seed=5)
    b, hb = tf.train(data[:32], data[32:], fast(epochs=4), seed=5)
    assert ha == hb
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_memorises_small_set():
    data = samples(32, L=4, seed=6)
    cfg = fast(tf.ModelConfig(L=4, d_model=32, n_heads=4, n_layers=2, d_ff=64, dropout=0.0),
               epochs=300, patience=300)
    model, hist = tf.train(data, None, cfg, seed=6)
    from herdlife.metrics import r2
    assert r2([s.hl_days for s in data], tf.predict_hl(data, model)) > 0.95
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]


def test_early_stopping_keeps_best_epoch():
    data = samples(40, L=4, seed=7)
    model, hist = tf.train(data[:30], data[30:], fast(epochs=60, patience=3), seed=7)
    best = min(hist, key=lambda r: r["val_loss"])
    assert model.meta["best_epoch"] == best["epoch"]
    assert len(hist) <= 60
    val_loss, _ = tf._evaluate(model, data[30:])
    assert val_loss == pytest.approx(best["val_loss"], rel=1e-12)


def test_training_rejects_bad_input():
    with pytest.raises(ValueError):
        tf.train([], None, TINY)
    with pytest.raises(ValueError):
        tf.train(samples(4, L=5), None, TINY)
    with pytest.raises(ValueError):
        tf.ModelConfig(d_model=10, n_heads=4).validate()


def test_validation_split():
    data = samples(16, L=4)
    fit, val = tf.validation_split(data, 0.125, seed=1)
    assert (len(fit), len(val)) == (14, 2)
    assert {s.cow_id for s in fit}.isdisjoint(s.cow_id for s in val)


# --- persistence -------------------------------------------------------------

def test_save_load_bit_exact(tmp_path):
    data = samples(20, L=4)
    model, _ = tf.train(data[:16], data[16:], fast(epochs=3), seed=1, standardizer={"x": 1})
    tf.save(model, tmp_path / "m.ckpt")
    back = tf.load(tmp_path / "m.ckpt")
    assert np.array_equal(tf.predict_hl(data, model), tf.predict_hl(data, back))
    assert back.standardizer == {"x": 1} and back.config == model.config


def test_truncated_checkpoint_rejected(tmp_path):
    tf.save(tf.init_model(TINY), tmp_path / "m.ckpt")
    blob = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        tf.load(tmp_path / "cut.ckpt")


def test_non_finite_parameters_rejected():
    model = tf.init_model(TINY)
    model.params["head_b"].data[0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        tf.predict_hl(samples(2, L=4), model)
