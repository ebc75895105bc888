import dataclasses
from types import SimpleNamespace

import numpy as np
import pytest

from herdlife import metrics as mt
from herdlife import transformer as tf

from conftest import random_histories

# counts chosen so that every cell of the published confusion table is reproduced
TABLE_VI = np.array([[2153, 47, 0], [319, 566, 37], [34, 199, 441]])


def pct(v):
    return int(round(100 * v))


# --- classification ----------------------------------------------------------

def test_prf1_reproduces_published_rows():
    scores = mt.prf1(mt.ConfusionMatrix3(TABLE_VI))
    got = {k: (pct(s.precision), pct(s.recall), pct(s.f1)) for k, s in scores.items()}
    assert got == {"low": (86, 98, 92), "medium": (70, 61, 65), "high": (92, 65, 77)}


def test_f1_from_rounded_pairs():
    assert pct(mt.f1_score(0.86, 0.98)) == 92
    assert pct(mt.f1_score(0.70, 0.61)) == 65


def test_accuracy_of_published_matrix():
    assert pct(mt.accuracy(mt.ConfusionMatrix3(TABLE_VI))) == 83


def test_crit_mis_corner_cells():
    c = mt.crit_mis(mt.ConfusionMatrix3(TABLE_VI))
    assert (c.low_as_high, c.high_as_low) == (0, 34)
    assert c.low_as_high_rate == 0.0
    assert c.high_as_low_rate == 34 / 674 and pct(c.high_as_low_rate) == 5


def test_confusion_counts():
    cm = mt.confusion([0, 0, 1, 2, 2], [0, 1, 1, 2, 0])
    assert cm.counts.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 1]]
    with pytest.raises(ValueError):
        mt.confusion([0, 3], [0, 1])
    with pytest.raises(ValueError):
        mt.confusion([0], [0, 1])


def test_undefined_precision_flagged():
    s = mt.prf1(mt.confusion([0, 1], [0, 0]))
    assert s["medium"].precision == 0.0 and "precision_undefined" in s["medium"].flags
    assert "recall_undefined" in s["high"].flags
    assert s["medium"].f1 == 0.0


# --- regression --------------------------------------------------------------

def test_r2_hand_fixture():
    # ss_res = 0.01 + 0.01 + 0.04 + 0.04 = 0.10, ss_tot = 5
    assert mt.r2([1, 2, 3, 4], [1.1, 1.9, 3.2, 3.8]) == pytest.approx(0.98, abs=1e-12)


def test_r2_mean_predictor_is_zero():
    y = np.array([3.0, 7.0, 1.0, 9.0])
    assert mt.r2(y, np.full(4, y.mean())) == 0.0


def test_r2_errors():
    with pytest.raises(ValueError):
        mt.r2([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        mt.r2([1], [1])


def test_adjusted_r2():
    rng = np.random.default_rng(0)
    y = rng.normal(size=50)
    p = y + rng.normal(scale=0.5, size=50)
    assert mt.r2_adjusted(y, p, 16) == pytest.approx(1 - (1 - mt.r2(y, p)) * 49 / 33)
    with pytest.raises(ValueError):
        mt.r2_adjusted(y[:17], p[:17], 16)


def test_mae():
    assert mt.mae([100, 200], [95, 205]) == 5.0


def test_pearson_properties():
    rng = np.random.default_rng(1)
    x = rng.normal(size=100)
    y = 0.5 * x + rng.normal(size=100)
    assert mt.pearson(x, x) == pytest.approx(1.0)
    assert mt.pearson(x, -x) == pytest.approx(-1.0)
    assert mt.pearson(x, y) == pytest.approx(mt.pearson(3 * x + 2, y))
    assert mt.pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1])
    with pytest.raises(ValueError):
        mt.pearson(x, np.ones(100))


# --- reports -----------------------------------------------------------------

def fake_samples(n, farms, rng):
    hl = rng.integers(200, 4900, size=n)
    from herdlife.schemas import hl_to_class
    return [SimpleNamespace(farm_id=farms[i % len(farms)], hl_days=float(hl[i]), hl_class=hl_to_class(hl[i]))
            for i in range(n)]


def test_per_farm_rows_and_mae_identity():
    rng = np.random.default_rng(2)
    farms = [f"F{i}" for i in range(7)]
    samples = fake_samples(300, farms, rng)
    pred = np.array([s.hl_days for s in samples]) + rng.normal(scale=300, size=300)
    cls = rng.integers(0, 3, size=300)
    rep = mt.per_farm_report(samples, {"hl_days": pred, "class": cls})
    assert list(rep) == farms + ["overall"]
    weighted = sum(r.n * r.mae_days for k, r in rep.items() if k != "overall") / 300
    assert abs(rep["overall"].mae_days - weighted) < 1e-9
    assert sum(r.n for k, r in rep.items() if k != "overall") == rep["overall"].n == 300


def test_per_farm_csv(tmp_path):
    rng = np.random.default_rng(3)
    samples = fake_samples(60, ["A", "B"], rng)
    rep = mt.per_farm_report(samples, {"hl_days": np.array([s.hl_days for s in samples])})
    mt.write_per_farm_csv(rep, tmp_path / "f.csv")
    rows = mt.read_csv_rows(tmp_path / "f.csv")
    assert [r["farm"] for r in rows] == ["A", "B", "overall"]
    assert float(rows[2]["r2"]) == 1.0 and rows[2]["accuracy"] == ""


def test_report_json_round_trip():
    rep = mt.evaluate([1.0, 2.0, 3.0], [1.0, 2.5, 3.0], [0, 0, 1], [0, 1, 1], p=None)
    import json
    d = json.loads(rep.to_json())
    assert d["n"] == 3 and d["confusion"] == [[1, 1, 0], [0, 1, 0], [0, 0, 0]]
    assert d["r2_adjusted"] is None


# --- sweep -------------------------------------------------------------------

def test_sweep_rows():
    rng = np.random.default_rng(4)
    train = random_histories(40, rng)
    test = random_histories(12, rng)
    cfg = tf.ModelConfig(d_model=8, n_heads=2, n_layers=1, d_ff=8, epochs=2, dropout=0.0)
    rows = mt.length_sweep(train, test, [2, 4], [1, 2, 3, 4], cfg, seed=0)
    assert [(r["train_L"], r["eval_k"]) for r in rows] == [(2, 1), (2, 2), (4, 1), (4, 2), (4, 3), (4, 4)]
    assert all(r["status"] == "ok" and r["n_test"] == 12 for r in rows)


def test_sweep_reports_failures_and_continues(monkeypatch):
    rng = np.random.default_rng(5)
    train, test = random_histories(20, rng), random_histories(5, rng)
    real = tf.train

    def flaky(fit, val, cfg, seed=None, **kw):
        if cfg.L == 2:
            raise tf.TrainingDiverged("boom")
        return real(fit, val, cfg, seed=seed, **kw)

    monkeypatch.setattr(tf, "train", flaky)
    cfg = tf.ModelConfig(d_model=4, n_heads=1, n_layers=1, d_ff=4, epochs=1)
    rows = mt.length_sweep(train, test, [2, 3], [1, 3], cfg)
    assert [r["status"] for r in rows] == ["failed: boom", "ok", "ok"]
    assert np.isnan(rows[0]["r2"])
