import json

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from herdlife import ingestion as ing
from herdlife import synth
from herdlife.baselines import ols_fit
from herdlife.schemas import FEATURES, TABLE_IV, TABLES, TraitStats


@pytest.fixture(scope="module")
def small():
    cfg = synth.default_config(n_cows=300, n_farms=3, seed=3)
    return cfg, synth.generate(cfg)


def hl_of(tables):
    ped = tables["ds102"]
    return (pd.to_datetime(ped["Animal Termination Date"]) - pd.to_datetime(ped["Birth Date"])).dt.days.to_numpy()


def test_tables_have_source_layouts(small):
    _, d = small
    assert set(d.tables) == set(TABLES)
    for kind, df in d.tables.items():
        assert tuple(df.columns) == TABLES[kind].columns
    assert len(d.tables["ds102"]) == 300
    assert d.tables["ds102"]["National Herd ID"].nunique() == 3


def test_same_seed_same_data_other_seed_differs(small):
    cfg, d = small
    again = synth.generate(cfg)
    for kind in TABLES:
        pd.testing.assert_frame_equal(d.tables[kind], again.tables[kind])
    other = synth.generate(cfg, seed=4)
    assert not d.tables["ds102"].equals(other.tables["ds102"])


def test_herd_life_in_published_range(small):
    hl = hl_of(small[1].tables)
    assert hl.min() >= TABLE_IV["hl"].lo and hl.max() <= TABLE_IV["hl"].hi


def test_output_ingests_without_loss(small, tmp_path):
    _, d = small
    d.write(tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["n_cows"] == 300
    histories, report = ing.run_pipeline(ing.load_tables(tmp_path))
    assert len(histories) == 300
    assert sum(report["load_rejects"].values()) == 0
    assert all(h.n_records >= 1 for h in histories)


def test_records_lie_inside_life(small):
    ages = synth.record_ages(small[1].tables)
    assert (ages["cl"] >= 0).all() and (ages["cl"] < ages["hl"]).all()


def test_manifest_records_planted_structure(small):
    planted = small[1].manifest["planted"]
    assert planted["signal_mode"] == "nonlinear-sequential"
    assert planted["trend"]["feature"] == "milk_fat"
    assert planted["interaction"]["features"] == ["milk_305", "mammary_system"]
    assert 0 < planted["noiseless_r2_ceiling"] < 1
    assert len(planted["farm_offsets_sd_units"]) == 3


def test_trend_reaches_herd_life(small):
    # recent fat change moves with the latent trend, which shortens herd life
    tests = small[1].tables["ds104"].sort_values(["National Cow ID", "Test Date"])
    hl = dict(zip(small[1].tables["ds102"]["National Cow ID"], hl_of(small[1].tables)))
    deltas, lives = [], []
    for cow, g in tests.groupby("National Cow ID"):
        fat = g["Fat Percentage"].to_numpy()
        if len(fat) >= 3:
            deltas.append(fat[-1] - fat[-3])
            lives.append(hl[cow])
    r = np.corrcoef(deltas, lives)[0, 1]
    assert r < -0.3


def test_noise_free_linear_mode_is_exactly_affine(tmp_path):
    d = synth.generate(synth.default_config(n_cows=200, n_farms=2, seed=1, signal_mode="linear", noise_scale=0.0))
    d.write(tmp_path)
    histories, _ = ing.run_pipeline(ing.load_tables(tmp_path))
    coef = d.manifest["planted"]["coefficients_raw"]
    idx = [FEATURES.index(t) for t in coef]
    X = np.array([h.raw_features[np.argmax(h.record_days)][idx] for h in histories])
    y = np.array([h.hl_days for h in histories], dtype=float)
    pred = d.manifest["planted"]["intercept_raw"] + X @ np.array(list(coef.values()))
    assert np.max(np.abs(pred - y)) < 1e-6
    fit = ols_fit(X, y)
    assert np.max(np.abs(fit.coef - np.array(list(coef.values())))) < 1e-6


def test_dominant_mode_weights():
    d = synth.generate(synth.default_config(n_cows=50, n_farms=1, seed=2, signal_mode="dominant-feature"))
    w = d.manifest["planted"]["weights_sd_units"]
    assert max(w, key=lambda k: abs(w[k])) == "milk_fat"


def test_marginal_report(small):
    cfg, d = small
    rep = synth.marginal_report(d.tables, cfg)
    assert set(rep["traits"]) >= {"hl", "milk_305", "scc", "lactation"}
    assert rep["records_per_cow"]["min"] >= 1
    assert -1 <= rep["pearson_cl_hl"] <= 1
    assert len(rep["farm_mean_hl"]) == 3


# --- marginals ---------------------------------------------------------------

def test_to_marginal_monotone_and_bounded():
    s = TABLE_IV["hwi"]
    z = np.linspace(-8, 8, 1001)
    x = synth.to_marginal(z, s)
    assert np.all(np.diff(x) >= 0)
    assert x.min() >= s.lo and x.max() <= s.hi


@pytest.mark.parametrize("name", ["milk_305", "mammary_system", "hl", "pi_fat"])
def test_truncnorm_params_match_feasible_moments(name):
    s = TABLE_IV[name]
    loc, scale = synth.truncnorm_params(s)
    m, v = stats.truncnorm.stats((s.lo - loc) / scale, (s.hi - loc) / scale, loc=loc, scale=scale)
    assert abs(m - s.mean) / s.sd < 1e-3
    assert abs(np.sqrt(v) - s.sd) / s.sd < 1e-2


def test_quantile_map_matches_scipy():
    s = TraitStats(10.0, 3.0, 2.0, 30.0)
    loc, scale = synth.truncnorm_params(s)
    z = np.array([-2.0, -0.5, 0.0, 1.3])
    a, b = (s.lo - loc) / scale, (s.hi - loc) / scale
    expected = stats.truncnorm.ppf(stats.norm.cdf(z), a, b, loc=loc, scale=scale)
    assert np.allclose(synth.to_marginal(z, s), expected, rtol=1e-9)


# --- config ------------------------------------------------------------------

def test_config_round_trip():
    cfg = synth.default_config(n_cows=10, signal_mode="linear", noise_scale=0.3)
    assert synth.GeneratorConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize("bad", [{"signal_mode": "quadratic"}, {"n_cows": 0}, {"dominant_feature": "hl"},
                                 {"obs_frac_lo": 0.9, "obs_frac_hi": 0.5}, {"noise_scale": -1.0}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        synth.default_config(**bad)


def test_same_seed_byte_identical_csv(tmp_path):
    cfg = synth.default_config(n_cows=60, n_farms=2, seed=9)
    synth.generate(cfg).write(tmp_path / "a")
    synth.generate(cfg).write(tmp_path / "b")
    for kind in TABLES:
        name = TABLES[kind].filename
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_nonlinear_signal_beyond_tabular_ols(tmp_path):
    from herdlife import baselines as bl
    from herdlife.metrics import r2

    d = synth.generate(synth.default_config(n_cows=1000, seed=5, noise_scale=0.0))
    d.write(tmp_path)
    histories, _ = ing.run_pipeline(ing.load_tables(tmp_path))
    scaled = ing.apply_standardizer(ing.fit_standardizer(histories), histories)
    rows = bl.tabularize(scaled)
    X, y, _ = bl.design(rows)
    ceiling = d.manifest["planted"]["noiseless_r2_ceiling"]
    assert ceiling == pytest.approx(1.0, abs=1e-6)
    assert r2(y, bl.ols_fit(rows).predict(X)) < 0.6 * ceiling


def test_farm_effect_knob():
    def between(sd):
        d = synth.generate(synth.default_config(n_cows=1400, seed=4, farm_effect_sd=sd))
        return synth.marginal_report(d.tables)["between_farm_var_hl"]

    small, large = between(0.0), between(0.5)
    assert small > 0
    assert large > 5 * small
