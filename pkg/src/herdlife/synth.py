"""Seven-table synthetic herd generator with planted, recoverable signal.

Every cow is generated latest-state first: the measurements of her most
recent record are drawn, herd life is computed from them (per signal
mode), and only then is the record timeline laid out backwards so that the
earlier records are consistent with both.

Latent values live in standard-normal space and are mapped onto each
trait's truncated-normal marginal (mean, sd, min, max) through the
quantile function, so bounds hold exactly and the mapping is monotone.
"""
from __future__ import annotations

import dataclasses
import functools
import datetime as dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import optimize, special, stats

from .schemas import DAYS_PREGNANT, TABLE_IV, TABLES, TraitStats

SIGNAL_MODES = ("linear", "nonlinear-sequential", "dominant-feature")

# measurements drawn in latent space; lactation, current life, days pregnant
# and the flags come from the timeline instead
LACTATION_TRAITS = ("milk_305", "lactose_yield", "pi_fat", "num_pi_tests")
TEST_TRAITS = ("milk_fat", "lactose_percentage", "scc")
ABV_TRAITS = ("mammary_system", "hwi", "abv_mastitis_resistance")
PLANTABLE = LACTATION_TRAITS + TEST_TRAITS + ABV_TRAITS

# decimals written for each trait; milk_305 stays unrounded because it absorbs
# the integer-day rounding of herd life in noise-free linear modes
_DECIMALS = {"lactose_yield": 1, "pi_fat": 0, "num_pi_tests": 0, "milk_fat": 2, "lactose_percentage": 2,
             "scc": 0, "mammary_system": 0, "hwi": 0, "abv_mastitis_resistance": 1}
ADJUST_TRAIT = "milk_305"

LINEAR_WEIGHTS = {"milk_305": 0.30, "lactose_yield": -0.25, "pi_fat": 0.30, "num_pi_tests": 0.25,
                  "milk_fat": 0.35, "lactose_percentage": -0.35, "scc": -0.30, "mammary_system": 0.25,
                  "hwi": 0.30, "abv_mastitis_resistance": 0.25}


@dataclass
class GeneratorConfig:
    n_cows: int = 2000
    n_farms: int = 7
    seed: int = 7
    signal_mode: str = "nonlinear-sequential"
    # herd-life sd units; None picks the per-mode default below
    noise_scale: float | None = None
    farm_effect_sd: float = 0.1
    marginals: dict[str, TraitStats] = field(default_factory=lambda: dict(TABLE_IV))
    days_pregnant: TraitStats = DAYS_PREGNANT
    # records per cow: discretised log-normal, clipped to [min, max]
    records_mean: float = 40.0
    records_sigma: float = 0.8
    records_min: int = 1
    records_max: int = 200
    # history censored at obs_frac * HL, obs_frac ~ U(lo, hi); the record
    # window covers the last (1 - window_start) of the observed span
    obs_frac_lo: float = 0.2
    obs_frac_hi: float = 0.95
    window_start: float = 0.6
    # calving timeline in days of age (compressed so that the censored
    # histories still reach the published lactation mean)
    first_calving_age: float = 500.0
    calving_interval: float = 330.0
    # linear / dominant-feature planted weights (herd-life sd per trait sd)
    linear_weights: dict[str, float] = field(default_factory=lambda: dict(LINEAR_WEIGHTS))
    dominant_feature: str = "milk_fat"
    dominant_weight: float = 0.9
    # nonlinear-sequential weights
    trend_feature: str = "milk_fat"
    trend_weight: float = -0.75
    trend_span: int = 2
    trend_step: float = 1.2
    interaction: tuple[str, str] = ("milk_305", "mammary_system")
    interaction_weight: float = 0.45
    first_birth: str = "2000-01-01"
    birth_span_days: int = 3650

    def resolved_noise(self) -> float:
        if self.noise_scale is not None:
            return self.noise_scale
        return {"linear": 0.05, "dominant-feature": 0.2, "nonlinear-sequential": 0.15}[self.signal_mode]

    def validate(self) -> None:
        if self.signal_mode not in SIGNAL_MODES:
            raise ValueError(f"signal_mode must be one of {SIGNAL_MODES}")
        if self.n_farms < 1 or self.n_cows < 1:
            raise ValueError("need at least one farm and one cow")
        for name, s in list(self.marginals.items()) + [("days_pregnant", self.days_pregnant)]:
            if not s.lo <= s.mean <= s.hi or s.sd <= 0:
                raise ValueError(f"infeasible marginal for {name}: {s}")
        if not 0 <= self.obs_frac_lo < self.obs_frac_hi <= 1:
            raise ValueError("observation fractions must satisfy 0 <= lo < hi <= 1")
        if not 0 <= self.window_start < 1:
            raise ValueError("window_start must lie in [0, 1)")
        if not 1 <= self.records_min <= self.records_max:
            raise ValueError("bad records-per-cow range")
        if self.resolved_noise() < 0 or self.farm_effect_sd < 0:
            raise ValueError("noise and farm effect scales must be non-negative")
        for name in list(self.linear_weights) + [self.dominant_feature, self.trend_feature, *self.interaction]:
            if name not in PLANTABLE:
                raise ValueError(f"{name} cannot carry planted signal")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["marginals"] = {k: dataclasses.asdict(v) for k, v in self.marginals.items()}
        d["days_pregnant"] = dataclasses.asdict(self.days_pregnant)
        d["interaction"] = list(self.interaction)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "marginals" in d:
            d["marginals"] = {k: TraitStats(**v) for k, v in d["marginals"].items()}
        if "days_pregnant" in d:
            d["days_pregnant"] = TraitStats(**d["days_pregnant"])
        if "interaction" in d:
            d["interaction"] = tuple(d["interaction"])
        return cls(**d)


def default_config(**overrides) -> GeneratorConfig:
    cfg = GeneratorConfig(**overrides)
    cfg.validate()
    return cfg


@functools.lru_cache(maxsize=None)
def truncnorm_params(s: TraitStats) -> tuple[float, float]:
    """(loc, scale) whose truncation to [lo, hi] has the target mean and sd.

    Where no truncated normal can reach the target (a left-truncated normal
    has sd below mean - lo), the mean is matched first and the sd gets as
    close as the family allows.
    """
    def resid(p):
        loc, scale = p[0], math.exp(p[1])
        m, v = stats.truncnorm.stats((s.lo - loc) / scale, (s.hi - loc) / scale, loc=loc, scale=scale)
        return [10.0 * (m - s.mean) / s.sd, (math.sqrt(v) - s.sd) / s.sd]

    lo_loc = s.lo - 4 * s.sd
    fit = optimize.least_squares(resid, [s.mean, math.log(s.sd)],
                                 bounds=([lo_loc, math.log(s.sd) - 3], [s.hi + 4 * s.sd, math.log(s.sd) + 3]))
    return float(fit.x[0]), float(math.exp(fit.x[1]))


def to_marginal(z, s: TraitStats):
    """Map standard-normal latents onto the truncated-normal marginal ``s`` (monotone)."""
    loc, scale = truncnorm_params(s)
    a, b = (s.lo - loc) / scale, (s.hi - loc) / scale
    u = special.ndtr(np.asarray(z, dtype=np.float64))
    if a > 0:
        # work in the upper tail to keep precision when most mass is cut away
        qa, qb = special.ndtr(-a), special.ndtr(-b)
        x = loc - scale * special.ndtri(qa - u * (qa - qb))
    else:
        pa, pb = special.ndtr(a), special.ndtr(b)
        x = loc + scale * special.ndtri(pa + u * (pb - pa))
    return np.clip(x, s.lo, s.hi)


# ---------------------------------------------------------------------------


@dataclass
class _Cow:
    cow_id: str
    farm: int
    birth: int                 # days since epoch
    hl: int
    latest: dict[str, float]   # raw values of the most recent record
    latent: dict[str, float]
    signal: float              # noise-free herd life (days)


@dataclass
class GeneratedData:
    tables: dict[str, pd.DataFrame]
    manifest: dict

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for kind, df in self.tables.items():
            df.to_csv(out / TABLES[kind].filename, index=False, lineterminator="\n")
        (out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


def _planted_weights(cfg: GeneratorConfig) -> dict[str, float]:
    if cfg.signal_mode == "linear":
        return dict(cfg.linear_weights)
    if cfg.signal_mode == "dominant-feature":
        rest = [t for t in PLANTABLE if t != cfg.dominant_feature]
        w = {t: 0.08 * (1 if i % 2 == 0 else -1) for i, t in enumerate(rest)}
        w[cfg.dominant_feature] = cfg.dominant_weight
        return w
    return {"lactose_percentage": -0.15, "milk_fat": 0.10}


def generate(cfg: GeneratorConfig | None = None, seed: int | None = None) -> GeneratedData:
    cfg = cfg or default_config()
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    cfg.validate()
    hl_stats = cfg.marginals["hl"]
    noise = cfg.resolved_noise()
    weights = _planted_weights(cfg)
    linear_like = cfg.signal_mode in ("linear", "dominant-feature")

    root = np.random.SeedSequence(cfg.seed)
    master_ss, *farm_ss = root.spawn(cfg.n_farms + 1)
    master = np.random.default_rng(master_ss)
    farm_rngs = [np.random.default_rng(s) for s in farm_ss]
    farm_z = master.standard_normal(cfg.n_farms)
    if cfg.n_farms > 1:
        farm_z = (farm_z - farm_z.mean()) / farm_z.std()
    else:
        farm_z = np.zeros(1)
    farm_offsets = cfg.farm_effect_sd * farm_z
    farm_of_cow = np.sort(np.arange(cfg.n_cows) % cfg.n_farms)
    first_birth = (dt.date.fromisoformat(cfg.first_birth) - dt.date(1970, 1, 1)).days

    # raw-unit coefficients of the linear modes: hl = b0 + sum b_j x_j
    coef = {t: w * hl_stats.sd / cfg.marginals[t].sd for t, w in weights.items()}
    b0 = hl_stats.mean - sum(coef[t] * cfg.marginals[t].mean for t in coef)

    # nonlinear mode: rescale so signal plus noise has unit variance
    unit = 1.0
    if not linear_like:
        unit = math.sqrt(cfg.trend_weight**2 + cfg.interaction_weight**2 + sum(w * w for w in weights.values())
                         + cfg.farm_effect_sd**2 + noise**2)
        noise /= unit

    rows: dict[str, list[dict]] = {k: [] for k in TABLES}
    cows: list[_Cow] = []
    for farm in range(cfg.n_farms):
        rng = farm_rngs[farm]
        herd_id = f"HERD{farm + 1:02d}"
        n_here = int((farm_of_cow == farm).sum())
        for k in range(n_here):
            cow_id = f"AU{farm + 1:02d}{k + 1:06d}"
            for _ in range(1000):
                z = {t: rng.standard_normal() for t in PLANTABLE}
                if linear_like:
                    for t, w in weights.items():
                        z[t] += cfg.farm_effect_sd * farm_z[farm] * math.copysign(1.0, w) / math.sqrt(len(weights))
                latest = {t: float(to_marginal(z[t], cfg.marginals[t])) for t in PLANTABLE}
                for t, d in _DECIMALS.items():
                    latest[t] = round(latest[t], d)
                tau = rng.standard_normal()
                e = rng.standard_normal()
                if linear_like:
                    signal = b0 + sum(coef[t] * latest[t] for t in coef)
                else:
                    m, q = cfg.interaction
                    s_std = (cfg.trend_weight * tau + cfg.interaction_weight * z[m] * z[q]
                             + sum(w * z[t] for t, w in weights.items()) + farm_offsets[farm]) / unit
                    signal = hl_stats.mean + hl_stats.sd * s_std
                hl = int(round(signal + noise * hl_stats.sd * e))
                if not hl_stats.lo <= hl <= hl_stats.hi:
                    continue
                if linear_like and noise == 0:
                    # shift the unrounded trait so hl is exactly affine in the features
                    latest[ADJUST_TRAIT] += (hl - signal) / coef[ADJUST_TRAIT]
                    s = cfg.marginals[ADJUST_TRAIT]
                    if not s.lo <= latest[ADJUST_TRAIT] <= s.hi:
                        continue
                    signal = float(hl)
                break
            else:
                raise RuntimeError("could not draw an in-range herd life; check the generator config")
            birth = first_birth + int(rng.integers(0, cfg.birth_span_days))
            z["tau"] = tau
            cow = _Cow(cow_id, farm, birth, hl, latest, z, signal)
            cows.append(cow)
            _emit_cow(cow, herd_id, cfg, rng, rows)

    tables = {}
    for kind, schema in TABLES.items():
        df = pd.DataFrame(rows[kind], columns=list(schema.columns))
        tables[kind] = df
    hl = np.array([c.hl for c in cows], dtype=np.float64)
    sig = np.array([c.signal for c in cows])
    ceiling = 1.0 - float(((hl - sig) ** 2).sum() / ((hl - hl.mean()) ** 2).sum())
    manifest = {
        "format": "herdlife-synth/1",
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "noise_scale": noise,
        "planted": {
            "signal_mode": cfg.signal_mode,
            "weights_sd_units": weights,
            "coefficients_raw": coef if linear_like else None,
            "intercept_raw": b0 if linear_like else None,
            "trend": None if linear_like else {"feature": cfg.trend_feature, "weight": cfg.trend_weight,
                                               "span": cfg.trend_span},
            "interaction": None if linear_like else {"features": list(cfg.interaction),
                                                     "weight": cfg.interaction_weight},
            "dominant_feature": cfg.dominant_feature if cfg.signal_mode == "dominant-feature" else None,
            "farm_offsets_sd_units": {f"HERD{i + 1:02d}": float(v) for i, v in enumerate(farm_offsets)},
            "noiseless_r2_ceiling": ceiling,
        },
        "interpreted_maxima": {"milk_305": cfg.marginals["milk_305"].hi, "scc": cfg.marginals["scc"].hi},
        "n_cows": len(cows),
    }
    return GeneratedData(tables, manifest)


def _records_count(cfg: GeneratorConfig, rng: np.random.Generator) -> int:
    mu = math.log(cfg.records_mean) - 0.5 * cfg.records_sigma**2
    n = int(round(math.exp(mu + cfg.records_sigma * rng.standard_normal())))
    return min(max(n, cfg.records_min), cfg.records_max)


def _emit_cow(cow: _Cow, herd: str, cfg: GeneratorConfig, rng: np.random.Generator,
              rows: dict[str, list[dict]]) -> None:
    m = cfg.marginals
    whid = cow.cow_id[-6:].lstrip("0") or "0"
    iso = lambda day: (dt.date(1970, 1, 1) + dt.timedelta(days=int(day))).isoformat()  # noqa: E731

    end = int(round(rng.uniform(cfg.obs_frac_lo, cfg.obs_frac_hi) * cow.hl))
    end = min(max(end, 2), cow.hl - 1)
    start = max(1, int(round(cfg.window_start * end)))
    n = min(_records_count(cfg, rng), end - start + 1)
    if n > 1:
        inner = np.sort(rng.choice(np.arange(start + 1, end), size=n - 2, replace=False)) if n > 2 \
            else np.array([], dtype=np.int64)
        ages = np.concatenate([[start], inner, [end]]).astype(np.int64)
    else:
        ages = np.array([end], dtype=np.int64)

    # lactation structure: the first record of the window is a calving
    afc = rng.normal(cfg.first_calving_age, 0.08 * cfg.first_calving_age)
    interval = max(0.5 * cfg.calving_interval, rng.normal(cfg.calving_interval, 0.1 * cfg.calving_interval))
    parity0 = int(min(12, 1 + max(0.0, ages[0] - afc) // interval))
    kinds = []
    next_calving = ages[0] + interval
    for i, a in enumerate(ages):
        if i == 0:
            kinds.append({"calving", "test"})
        elif a >= next_calving:
            kinds.append({"calving"})
            next_calving = a + interval
        else:
            u = rng.random()
            k = {"test"} if u < 0.78 else {"preg"} if u < 0.90 else {"health"}
            if "test" in k and rng.random() < 0.03:
                k.add("health")
            kinds.append(k)

    # lactation-level values per calving; the last calving carries the latest state
    calv_idx = [i for i, k in enumerate(kinds) if "calving" in k]
    lact_vals: list[dict[str, float]] = []
    for j, _ in enumerate(calv_idx):
        if j == len(calv_idx) - 1:
            lact_vals.append({t: cow.latest[t] for t in LACTATION_TRAITS})
        else:
            lv = {t: float(to_marginal(cow.latent[t] + 0.6 * rng.standard_normal(), m[t])) for t in LACTATION_TRAITS}
            for t in LACTATION_TRAITS:
                if t in _DECIMALS:
                    lv[t] = round(lv[t], _DECIMALS[t])
            lact_vals.append(lv)

    # test-day values, most recent test first in recency order
    test_idx = [i for i, k in enumerate(kinds) if "test" in k]
    n_tests = len(test_idx)
    test_vals: list[dict[str, float]] = [None] * n_tests  # type: ignore[list-item]
    trend = cfg.trend_feature if cfg.signal_mode == "nonlinear-sequential" else None
    for r in range(n_tests):
        pos = n_tests - 1 - r
        if r == 0:
            test_vals[pos] = {t: cow.latest[t] for t in TEST_TRAITS}
            continue
        tv = {}
        for t in TEST_TRAITS:
            zt = cow.latent[t] + 0.15 * rng.standard_normal()
            if t == trend:
                zt -= cfg.trend_step * cow.latent["tau"] * min(r, cfg.trend_span) / cfg.trend_span
            tv[t] = round(float(to_marginal(zt, m[t])), _DECIMALS[t])
        test_vals[pos] = tv
    if trend in ABV_TRAITS + LACTATION_TRAITS:
        raise ValueError("trend feature must be a test-day trait")

    sire = f"SIRE{rng.integers(1, 400):04d}"
    dam = f"AU{cow.farm + 1:02d}D{rng.integers(1, 10**6):06d}"
    rows["ds102"].append({
        "National Cow ID": cow.cow_id, "National Herd ID": herd, "Within-Herd Cow ID": whid,
        "Birth Date": iso(cow.birth), "Sire National ID": sire, "Dam National ID": dam,
        "Animal Termination Code": ["SOLD", "DIED", "CULL"][int(rng.integers(0, 3))],
        "Animal Termination Date": iso(cow.birth + cow.hl),
    })
    rows["ds202"].append({
        "National ID": cow.cow_id, "National Herd ID": herd, "Within-Herd Cow ID": whid,
        "Breed Of Cow": ["HOL", "JER", "HOLJER", "AYR", "GUE"][int(rng.integers(0, 5))],
        "Date Of Birth": iso(cow.birth), "Mammary System": cow.latest["mammary_system"],
        "Health Weighted Index": cow.latest["hwi"],
        "ABV Mastitis Resistance": cow.latest["abv_mastitis_resistance"],
        "Reliability Mastitis Resistance": int(rng.integers(30, 95)),
    })

    parity = parity0 - 1
    calving_day = None
    ci = ti = 0
    for i, (age, k) in enumerate(zip(ages, kinds)):
        day = cow.birth + int(age)
        if "calving" in k:
            parity = min(12, parity + 1)
            calving_day = day
            lv = lact_vals[ci]
            ci += 1
            milk305 = lv["milk_305"]
            fat305 = round(milk305 * 0.042, 1)
            prot305 = round(milk305 * 0.034, 1)
            rows["ds103"].append({
                "Milk Yield": round(milk305 * 1.05, 1), "Fat Yield": round(fat305 * 1.05, 1),
                "Total Solids 305": round(milk305 * 0.125, 1), "Milk 305": milk305, "Fat 305": fat305,
                "Protein 305": prot305, "Protein Yield": round(prot305 * 1.05, 1),
                "Lactose Yield": lv["lactose_yield"], "Solids Yield": round(milk305 * 0.13, 1),
                "PI Milk": int(rng.integers(60, 140)), "PI Fat": lv["pi_fat"],
                "PI Protein": int(rng.integers(60, 140)), "Custom PI": int(rng.integers(60, 140)),
                "National Cow ID": cow.cow_id, "National Herd ID": herd, "Within-Herd Cow ID": whid,
                "Calving Date": iso(day), "Calving Code": "N", "Parity": parity, "Termination Date": "",
                "Termination Code": "", "Num PI TEST": lv["num_pi_tests"],
                "Lactose 305": round(lv["lactose_yield"] * 0.98, 1),
            })
            rows["ds112"].append({
                "National Cow ID": cow.cow_id, "National Herd ID": herd, "Within-Herd Cow ID": whid,
                "Calving Date": iso(day), "Parity": parity, "Last Mating Date": iso(day - 282),
                "Litter Size": 1, "Calving Ease": int(rng.integers(1, 5)),
                "Sex Of Calf": "MF"[int(rng.integers(0, 2))], "Fate Of Calf": "R", "Size Of Calf": "M",
            })
        if "test" in k:
            tv = test_vals[ti]
            ti += 1
            rows["ds104"].append({
                "National Cow ID": cow.cow_id, "National Herd ID": herd, "Within-Herd Cow ID": whid,
                "Test Date": iso(day), "Fat Percentage": tv["milk_fat"],
                "Protein Percentage": round(float(rng.normal(3.3, 0.3)), 2),
                "Lactose Percentage": tv["lactose_percentage"], "Somatic Cell Count": tv["scc"],
                "Milk Yield": round(float(to_marginal(rng.standard_normal(), m["milk_yield"])), 1),
                "Calving Date": iso(calving_day) if calving_day is not None else "",
            })
        if "preg" in k:
            pregnant = rng.random() < 0.6
            result = int(round(float(to_marginal(rng.standard_normal(), cfg.days_pregnant)))) if pregnant else 0
            rows["ds108"].append({
                "National Cow Id": cow.cow_id, "National Herd Id": herd, "Within-Herd Cow Id": whid,
                "Date": iso(day), "Code": "PD", "Result": result,
                "Bull National Id": sire, "Technician Code": f"T{int(rng.integers(1, 20)):02d}",
            })
        if "health" in k:
            rows["ds116"].append({
                "National Cow ID": cow.cow_id, "National Herd ID": herd, "Date": iso(day),
                "Health Event Code": ["MAST", "LAME", "METR", "KETO"][int(rng.integers(0, 4))],
                "Health Treatment Code": ["AB", "NSAID", "NONE"][int(rng.integers(0, 3))],
                "Anatomical Position": ["LF", "RF", "LH", "RH", ""][int(rng.integers(0, 5))],
            })


# ---------------------------------------------------------------------------
# realised statistics


_TABLE_COLUMNS = {
    "lactation": ("ds103", "Parity"), "milk_yield": ("ds104", "Milk Yield"),
    "milk_fat": ("ds104", "Fat Percentage"), "lactose_percentage": ("ds104", "Lactose Percentage"),
    "milk_305": ("ds103", "Milk 305"), "lactose_yield": ("ds103", "Lactose Yield"),
    "pi_fat": ("ds103", "PI Fat"), "num_pi_tests": ("ds103", "Num PI TEST"),
    "scc": ("ds104", "Somatic Cell Count"), "hwi": ("ds202", "Health Weighted Index"),
    "mammary_system": ("ds202", "Mammary System"),
    "abv_mastitis_resistance": ("ds202", "ABV Mastitis Resistance"),
}


def _days(col: pd.Series) -> np.ndarray:
    return (pd.to_datetime(col, format="%Y-%m-%d") - pd.Timestamp("1970-01-01")).dt.days.to_numpy()


def record_ages(tables: dict[str, pd.DataFrame]) -> pd.DataFrame:
    """One row per distinct (cow, event date) with current life and herd life."""
    parts = []
    for kind in ("ds103", "ds104", "ds108", "ds112", "ds116"):
        s = TABLES[kind]
        df = tables[kind]
        if len(df):
            parts.append(pd.DataFrame({"cow": df[s.id_col].astype(str).to_numpy(),
                                       "day": _days(df[s.event_date])}))
    ev = pd.concat(parts).drop_duplicates()
    ped = tables["ds102"]
    birth = pd.Series(_days(ped["Birth Date"]), index=ped["National Cow ID"].astype(str))
    cull = pd.Series(_days(ped["Animal Termination Date"]), index=ped["National Cow ID"].astype(str))
    ev["cl"] = ev["day"].to_numpy() - birth.loc[ev["cow"]].to_numpy()
    ev["hl"] = (cull - birth).loc[ev["cow"]].to_numpy()
    return ev.sort_values(["cow", "day"]).reset_index(drop=True)


def marginal_report(tables: dict[str, pd.DataFrame], cfg: GeneratorConfig | None = None) -> dict:
    """Target versus realised statistics, record-count summary and CL/HL correlation."""
    cfg = cfg or default_config()
    out: dict = {"traits": {}}
    for name, (kind, col) in _TABLE_COLUMNS.items():
        x = pd.to_numeric(tables[kind][col], errors="coerce").dropna().to_numpy(dtype=np.float64)
        out["traits"][name] = _stat_row(cfg.marginals[name], x)
    ped = tables["ds102"]
    hl = (_days(ped["Animal Termination Date"]) - _days(ped["Birth Date"])).astype(np.float64)
    out["traits"]["hl"] = _stat_row(cfg.marginals["hl"], hl)

    ev = record_ages(tables)
    counts = ev.groupby("cow").size()
    out["records_per_cow"] = {
        "mean": float(counts.mean()), "min": int(counts.min()), "max": int(counts.max()),
        "frac_more_than_5": float((counts > 5).mean()), "total_records": int(len(ev)),
    }
    out["pearson_cl_hl"] = float(np.corrcoef(ev["cl"], ev["hl"])[0, 1])
    farms = ped.groupby("National Herd ID").apply(
        lambda g: float(np.mean(_days(g["Animal Termination Date"]) - _days(g["Birth Date"]))),
        include_groups=False)
    out["farm_mean_hl"] = {str(k): v for k, v in farms.items()}
    out["between_farm_var_hl"] = float(np.var(list(farms.values)))
    return out


def _stat_row(target: TraitStats, x: np.ndarray) -> dict:
    if not len(x):
        return {"target": dataclasses.asdict(target), "n": 0}
    real = {"mean": float(x.mean()), "sd": float(x.std()), "min": float(x.min()), "max": float(x.max())}
    return {"target": dataclasses.asdict(target), "realised": real, "n": int(len(x)),
            "mean_rel_dev": (real["mean"] - target.mean) / target.mean if target.mean else None,
            "sd_rel_dev": (real["sd"] - target.sd) / target.sd}
