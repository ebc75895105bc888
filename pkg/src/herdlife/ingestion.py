"""Raw table loading, merge on national cow ID, targets, cleansing and scaling.

The pipeline runs ``load_tables -> merge_on_nid -> assign_targets ->
binarize_events -> clean -> attach_features``; :func:`run_pipeline` chains
them and collects one report dict with a count for every rule that fired.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd

from .schemas import (CONTINUOUS, DAYS_PREGNANT, EVENT_PRIORITY, FEATURE_SOURCES, FEATURES, HL_MAX_DAYS, HL_MIN_DAYS,
                      N_FEATURES, TABLES, TableSchema, feature_bounds, hl_to_class)

log = logging.getLogger(__name__)

EPOCH = dt.date(1970, 1, 1)


class DataError(Exception):
    """Input data cannot be used (missing file, bad header, too many bad rows)."""


class SchemaError(DataError):
    pass


def to_day(d: dt.date) -> int:
    return (d - EPOCH).days


def from_day(n: int) -> dt.date:
    return EPOCH + dt.timedelta(days=int(n))


# ---------------------------------------------------------------------------
# loading


@dataclass
class LoadedTable:
    kind: str
    rows: pd.DataFrame
    rejects: list[tuple[int, str]] = field(default_factory=list)


@dataclass
class RawTables:
    tables: dict[str, LoadedTable]

    def __getitem__(self, kind: str) -> pd.DataFrame:
        return self.tables[kind].rows

    def __contains__(self, kind: str) -> bool:
        return kind in self.tables

    def reject_counts(self) -> dict[str, int]:
        return {k: len(t.rejects) for k, t in sorted(self.tables.items())}


def _parse_dates(col: pd.Series) -> tuple[pd.Series, pd.Series]:
    """Return (days since epoch as float with NaN, bad-mask)."""
    s = col.str.strip()
    empty = s == ""
    parsed = pd.to_datetime(s.where(~empty), format="%Y-%m-%d", errors="coerce")
    bad = parsed.isna() & ~empty
    days = (parsed - pd.Timestamp("1970-01-01")).dt.days.astype("float64")
    return days, bad


def load_table(path: str | Path, kind: str) -> LoadedTable:
    """Read one source CSV, typing dates and numbers.

    Rows with an empty cow ID, a missing event date or any unparseable
    date/number are rejected and listed (1-based file line, reason).
    """
    if kind not in TABLES:
        raise ValueError(f"unknown table kind {kind!r}")
    schema = TABLES[kind]
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    if tuple(df.columns) != schema.columns:
        raise SchemaError(f"{path.name}: header does not match {kind} layout")

    bad_reason = pd.Series("", index=df.index, dtype=object)

    def flag(mask: pd.Series, reason: str) -> None:
        hit = mask & (bad_reason == "")
        bad_reason[hit] = reason

    flag(df[schema.id_col].str.strip() == "", "empty cow id")
    out = df.copy()
    for col in schema.date_cols:
        days, bad = _parse_dates(df[col])
        flag(bad, f"bad date in {col!r}")
        out[col] = days
    if schema.event_date is not None:
        flag(out[schema.event_date].isna(), f"missing {schema.event_date!r}")
    for col in schema.numeric_cols:
        s = df[col].str.strip()
        num = pd.to_numeric(s.where(s != ""), errors="coerce")
        flag(num.isna() & (s != ""), f"bad number in {col!r}")
        out[col] = num.astype("float64")
    out[schema.id_col] = df[schema.id_col].str.strip()

    bad = bad_reason != ""
    rejects = [(int(i) + 2, str(r)) for i, r in bad_reason[bad].items()]
    if len(df) and len(rejects) > 0.5 * len(df):
        raise DataError(f"{path.name}: {len(rejects)} of {len(df)} rows unparseable")
    if rejects:
        log.warning("%s: rejected %d rows", path.name, len(rejects))
    return LoadedTable(kind, out[~bad].reset_index(drop=True), rejects)


def load_tables(directory: str | Path) -> RawTables:
    """Load every ``dsNNN.csv`` in ``directory``; only the pedigree is mandatory."""
    directory = Path(directory)
    tables = {}
    for kind in TABLES:
        path = directory / TABLES[kind].filename
        if kind != "ds102" and not path.exists():
            log.warning("no %s in %s; treating as empty", path.name, directory)
            continue
        tables[kind] = load_table(path, kind)
    return RawTables(tables)


# ---------------------------------------------------------------------------
# merged histories


@dataclass
class Record:
    day: int                               # days since epoch
    sources: tuple[str, ...]               # contributing tables, merge-priority order
    raw: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)


@dataclass
class CowHistory:
    cow_id: str
    farm_id: str
    birth_day: int
    culling_day: int | None
    records: list[Record] = field(default_factory=list)
    hl_days: int | None = None
    hl_class: int | None = None
    age_at_first_calving_days: int | None = None
    raw_features: np.ndarray | None = None      # (n, 16), NaN = missing
    features: np.ndarray | None = None          # standardised, missing filled with 0

    @property
    def n_records(self) -> int:
        return len(self.records)

    @property
    def record_days(self) -> np.ndarray:
        return np.array([r.day for r in self.records], dtype=np.int64)


def _rows_by_cow(df: pd.DataFrame, schema: TableSchema) -> dict[str, list[dict]]:
    out: dict[str, list[dict]] = {}
    for order, row in enumerate(df.to_dict("records")):
        row["_order"] = order
        out.setdefault(row[schema.id_col], []).append(row)
    return out


def _num(v) -> float:
    return float(v) if v is not None and not (isinstance(v, float) and math.isnan(v)) else math.nan


def merge_on_nid(raw: RawTables, carry_forward: bool = True) -> tuple[dict[str, CowHistory], dict]:
    """Assemble one date-ordered history per pedigree cow.

    Rows of the event tables are grouped by (cow, date); each group becomes
    one record. Same-date rows are ordered by table priority then input
    order, and the first value seen for a raw column wins. With
    ``carry_forward`` lactation-level and test-day measurements persist
    until the next row of their table replaces them; otherwise a feature
    only has a value on dates where its table has a row.
    """
    if "ds102" not in raw:
        raise DataError("pedigree table (ds102) is required")
    ped = raw["ds102"]
    report = {"cows_in_pedigree": 0, "cows_without_birth_date": 0, "duplicate_pedigree_rows": 0,
              "event_rows_unknown_cow": 0}

    events: dict[str, dict[str, list[dict]]] = {}
    for kind in EVENT_PRIORITY:
        if kind in raw:
            events[kind] = _rows_by_cow(raw[kind], TABLES[kind])
    abv: dict[str, dict] = {}
    if "ds202" in raw:
        for row in raw["ds202"].to_dict("records"):
            abv.setdefault(row["National ID"], row)

    histories: dict[str, CowHistory] = {}
    for row in ped.to_dict("records"):
        cow = row["National Cow ID"]
        if cow in histories:
            report["duplicate_pedigree_rows"] += 1
            continue
        report["cows_in_pedigree"] += 1
        birth = row["Birth Date"]
        if isinstance(birth, float) and math.isnan(birth):
            report["cows_without_birth_date"] += 1
            continue
        cull = row["Animal Termination Date"]
        cull = None if isinstance(cull, float) and math.isnan(cull) else int(cull)
        rows = []
        for prio, kind in enumerate(EVENT_PRIORITY):
            schema = TABLES[kind]
            for r in events.get(kind, {}).get(cow, ()):
                rows.append((int(r[schema.event_date]), prio, r["_order"], kind, r))
        rows.sort(key=lambda t: t[:3])
        h = CowHistory(cow, str(row["National Herd ID"]), int(birth), cull)
        h.records = _assemble(rows, int(birth), abv.get(cow), carry_forward)
        calvings = [t[0] for t in rows if t[3] in ("ds103", "ds112")]
        if calvings:
            h.age_at_first_calving_days = min(calvings) - int(birth)
        histories[cow] = h

    known = set(ped["National Cow ID"])
    for kind, by_cow in events.items():
        report["event_rows_unknown_cow"] += sum(len(v) for c, v in by_cow.items() if c not in known)
    return histories, report


_LACTATION_FIELDS = ("milk_305", "lactose_yield", "pi_fat", "num_pi_tests")
_TEST_FIELDS = ("milk_fat", "lactose_percentage", "scc")
_ABV_FIELDS = ("mammary_system", "hwi", "abv_mastitis_resistance")


def _assemble(rows: list[tuple], birth: int, abv_row: dict | None, carry_forward: bool) -> list[Record]:
    static = {f: _num(abv_row[FEATURE_SOURCES[f][1]]) if abv_row else math.nan for f in _ABV_FIELDS}
    state = {f: math.nan for f in _LACTATION_FIELDS + _TEST_FIELDS}
    parity = 0.0
    preg_result, preg_day, last_calving = math.nan, None, None

    records: list[Record] = []
    i = 0
    while i < len(rows):
        day = rows[i][0]
        group = []
        while i < len(rows) and rows[i][0] == day:
            group.append(rows[i])
            i += 1
        sources = tuple(dict.fromkeys(g[3] for g in group))
        merged: dict = {}
        for _, _, _, kind, r in group:
            for k, v in r.items():
                if k != "_order" and k not in merged:
                    merged[k] = v

        today = {f: math.nan for f in _LACTATION_FIELDS + _TEST_FIELDS}
        day_parity = math.nan
        day_preg = math.nan
        for _, _, _, kind, r in group:
            if kind == "ds103":
                for f in _LACTATION_FIELDS:
                    if math.isnan(today[f]):
                        today[f] = _num(r[FEATURE_SOURCES[f][1]])
            if kind == "ds104":
                for f in _TEST_FIELDS:
                    if math.isnan(today[f]):
                        today[f] = _num(r[FEATURE_SOURCES[f][1]])
            if kind in ("ds103", "ds112") and math.isnan(day_parity):
                day_parity = _num(r["Parity"])
            if kind == "ds108" and math.isnan(day_preg):
                day_preg = _num(r["Result"])
        if "ds103" in sources or "ds112" in sources:
            last_calving = day

        values = {"current_life_days": float(day - birth)}
        if carry_forward:
            for f, v in today.items():
                if not math.isnan(v):
                    state[f] = v
            if not math.isnan(day_parity):
                parity = max(parity, day_parity)
            if not math.isnan(day_preg):
                preg_result, preg_day = day_preg, day
            values.update(state)
            values["lactation"] = parity
            carried = preg_result + (day - preg_day) if preg_day is not None else math.nan
            # a carried pregnancy ends at the next calving or once past any plausible gestation
            if (preg_result > 0 and carried <= DAYS_PREGNANT.hi
                    and (last_calving is None or last_calving <= preg_day)):
                values["days_pregnant"] = carried
            else:
                values["days_pregnant"] = 0.0
        else:
            values.update(today)
            values["lactation"] = day_parity
            values["days_pregnant"] = day_preg
        values.update(static)
        records.append(Record(day, sources, merged, values))
    return records


# ---------------------------------------------------------------------------
# targets


def compute_hl_days(birth: dt.date | int, culling: dt.date | int) -> int:
    """Whole calendar days from birth to culling."""
    b = to_day(birth) if isinstance(birth, dt.date) else int(birth)
    c = to_day(culling) if isinstance(culling, dt.date) else int(culling)
    if c < b:
        raise ValueError("culling date precedes birth date")
    return c - b


def pl_from_hl(hl_days: int, age_at_first_calving_days: int) -> int:
    """Productive life: herd life minus age at first calving."""
    if not 0 <= age_at_first_calving_days <= hl_days:
        raise ValueError("need 0 <= age at first calving <= herd life")
    return hl_days - age_at_first_calving_days


def assign_targets(histories: dict[str, CowHistory], require_target: bool = True
                   ) -> tuple[dict[str, CowHistory], dict]:
    """Attach herd life and class; cows still in the herd are dropped unless ``require_target`` is off."""
    report = {"cows_without_culling_date": 0, "cows_culled_before_birth": 0}
    out = {}
    for cow, h in histories.items():
        if h.culling_day is None:
            report["cows_without_culling_date"] += 1
            if not require_target:
                out[cow] = h
            continue
        try:
            hl = compute_hl_days(h.birth_day, h.culling_day)
        except ValueError:
            report["cows_culled_before_birth"] += 1
            continue
        out[cow] = replace(h, hl_days=hl, hl_class=hl_to_class(hl))
    return out, report


def binarize_events(history: CowHistory) -> CowHistory:
    """Set the test / breeding / treatment indicator of each record from its sources."""
    for r in history.records:
        r.values["tested_flag"] = 1.0 if "ds104" in r.sources else 0.0
        r.values["bred_flag"] = 1.0 if "ds108" in r.sources else 0.0
        r.values["treated_flag"] = 1.0 if "ds116" in r.sources else 0.0
    return history


# ---------------------------------------------------------------------------
# cleansing and projection


def clean(histories: dict[str, CowHistory]) -> tuple[dict[str, CowHistory], dict]:
    """Drop out-of-range herd lives and impossible records; blank out-of-range values."""
    report: dict = {"cows_hl_below_min": 0, "cows_hl_above_max": 0, "cows_without_records": 0,
                    "records_before_birth": 0, "records_after_culling": 0,
                    "values_out_of_range": {f: 0 for f in CONTINUOUS}}
    out = {}
    for cow, h in histories.items():
        alive = h.hl_days is None
        if not alive and h.hl_days < HL_MIN_DAYS:
            report["cows_hl_below_min"] += 1
            continue
        if not alive and h.hl_days > HL_MAX_DAYS:
            report["cows_hl_above_max"] += 1
            continue
        kept = []
        for r in h.records:
            cl = r.values["current_life_days"]
            if cl < 0:
                report["records_before_birth"] += 1
                continue
            if not alive and cl > h.hl_days:
                report["records_after_culling"] += 1
                continue
            for f in CONTINUOUS:
                v = r.values.get(f, math.nan)
                b = feature_bounds(f)
                if b is not None and not math.isnan(v) and not b[0] <= v <= b[1]:
                    r.values[f] = math.nan
                    report["values_out_of_range"][f] += 1
            kept.append(r)
        if not kept:
            report["cows_without_records"] += 1
            continue
        out[cow] = replace(h, records=kept)
    if not out:
        log.warning("cleansing removed every cow")
    return out, report


def select_features(record: Record) -> np.ndarray:
    """Project a record onto the 16 model features (NaN where missing)."""
    return np.array([float(record.values.get(f, math.nan)) for f in FEATURES], dtype=np.float64)


def attach_features(histories: dict[str, CowHistory]) -> dict[str, CowHistory]:
    for h in histories.values():
        h.raw_features = np.vstack([select_features(r) for r in h.records]) if h.records \
            else np.zeros((0, N_FEATURES))
    return histories


def run_pipeline(raw: RawTables, carry_forward: bool = True, require_target: bool = True
                 ) -> tuple[list[CowHistory], dict]:
    """Merge, target, flag, clean and project; histories come back sorted by cow ID.

    With ``require_target`` off, cows without a culling date are kept (with
    no herd life) so that predictions can be made for them.
    """
    merged, rep_merge = merge_on_nid(raw, carry_forward=carry_forward)
    targeted, rep_targets = assign_targets(merged, require_target)
    for h in targeted.values():
        binarize_events(h)
    cleaned, rep_clean = clean(targeted)
    attach_features(cleaned)
    report = {"load_rejects": raw.reject_counts(), **rep_merge, **rep_targets, **rep_clean,
              "cows_out": len(cleaned), "records_out": sum(h.n_records for h in cleaned.values())}
    return [cleaned[c] for c in sorted(cleaned)], report


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# scaling


_CONT_IDX = np.array([FEATURES.index(f) for f in CONTINUOUS])


@dataclass
class Standardizer:
    mean: np.ndarray
    sd: np.ndarray

    def to_dict(self) -> dict:
        return {"features": list(CONTINUOUS), "mean": self.mean.tolist(), "sd": self.sd.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        if tuple(d["features"]) != CONTINUOUS:
            raise ValueError("standardizer feature list does not match this build")
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["sd"], dtype=np.float64))

    def transform(self, raw: np.ndarray) -> np.ndarray:
        out = np.array(raw, dtype=np.float64, copy=True)
        out[:, _CONT_IDX] = (out[:, _CONT_IDX] - self.mean) / self.sd
        return np.where(np.isnan(out), 0.0, out)


def fit_standardizer(train: Iterable[CowHistory]) -> Standardizer:
    """Per-feature mean and (population) sd over every training record."""
    mats = [h.raw_features for h in train if h.raw_features is not None and len(h.raw_features)]
    if not mats:
        raise ValueError("no training records to fit a standardizer")
    x = np.vstack(mats)[:, _CONT_IDX]
    mean = np.nanmean(x, axis=0)
    sd = np.nanstd(x, axis=0)
    bad = [CONTINUOUS[i] for i in np.flatnonzero(~(sd > 0))]
    if bad:
        raise ValueError(f"constant or empty feature(s) in training data: {', '.join(bad)}")
    return Standardizer(mean, sd)


def apply_standardizer(std: Standardizer, histories: Iterable[CowHistory]) -> list[CowHistory]:
    return [replace(h, features=std.transform(h.raw_features)) for h in histories]


# ---------------------------------------------------------------------------
# splitting


def split_by_cow(histories: list[CowHistory], fraction: float = 0.8,
                 seed: int = 0) -> tuple[list[CowHistory], list[CowHistory]]:
    """Farm-stratified, cow-level split; each farm contributes round(fraction * n)."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    if len(histories) < 2:
        raise ValueError("need at least two cows to split")
    rng = np.random.default_rng(seed)
    by_farm: dict[str, list[CowHistory]] = {}
    for h in sorted(histories, key=lambda h: h.cow_id):
        by_farm.setdefault(h.farm_id, []).append(h)
    train, test = [], []
    for farm in sorted(by_farm):
        cows = by_farm[farm]
        order = rng.permutation(len(cows))
        k = int(math.floor(fraction * len(cows) + 0.5))
        train += [cows[i] for i in order[:k]]
        test += [cows[i] for i in order[k:]]
    if not test:
        test.append(train.pop())
    if not train:
        train.append(test.pop())
    return sorted(train, key=lambda h: h.cow_id), sorted(test, key=lambda h: h.cow_id)


# ---------------------------------------------------------------------------
# merged-history dump


DUMP_COLUMNS = ("cow_id", "farm_id", "birth_date", "culling_date", "hl_days", "record_date", "sources") + FEATURES


def write_histories_csv(histories: Iterable[CowHistory], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DUMP_COLUMNS)
        for h in histories:
            for r, row in zip(h.records, h.raw_features):
                cull = "" if h.culling_day is None else from_day(h.culling_day).isoformat()
                w.writerow([h.cow_id, h.farm_id, from_day(h.birth_day).isoformat(), cull,
                            "" if h.hl_days is None else h.hl_days, from_day(r.day).isoformat(),
                            "+".join(r.sources)] + ["" if math.isnan(v) else repr(float(v)) for v in row])


def read_histories_csv(path: str | Path) -> list[CowHistory]:
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    if tuple(df.columns) != DUMP_COLUMNS:
        raise SchemaError(f"{path}: not a merged-history dump")
    out: dict[str, CowHistory] = {}
    for row in df.to_dict("records"):
        h = out.get(row["cow_id"])
        if h is None:
            birth = to_day(dt.date.fromisoformat(row["birth_date"]))
            cull = to_day(dt.date.fromisoformat(row["culling_date"])) if row["culling_date"] else None
            hl = int(row["hl_days"]) if row["hl_days"] else None
            h = out[row["cow_id"]] = CowHistory(row["cow_id"], row["farm_id"], birth, cull, hl_days=hl,
                                                hl_class=None if hl is None else hl_to_class(hl))
        values = {f: float(row[f]) if row[f] != "" else math.nan for f in FEATURES}
        h.records.append(Record(to_day(dt.date.fromisoformat(row["record_date"])),
                                tuple(row["sources"].split("+")) if row["sources"] else (), {}, values))
    attach_features(out)
    return [out[c] for c in sorted(out)]
