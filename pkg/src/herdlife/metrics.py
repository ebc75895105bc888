"""Regression and 3-class evaluation, per-farm reports and the sequence-length sweep."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .schemas import CLASS_NAMES, N_FEATURES

log = logging.getLogger(__name__)


def _pair(actual, predicted) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(actual, dtype=np.float64).ravel()
    p = np.asarray(predicted, dtype=np.float64).ravel()
    if a.shape != p.shape:
        raise ValueError(f"length mismatch: {a.size} actual vs {p.size} predicted")
    return a, p


def r2(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    if a.size < 2:
        raise ValueError("R² needs at least 2 samples")
    ss_tot = float(((a - a.mean()) ** 2).sum())
    if ss_tot == 0:
        raise ValueError("R² is undefined for constant actual values")
    return 1.0 - float(((a - p) ** 2).sum()) / ss_tot


def r2_adjusted(actual, predicted, p: int = N_FEATURES) -> float:
    n = np.asarray(actual).size
    if n <= p + 1:
        raise ValueError(f"adjusted R² needs n > p + 1 (n={n}, p={p})")
    return 1.0 - (1.0 - r2(actual, predicted)) * (n - 1) / (n - p - 1)


def mae(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    if a.size == 0:
        raise ValueError("MAE needs at least one sample")
    return float(np.abs(a - p).mean())


def pearson(x, y) -> float:
    a, b = _pair(x, y)
    a, b = a - a.mean(), b - b.mean()
    den = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if den == 0:
        raise ValueError("pearson is undefined when either input is constant")
    return max(-1.0, min(1.0, float((a * b).sum()) / den))


# ---------------------------------------------------------------------------
# classification


@dataclass(frozen=True)
class ConfusionMatrix3:
    counts: np.ndarray   # rows actual, columns predicted

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.shape != (3, 3) or (c < 0).any() or not np.issubdtype(c.dtype, np.integer):
            raise ValueError("a confusion matrix is a 3x3 array of non-negative integers")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_rows(self) -> list[dict]:
        return [{"actual": CLASS_NAMES[i], **{CLASS_NAMES[j]: int(self.counts[i, j]) for j in range(3)}}
                for i in range(3)]


def confusion(actual, predicted) -> ConfusionMatrix3:
    a = np.asarray(actual).ravel()
    p = np.asarray(predicted).ravel()
    if a.shape != p.shape:
        raise ValueError("label lists differ in length")
    for v in (a, p):
        if v.size and (not np.all(np.isin(v, (0, 1, 2)))):
            raise ValueError(f"unknown class label in {sorted(set(v.tolist()) - {0, 1, 2})}")
    counts = np.zeros((3, 3), dtype=np.int64)
    np.add.at(counts, (a.astype(np.int64), p.astype(np.int64)), 1)
    return ConfusionMatrix3(counts)


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int
    flags: tuple[str, ...] = ()


def prf1(cm: ConfusionMatrix3) -> dict[str, ClassScores]:
    """Per-class precision/recall/F1; an undefined ratio is reported as 0 and flagged."""
    c = cm.counts
    out = {}
    for k, name in enumerate(CLASS_NAMES):
        tp, predicted, support = c[k, k], c[:, k].sum(), c[k, :].sum()
        flags = []
        if predicted == 0:
            flags.append("precision_undefined")
        if support == 0:
            flags.append("recall_undefined")
        p = tp / predicted if predicted else 0.0
        r = tp / support if support else 0.0
        out[name] = ClassScores(float(p), float(r), f1_score(p, r), int(support), tuple(flags))
    return out


def accuracy(cm: ConfusionMatrix3) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


@dataclass(frozen=True)
class CritMis:
    low_as_high: int
    high_as_low: int
    low_as_high_rate: float
    high_as_low_rate: float


def crit_mis(cm: ConfusionMatrix3) -> CritMis:
    c = cm.counts
    n_low, n_high = c[0].sum(), c[2].sum()
    return CritMis(int(c[0, 2]), int(c[2, 0]), float(c[0, 2] / n_low) if n_low else 0.0,
                   float(c[2, 0] / n_high) if n_high else 0.0)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    n: int
    r2: float | None = None
    r2_adjusted: float | None = None
    mae_days: float | None = None
    accuracy: float | None = None
    per_class: dict[str, ClassScores] | None = None
    crit_mis: CritMis | None = None
    confusion: list[list[int]] | None = None
    per_farm: dict[str, "EvalReport"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"n": self.n, "r2": self.r2, "r2_adjusted": self.r2_adjusted, "mae_days": self.mae_days,
             "accuracy": self.accuracy, "confusion": self.confusion,
             "per_class": None if self.per_class is None else
             {k: dataclasses.asdict(v) for k, v in self.per_class.items()},
             "crit_mis": None if self.crit_mis is None else dataclasses.asdict(self.crit_mis)}
        if self.per_farm:
            d["per_farm"] = {k: v.to_dict() for k, v in self.per_farm.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(actual_days=None, predicted_days=None, actual_class=None, predicted_class=None,
             p: int | None = N_FEATURES) -> EvalReport:
    """Regression part when days are given, classification part when classes are given."""
    n = None
    rep = EvalReport(n=0)
    if predicted_days is not None:
        a, pr = _pair(actual_days, predicted_days)
        n = a.size
        rep.mae_days = mae(a, pr)
        if a.size >= 2 and a.std() > 0:
            rep.r2 = r2(a, pr)
            if p is not None and a.size > p + 1:
                rep.r2_adjusted = r2_adjusted(a, pr, p)
    if predicted_class is not None:
        cm = confusion(actual_class, predicted_class)
        n = cm.total
        rep.accuracy = accuracy(cm) if cm.total else None
        rep.per_class = prf1(cm)
        rep.crit_mis = crit_mis(cm)
        rep.confusion = cm.counts.tolist()
    if n is None:
        raise ValueError("nothing to evaluate")
    rep.n = int(n)
    return rep


def per_farm_report(samples: Sequence, predictions: Mapping[str, np.ndarray], p: int | None = N_FEATURES
                    ) -> dict[str, EvalReport]:
    """Reports per farm plus an ``overall`` entry.

    ``samples`` need farm_id, hl_days and hl_class; ``predictions`` may hold
    ``hl_days`` and/or ``class`` arrays aligned with them.
    """
    if not samples:
        raise ValueError("no samples")
    farms = np.array([s.farm_id for s in samples])
    days = np.array([s.hl_days for s in samples], dtype=np.float64)
    cls = np.array([s.hl_class for s in samples], dtype=np.int64)
    pd_ = predictions.get("hl_days")
    pc = predictions.get("class")
    if pd_ is None and pc is None:
        raise ValueError("predictions need 'hl_days' and/or 'class'")

    def rep(sel):
        return evaluate(days[sel], None if pd_ is None else np.asarray(pd_)[sel],
                        cls[sel], None if pc is None else np.asarray(pc)[sel], p)

    out = {str(f): rep(farms == f) for f in sorted(set(farms.tolist()))}
    out["overall"] = rep(np.ones(len(samples), dtype=bool))
    return out


PER_FARM_COLUMNS = ("farm", "n", "r2", "mae_days", "accuracy")


def write_per_farm_csv(report: Mapping[str, EvalReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PER_FARM_COLUMNS)
        for farm, r in report.items():
            w.writerow([farm, r.n] + ["" if v is None else repr(v) for v in (r.r2, r.mae_days, r.accuracy)])


def write_confusion_csv(cm: ConfusionMatrix3 | list, path: str | Path) -> None:
    counts = cm.counts if isinstance(cm, ConfusionMatrix3) else np.asarray(cm)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("actual",) + CLASS_NAMES)
        for i, name in enumerate(CLASS_NAMES):
            w.writerow([name] + [int(v) for v in counts[i]])


def read_csv_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# sequence-length sweep


SWEEP_COLUMNS = ("train_L", "eval_k", "r2", "n_test", "status")


def length_sweep(train_histories: Sequence, test_histories: Sequence, L_values: Iterable[int] = (5, 10, 20, 40),
                 eval_k_grid: Iterable[int] = (1, 5, 10, 20, 40), config=None, seed: int = 0,
                 val_fraction: float = 0.125) -> list[dict]:
    """Train one regression model per L and score it on latest-k views for every k <= L.

    A failed training run is reported on its rows and the other lengths continue.
    """
    from . import sequencing as sq
    from . import transformer as tf

    base = config or tf.ModelConfig()
    rows = []
    for L in L_values:
        cfg = dataclasses.replace(base, L=L, head="regression")
        ks = [k for k in eval_k_grid if k <= L]
        try:
            train = sq.build_sequences(train_histories, L)
            test = sq.build_sequences(test_histories, L)
            fit, val = tf.validation_split(train, val_fraction, seed)
            model, _ = tf.train(fit, val, cfg, seed=seed)
        except (tf.TrainingDiverged, ValueError) as e:
            log.warning("sweep L=%d failed: %s", L, e)
            rows += [{"train_L": L, "eval_k": k, "r2": math.nan, "n_test": 0, "status": f"failed: {e}"}
                     for k in ks]
            continue
        actual = np.array([s.hl_days for s in test])
        for k in ks:
            pred = tf.predict_hl([sq.latest_k_view(s, k) for s in test], model)
            rows.append({"train_L": L, "eval_k": k, "r2": r2(actual, pred), "n_test": len(test), "status": "ok"})
    return rows


def write_sweep_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "r2": repr(r["r2"])})
