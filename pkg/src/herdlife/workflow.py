"""End-to-end steps shared by the command line and the acceptance suite."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines as bl
from . import ingestion as ing
from . import metrics as mt
from . import sequencing as sq
from . import transformer as tf
from .checkpoint import CheckpointError, load_checkpoint
from .schemas import CLASS_NAMES, hl_to_class

MODELS = ("transformer", "ols", "glm", "rf")


@dataclass
class Prepared:
    train: list[ing.CowHistory]
    test: list[ing.CowHistory]
    standardizer: ing.Standardizer
    report: dict
    split_seed: int


def prepare(data_dir: str | Path, seed: int = 0, fraction: float = 0.8,
            standardizer: ing.Standardizer | None = None) -> Prepared:
    """Load, merge, clean, split by cow and standardise (fit on the training side)."""
    raw = ing.load_tables(data_dir)
    histories, report = ing.run_pipeline(raw)
    if len(histories) < 2:
        raise ing.DataError(f"{data_dir}: only {len(histories)} usable cows after cleansing")
    train, test = ing.split_by_cow(histories, fraction, seed)
    std = standardizer or ing.fit_standardizer(train)
    return Prepared(ing.apply_standardizer(std, train), ing.apply_standardizer(std, test), std, report, seed)


# ---------------------------------------------------------------------------
# training


@dataclass
class Trained:
    kind: str                 # transformer | ols | glm | rf
    task: str
    model: object
    history: list[dict] | None = None


def train_model(prep: Prepared, kind: str = "transformer", task: str = "regression", seq_len: int = 10,
                seed: int = 0, model_config: dict | None = None, forest_config: dict | None = None,
                l2_lambda: float = 1.0) -> Trained:
    if kind not in MODELS:
        raise ValueError(f"model must be one of {MODELS}")
    if task not in bl.TASKS:
        raise ValueError(f"task must be one of {bl.TASKS}")
    if kind in ("ols", "glm") and task != "regression":
        raise ValueError(f"{kind} only supports regression")
    if kind == "transformer":
        cfg = tf.ModelConfig(**{**(model_config or {}), "L": seq_len, "head": task, "seed": seed})
        samples = sq.build_sequences(prep.train, seq_len)
        fit, val = tf.validation_split(samples, seed=seed)
        model, history = tf.train(fit, val, cfg, seed=seed, standardizer=prep.standardizer.to_dict())
        model.meta["split_seed"] = prep.split_seed
        return Trained(kind, task, model, history)
    rows = bl.tabularize(prep.train)
    if kind == "ols":
        return Trained(kind, task, bl.ols_fit(rows))
    if kind == "glm":
        return Trained(kind, task, bl.glm_fit(rows, l2_lambda))
    fc = bl.ForestConfig(**{**(forest_config or {}), "seed": seed})
    return Trained(kind, task, bl.rf_fit(rows, fc, task))


def save_trained(t: Trained, prep: Prepared, path: str | Path, seed: int, seq_len: int) -> None:
    if t.kind == "transformer":
        tf.save(t.model, path)
        return
    bl.save_baseline(t.model, path, {"model": t.kind, "task": t.task, "seed": seed, "seq_len": seq_len,
                                     "split_seed": prep.split_seed, "standardizer": prep.standardizer.to_dict()})


def load_trained(path: str | Path) -> tuple[Trained, dict]:
    """Any checkpoint kind, plus the run metadata needed to rebuild its data split."""
    header, _ = load_checkpoint(path)
    if header.get("kind") == "transformer":
        model = tf.load(path)
        info = {"seed": model.meta.get("seed", 0), "split_seed": model.meta.get("split_seed", 0),
                "seq_len": model.config.L, "standardizer": model.standardizer}
        return Trained("transformer", model.config.head, model), info
    model, header = bl.load_baseline(path)
    return Trained(header["model"], header["task"], model), header


# ---------------------------------------------------------------------------
# prediction and evaluation


@dataclass
class Predictions:
    cow_ids: list[str]
    hl_days: np.ndarray | None = None
    classes: np.ndarray | None = None
    probabilities: np.ndarray | None = None


def predict(t: Trained, histories: Sequence[ing.CowHistory], seq_len: int) -> Predictions:
    ids = [h.cow_id for h in histories]
    if t.kind == "transformer":
        samples = sq.build_sequences(histories, seq_len)
        if t.task == "regression":
            return Predictions(ids, hl_days=tf.predict_hl(samples, t.model))
        cls, probs = tf.predict_class(samples, t.model)
        return Predictions(ids, classes=cls, probabilities=probs)
    X = bl.design(bl.tabularize(histories))[0]
    if t.kind in ("ols", "glm"):
        return Predictions(ids, hl_days=t.model.predict(X))
    if t.task == "regression":
        return Predictions(ids, hl_days=bl.rf_predict(t.model, X))
    probs = bl.rf_vote_fractions(t.model, X)
    return Predictions(ids, classes=probs.argmax(axis=1), probabilities=probs)


def evaluate_predictions(histories: Sequence[ing.CowHistory], pred: Predictions, p: int | None = 16
                         ) -> tuple[mt.EvalReport, dict[str, mt.EvalReport]]:
    farms = mt.per_farm_report(histories, {"hl_days": pred.hl_days, "class": pred.classes}, p)
    overall = dataclasses.replace(farms["overall"], per_farm={k: v for k, v in farms.items() if k != "overall"})
    return overall, farms


def write_predictions_csv(pred: Predictions, path: str | Path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cow_id", "predicted_hl_days", "predicted_class"] + [f"p_{c}" for c in CLASS_NAMES])
        for i, cow in enumerate(pred.cow_ids):
            days = "" if pred.hl_days is None else repr(float(pred.hl_days[i]))
            if pred.classes is not None:
                cls = CLASS_NAMES[int(pred.classes[i])]
            else:
                cls = CLASS_NAMES[hl_to_class(max(0.0, float(pred.hl_days[i])))]
            probs = [""] * 3 if pred.probabilities is None else [repr(float(v)) for v in pred.probabilities[i]]
            w.writerow([cow, days, cls] + probs)


# ---------------------------------------------------------------------------
# model comparison


COMPARE_MODELS = (("transformer", "regression"), ("ols", "regression"), ("glm", "regression"),
                  ("rf", "regression"), ("transformer", "classification"), ("rf", "classification"))


def compare(prep: Prepared, seed: int = 0, seq_len: int = 10, model_config: dict | None = None,
            forest_config: dict | None = None) -> tuple[list[dict], dict[str, mt.EvalReport]]:
    """Fit every model on the same split; one row per (model, task) with R² or accuracy."""
    rows, reports = [], {}
    for kind, task in COMPARE_MODELS:
        t = train_model(prep, kind, task, seq_len, seed, model_config, forest_config)
        pred = predict(t, prep.test, seq_len)
        rep, _ = evaluate_predictions(prep.test, pred, p=None if kind == "transformer" else 16)
        name = f"{kind}-{task}"
        reports[name] = rep
        rows.append({"model": kind, "task": task, "r2": rep.r2, "mae_days": rep.mae_days,
                     "accuracy": rep.accuracy,
                     "crit_mis_low_as_high_rate": rep.crit_mis.low_as_high_rate if rep.crit_mis else None})
    return rows, reports


def dump_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


__all__ = ["Prepared", "Trained", "Predictions", "prepare", "train_model", "save_trained", "load_trained",
           "predict", "evaluate_predictions", "write_predictions_csv", "compare", "dump_json", "MODELS",
           "CheckpointError"]
