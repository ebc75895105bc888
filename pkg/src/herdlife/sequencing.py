"""Fixed-length, pre-padded record sequences (latest records kept)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .ingestion import CowHistory
from .schemas import FEATURES, N_FEATURES

DEFAULT_L = 10
SWEEP_LENGTHS = (5, 10, 20, 40)


@dataclass(frozen=True)
class SequenceSample:
    features: np.ndarray   # (L, 16); rows with mask 0 are zero
    mask: np.ndarray       # (L,) int8, contiguous suffix of ones
    hl_days: float         # NaN / -1 for cows without a known herd life
    hl_class: int
    cow_id: str
    farm_id: str

    @property
    def length(self) -> int:
        return self.mask.shape[0]

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


def build_sequence(history: CowHistory, L: int = DEFAULT_L) -> SequenceSample:
    if L < 1:
        raise ValueError(f"sequence length must be >= 1, got {L}")
    if not history.records:
        raise ValueError(f"cow {history.cow_id} has no records")
    if history.features is None:
        raise ValueError(f"cow {history.cow_id} has no standardised features")
    order = np.argsort(history.record_days, kind="stable")
    kept = history.features[order][-L:]
    n = kept.shape[0]
    feats = np.zeros((L, N_FEATURES))
    feats[L - n:] = kept
    mask = np.zeros(L, dtype=np.int8)
    mask[L - n:] = 1
    hl = math.nan if history.hl_days is None else float(history.hl_days)
    cls = -1 if history.hl_class is None else int(history.hl_class)
    return SequenceSample(feats, mask, hl, cls, history.cow_id, history.farm_id)


def build_sequences(histories: Iterable[CowHistory], L: int = DEFAULT_L) -> list[SequenceSample]:
    return [build_sequence(h, L) for h in histories]


def latest_k_view(sample: SequenceSample, k: int) -> SequenceSample:
    """Keep only the k most recent valid rows, still padded to length L."""
    L = sample.length
    if not 1 <= k <= L:
        raise ValueError(f"k must lie in [1, {L}], got {k}")
    feats = sample.features.copy()
    mask = sample.mask.copy()
    feats[: L - k] = 0.0
    mask[: L - k] = 0
    return replace(sample, features=feats, mask=mask)


def stack(samples: Sequence[SequenceSample]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.features for s in samples]), np.stack([s.mask for s in samples]).astype(np.float64))


def batch(samples: Sequence[SequenceSample], batch_size: int, seed: int = 0,
          shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    """Yield (features B×L×F, masks B×L, hl_days B, hl_class B); last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not samples:
        raise ValueError("no samples to batch")
    idx = np.arange(len(samples))
    if shuffle:
        idx = np.random.default_rng(seed).permutation(idx)
    for start in range(0, len(idx), batch_size):
        part = [samples[i] for i in idx[start:start + batch_size]]
        x, m = stack(part)
        yield (x, m, np.array([s.hl_days for s in part]), np.array([s.hl_class for s in part], dtype=np.int64))


def record_count_summary(histories: Iterable[CowHistory]) -> dict:
    counts = np.array([h.n_records for h in histories])
    if counts.size == 0:
        raise ValueError("no histories")
    return {"cows": int(counts.size), "records": int(counts.sum()), "mean": float(counts.mean()),
            "median": float(np.median(counts)), "min": int(counts.min()), "max": int(counts.max()),
            "frac_more_than_5": float((counts > 5).mean())}


def write_sequences_csv(samples: Iterable[SequenceSample], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("cow_id", "farm_id", "position", "mask", "hl_days", "hl_class") + FEATURES)
        for s in samples:
            for pos in range(s.length):
                w.writerow([s.cow_id, s.farm_id, pos, int(s.mask[pos]), repr(s.hl_days), s.hl_class]
                           + [repr(float(v)) for v in s.features[pos]])


def read_sequences_csv(path: str | Path) -> list[SequenceSample]:
    rows: dict[str, list[list[str]]] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header[6:]) != FEATURES:
            raise ValueError(f"{path}: not a sequence dump")
        for row in r:
            rows.setdefault(row[0], []).append(row)
    out = []
    for cow, part in rows.items():
        part.sort(key=lambda row: int(row[2]))
        feats = np.array([[float(v) for v in row[6:]] for row in part])
        mask = np.array([int(row[3]) for row in part], dtype=np.int8)
        out.append(SequenceSample(feats, mask, float(part[0][4]), int(part[0][5]), cow, part[0][1]))
    return out
