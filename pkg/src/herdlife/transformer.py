"""Pre-norm self-attention encoder with regression and 3-class heads."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import AdamState, adam_step
from .schemas import N_FEATURES, T_HIGH, T_LOW, hl_to_class
from .sequencing import SequenceSample, batch, latest_k_view, stack

__all__ = ["ModelConfig", "Model", "TrainingDiverged", "init_model", "encode", "forward", "train", "predict_hl",
           "predict_class", "hl_to_class", "save", "load"]

log = logging.getLogger(__name__)

HEADS = ("regression", "classification")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    L: int = 10
    n_features: int = N_FEATURES
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    dropout: float = 0.1
    head: str = "regression"
    t_low: float = T_LOW
    t_high: float = T_HIGH
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    patience: int = 10
    seed: int = 0
    # during training, each sample is cut to a random latest-k view with
    # this probability, so shorter histories are seen in training as well
    truncation_prob: float = 0.5

    def validate(self) -> None:
        if self.L < 1 or self.n_features < 1 or self.n_layers < 1 or self.d_ff < 1:
            raise ValueError("sizes must be positive")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if not self.t_low < self.t_high:
            raise ValueError("t_low must be below t_high")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.patience < 1:
            raise ValueError("bad training hyperparameters")
        if not 0 <= self.truncation_prob <= 1:
            raise ValueError("truncation_prob must lie in [0, 1]")

    @property
    def n_out(self) -> int:
        return 1 if self.head == "regression" else 3

    @property
    def thresholds(self) -> tuple[float, float]:
        return (self.t_low, self.t_high)


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]
    target_mean: float = 0.0
    target_sd: float = 1.0
    standardizer: dict | None = None
    meta: dict = field(default_factory=dict)

    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def check_finite(self) -> None:
        for name, p in self.params.items():
            if not np.isfinite(p.data).all():
                raise ValueError(f"parameter {name} holds non-finite values")


def init_model(config: ModelConfig, seed: int = 0, target_mean: float = 0.0, target_sd: float = 1.0,
               head_scale: float = 0.0) -> Model:
    """Xavier-style weights, unit layer-norm gains; the head starts at zero unless ``head_scale`` is set."""
    config.validate()
    rng = np.random.default_rng(seed)
    D, F, L = config.d_model, config.n_features, config.L

    def w(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / (fan_in + fan_out))

    p: dict[str, np.ndarray] = {"in_w": w(F, D), "in_b": np.zeros(D), "pos": rng.standard_normal((L, D)) * 0.02}
    for i in range(config.n_layers):
        p[f"l{i}.ln1_g"], p[f"l{i}.ln1_b"] = np.ones(D), np.zeros(D)
        for nm in "qkvo":
            p[f"l{i}.{nm}_w"], p[f"l{i}.{nm}_b"] = w(D, D), np.zeros(D)
        p[f"l{i}.ln2_g"], p[f"l{i}.ln2_b"] = np.ones(D), np.zeros(D)
        p[f"l{i}.ff1_w"], p[f"l{i}.ff1_b"] = w(D, config.d_ff), np.zeros(config.d_ff)
        p[f"l{i}.ff2_w"], p[f"l{i}.ff2_b"] = w(config.d_ff, D), np.zeros(D)
    p["lnf_g"], p["lnf_b"] = np.ones(D), np.zeros(D)
    p["head_w"] = rng.standard_normal((D, config.n_out)) * head_scale
    p["head_b"] = np.zeros(config.n_out)
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}
    return Model(config, params, target_mean, target_sd, meta={"seed": seed})


def _split_heads(x: Tensor, B: int, L: int, H: int) -> Tensor:
    return x.reshape(B, L, H, -1).transpose(0, 2, 1, 3)


def encode(features, mask, params: dict[str, Tensor], config: ModelConfig,
           rng: np.random.Generator | None = None, attention: list | None = None) -> Tensor:
    """Pooled (B, d_model) representation; ``attention`` collects per-layer weights if given."""
    x = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (config.L, config.n_features) or m.shape != x.shape[:2]:
        raise ValueError(f"expected features (B, {config.L}, {config.n_features}) and mask (B, {config.L}), "
                         f"got {x.shape} and {m.shape}")
    if (m.sum(axis=1) == 0).any():
        raise ValueError("a sample has no valid records")
    B, L, _ = x.shape
    H, D = config.n_heads, config.d_model
    dh = D // H
    rate = config.dropout if rng is not None else 0.0
    key_mask = m[:, None, None, :]

    h = ag.affine(features if isinstance(features, Tensor) else Tensor(x), params["in_w"], params["in_b"])
    h = h + params["pos"]
    for i in range(config.n_layers):
        a = ag.layer_norm(h, params[f"l{i}.ln1_g"], params[f"l{i}.ln1_b"])
        q = _split_heads(ag.affine(a, params[f"l{i}.q_w"], params[f"l{i}.q_b"]), B, L, H)
        k = _split_heads(ag.affine(a, params[f"l{i}.k_w"], params[f"l{i}.k_b"]), B, L, H)
        v = _split_heads(ag.affine(a, params[f"l{i}.v_w"], params[f"l{i}.v_b"]), B, L, H)
        scores = ag.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        att = ag.masked_softmax(scores, key_mask)
        if attention is not None:
            attention.append(att.data.copy())
        ctx = ag.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, L, D)
        h = h + ag.dropout(ag.affine(ctx, params[f"l{i}.o_w"], params[f"l{i}.o_b"]), rate, rng)
        f = ag.layer_norm(h, params[f"l{i}.ln2_g"], params[f"l{i}.ln2_b"])
        f = ag.gelu(ag.affine(f, params[f"l{i}.ff1_w"], params[f"l{i}.ff1_b"]))
        h = h + ag.dropout(ag.affine(f, params[f"l{i}.ff2_w"], params[f"l{i}.ff2_b"]), rate, rng)
    h = ag.layer_norm(h, params["lnf_g"], params["lnf_b"])
    return ag.masked_mean(h, m)


def forward(model: Model, features, mask, rng: np.random.Generator | None = None) -> Tensor:
    """Raw head output: standardised herd life (B, 1) or class logits (B, 3)."""
    pooled = encode(features, mask, model.params, model.config, rng)
    return ag.affine(pooled, model.params["head_w"], model.params["head_b"])


def _as_list(samples) -> list[SequenceSample]:
    return [samples] if isinstance(samples, SequenceSample) else list(samples)


def _outputs(model: Model, samples: Sequence[SequenceSample], chunk: int = 128) -> np.ndarray:
    if not samples:
        raise ValueError("no samples")
    outs = []
    for s in range(0, len(samples), chunk):
        x, m = stack(samples[s:s + chunk])
        outs.append(forward(model, x, m).data)
    return np.concatenate(outs)


def predict_hl(samples, model: Model) -> np.ndarray:
    """Predicted herd life in days, one per sample."""
    if model.config.head != "regression":
        raise ValueError("predict_hl needs a regression model")
    model.check_finite()
    z = _outputs(model, _as_list(samples))[:, 0]
    return model.target_mean + model.target_sd * z


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict_class(samples, model: Model) -> tuple[np.ndarray, np.ndarray]:
    """(classes, probabilities); argmax ties go to the lower class."""
    if model.config.head != "classification":
        raise ValueError("predict_class needs a classification model")
    model.check_finite()
    probs = _softmax(_outputs(model, _as_list(samples)))
    return probs.argmax(axis=1), probs   # argmax returns the first maximum


# ---------------------------------------------------------------------------
# training


def _loss(model: Model, x, m, hl, cls, rng) -> Tensor:
    out = forward(model, x, m, rng)
    if model.config.head == "regression":
        z = (hl - model.target_mean) / model.target_sd
        return ag.mse_loss(out, Tensor(z[:, None]))
    return ag.cross_entropy_loss(out, cls)


def _evaluate(model: Model, samples: Sequence[SequenceSample]) -> tuple[float, float]:
    """(loss, metric) with metric = R² for regression and accuracy for classification."""
    out = _outputs(model, samples)
    hl = np.array([s.hl_days for s in samples])
    if model.config.head == "regression":
        z = (hl - model.target_mean) / model.target_sd
        loss = float(np.mean((out[:, 0] - z) ** 2))
        pred = model.target_mean + model.target_sd * out[:, 0]
        ss_tot = float(((hl - hl.mean()) ** 2).sum())
        metric = 1.0 - float(((hl - pred) ** 2).sum()) / ss_tot if ss_tot > 0 else 0.0
        return loss, metric
    cls = np.array([s.hl_class for s in samples])
    z = out - out.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(cls)), cls].mean())
    return loss, float((out.argmax(axis=1) == cls).mean())


def _truncate_batch(x: np.ndarray, m: np.ndarray, prob: float, rng: np.random.Generator):
    L = m.shape[1]
    for b in range(x.shape[0]):
        if rng.random() < prob:
            k = int(rng.integers(1, L + 1))
            x[b, : L - k] = 0.0
            m[b, : L - k] = 0.0
    return x, m


def train(train_set: Sequence[SequenceSample], val_set: Sequence[SequenceSample] | None,
          config: ModelConfig, seed: int | None = None, standardizer: dict | None = None,
          history_path: str | Path | None = None) -> tuple[Model, list[dict]]:
    """Adam training with early stopping on the validation loss.

    Returns the parameters of the best validation epoch and the per-epoch
    history. Without a validation set the training set is used for stopping.
    """
    config.validate()
    if not train_set:
        raise ValueError("empty training set")
    seed = config.seed if seed is None else seed
    config = dataclasses.replace(config, seed=seed)
    val_set = list(val_set) if val_set else list(train_set)
    for s in list(train_set[:1]) + val_set[:1]:
        if s.features.shape != (config.L, config.n_features):
            raise ValueError(f"samples have shape {s.features.shape}, config expects ({config.L}, {config.n_features})")

    hl = np.array([s.hl_days for s in train_set])
    mean, sd = float(hl.mean()), float(hl.std())
    if config.head == "regression" and sd == 0:
        raise ValueError("training targets are constant")
    model = init_model(config, seed, mean, sd or 1.0)
    model.standardizer = standardizer
    model.meta.update({"thresholds": list(config.thresholds), "n_train": len(train_set)})
    params = model.param_list()
    state = AdamState.for_params(params, lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))

    history: list[dict] = []
    best_loss, best_epoch, best = math.inf, 0, [p.data.copy() for p in params]
    for epoch in range(1, config.epochs + 1):
        total, n = 0.0, 0
        for step, (x, m, y, c) in enumerate(batch(train_set, config.batch_size, seed=seed * 100003 + epoch)):
            if config.truncation_prob > 0:
                x, m = _truncate_batch(x, m, config.truncation_prob, rng)
            try:
                with Tape() as tape:
                    loss = _loss(model, x, m, y, c, rng if config.dropout > 0 else None)
                grads = tape.backward(loss)
            except FloatingPointError as e:
                raise TrainingDiverged(f"non-finite values at epoch {epoch} step {step}: {e}") from e
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}")
            adam_step(params, [grads.get(p) for p in params], state)
            total += lv * len(y)
            n += len(y)
        try:
            val_loss, val_metric = _evaluate(model, val_set)
        except FloatingPointError as e:
            raise TrainingDiverged(f"non-finite validation output at epoch {epoch}: {e}") from e
        history.append({"epoch": epoch, "train_loss": total / n, "val_loss": val_loss, "val_metric": val_metric})
        log.debug("epoch %d train %.4f val %.4f metric %.4f", epoch, total / n, val_loss, val_metric)
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best = [p.data.copy() for p in params]
        elif epoch - best_epoch >= config.patience:
            break
    for p, b in zip(params, best):
        p.data = b
        p.grad = None
    model.meta.update({"best_epoch": best_epoch, "best_val_loss": best_loss, "epochs_run": len(history)})
    if history_path is not None:
        write_history(history, history_path)
    return model, history


def write_history(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "val_metric"], lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def validation_split(samples: Sequence[SequenceSample], fraction: float = 0.125,
                     seed: int = 0) -> tuple[list[SequenceSample], list[SequenceSample]]:
    """Seeded (fit, validation) partition of a training set; validation keeps at least one sample."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    if len(samples) < 2:
        raise ValueError("need at least 2 samples to hold some out")
    idx = np.random.default_rng(np.random.SeedSequence([seed, 2])).permutation(len(samples))
    n_val = max(1, int(round(fraction * len(samples))))
    val = sorted(idx[:n_val])
    fit = sorted(idx[n_val:])
    return [samples[i] for i in fit], [samples[i] for i in val]



# ---------------------------------------------------------------------------
# persistence


def save(model: Model, path: str | Path) -> None:
    header = {
        "kind": "transformer",
        "config": dataclasses.asdict(model.config),
        "target_mean": model.target_mean,
        "target_sd": model.target_sd,
        "standardizer": model.standardizer,
        "meta": model.meta,
    }
    save_checkpoint(path, header, {k: p.data for k, p in model.params.items()})


def load(path: str | Path) -> Model:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "transformer":
        raise CheckpointError(f"{path}: holds a {header.get('kind')!r} model, not a transformer")
    config = ModelConfig(**header["config"])
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()}
    model = Model(config, params, header["target_mean"], header["target_sd"], header["standardizer"], header["meta"])
    expected = init_model(config).params
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in expected):
        raise CheckpointError(f"{path}: parameter directory does not match its config")
    return model
