"""Training loop, evaluation metric, and checkpoint glue for the fusion model."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from geoscore.model.config import ModelConfig
from geoscore.model.network import ForwardContext, FusionModel, forward_scores, init_model
from geoscore.numerics import AdamState, ContractError, GradTape, Tensor, adam_step, backward, mse
from geoscore.numerics.checkpoint import load_checkpoint, save_checkpoint


class ConstantLabelsError(ValueError):
    """R-squared is undefined when the reference labels are constant."""


def r_squared(yhat: Sequence[float], y: Sequence[float]) -> float:
    """Coefficient of determination: 1 - SS_res / SS_tot."""
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape or yhat.ndim != 1:
        raise ContractError(f"r_squared needs equal-length 1-D inputs, got {yhat.shape} vs {y.shape}")
    if y.size < 2:
        raise ContractError("r_squared needs at least 2 points")
    ss_tot = float(((y.mean() - y) ** 2).sum())
    if ss_tot == 0.0:
        raise ConstantLabelsError("labels are constant; denominator is zero")
    ss_res = float(((yhat - y) ** 2).sum())
    return 1.0 - ss_res / ss_tot


@dataclass
class PairExample:
    """One preprocessed training pair: channel-first float images plus label."""

    pair_id: str
    sat: np.ndarray
    sv: np.ndarray
    label: float


@dataclass
class LabelScaler:
    mean: float
    std: float

    def transform(self, labels: np.ndarray) -> np.ndarray:
        return (np.asarray(labels, dtype=np.float64) - self.mean) / self.std

    @classmethod
    def fit(cls, labels: np.ndarray) -> "LabelScaler":
        labels = np.asarray(labels, dtype=np.float64)
        std = float(labels.std())
        return cls(mean=float(labels.mean()), std=std if std > 0 else 1.0)


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 40
    lr: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.2


@dataclass
class TrainResult:
    model: FusionModel
    scaler: LabelScaler
    history: list[dict] = field(default_factory=list)

    def history_jsonl(self) -> str:
        return "\n".join(json.dumps(row) for row in self.history) + "\n"


def _batched_scores(model: FusionModel, examples: list[PairExample], batch_size: int) -> np.ndarray:
    """Inference-mode scores, batched for throughput."""
    out = np.empty(len(examples))
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        sat = np.stack([e.sat for e in chunk])
        sv = np.stack([e.sv for e in chunk])
        scores = forward_scores(model, sat, sv, ForwardContext(training=False))
        out[start : start + len(chunk)] = scores.data
    return out


def train(model: FusionModel, examples: list[PairExample], cfg: TrainConfig) -> TrainResult:
    """MSE-minimizing Adam training with an 80/20 seeded split.

    Labels are z-scored over the training split; validation R-squared is
    reported in that standardized space (invariant under the shared affine
    map). Fully deterministic for a fixed seed.
    """
    if not examples:
        raise ContractError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(examples))
    n_val = int(round(len(examples) * cfg.val_fraction))
    n_val = min(n_val, len(examples) - 1)
    val = [examples[i] for i in order[:n_val]]
    train_set = [examples[i] for i in order[n_val:]]

    scaler = LabelScaler.fit(np.array([e.label for e in train_set]))
    train_targets = scaler.transform(np.array([e.label for e in train_set]))
    val_targets = scaler.transform(np.array([e.label for e in val])) if val else np.empty(0)

    params = model.parameters()
    state = AdamState.for_params(params, lr=cfg.lr)
    history: list[dict] = []

    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for start in range(0, len(train_set), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            sat = np.stack([train_set[i].sat for i in idx])
            sv = np.stack([train_set[i].sv for i in idx])
            target = Tensor(train_targets[idx])
            ctx = ForwardContext(training=True, rng=rng, dropout_rate=model.config.dropout_rate)
            with GradTape() as tape:
                scores = forward_scores(model, sat, sv, ctx)
                loss = mse(scores, target)
            grads = backward(loss, tape)
            adam_step(params, [grads[p] for p in params], state)
            epoch_loss += loss.item() * len(idx)
        epoch_loss /= len(train_set)

        row: dict = {"epoch": epoch, "train_mse": epoch_loss}
        if val:
            val_scores = _batched_scores(model, val, cfg.batch_size)
            row["val_mse"] = float(((val_scores - val_targets) ** 2).mean())
            try:
                row["val_r2"] = r_squared(val_scores, val_targets)
            except ConstantLabelsError:
                row["val_r2"] = None
        else:
            row["val_r2"] = None
        history.append(row)

    return TrainResult(model=model, scaler=scaler, history=history)


# ------------------------------------------------------------- persistence

def save_model(
    path: str | Path,
    model: FusionModel,
    scaler: LabelScaler,
    preprocess: dict | None = None,
) -> None:
    """Write the checkpoint: parameter blobs plus config/scaler/preprocess extras."""
    extra = {
        "model_config": model.config.to_dict(),
        "label_scaler": {"mean": scaler.mean, "std": scaler.std},
        "preprocess": preprocess or {},
    }
    save_checkpoint(path, {k: v.data for k, v in model.named_parameters().items()}, extra)


def load_model(path: str | Path) -> tuple[FusionModel, LabelScaler, dict]:
    """Rebuild a FusionModel from a checkpoint; byte-exact parameter recovery."""
    arrays, extra = load_checkpoint(path)
    cfg = ModelConfig.from_dict(extra["model_config"])
    model = init_model(cfg, np.random.default_rng(0))
    named = model.named_parameters()
    if set(named) != set(arrays):
        missing = set(named) ^ set(arrays)
        raise ContractError(f"checkpoint parameter names disagree with config: {sorted(missing)[:5]}")
    for name, tensor in named.items():
        if tensor.data.shape != arrays[name].shape:
            raise ContractError(f"checkpoint shape mismatch for {name}")
        tensor.data = arrays[name]
    sc = extra.get("label_scaler", {"mean": 0.0, "std": 1.0})
    return model, LabelScaler(mean=sc["mean"], std=sc["std"]), extra.get("preprocess", {})
