"""Training loop with class-frequency-weighted loss, dictionary epochs, and checkpoints.

The fit protocol for the deconfounded variant: epoch 0 runs backbone-only
forward passes to fill the memory banks and builds the first dictionary
without touching any parameter; each later epoch trains by minibatch SGD
while refilling the banks, rebuilds the dictionary at its end, and evaluates
on a held-out subject-exclusive validation split for early stopping. The
best-validation state (parameters plus dictionary and banks) is restored on
exit. Everything is deterministic given the config seed.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .cis import ConfounderDictionary, MemoryBanks, cis_forward, rebuild_dictionary
from .datamodel import Dataset, ModelConfig
from .errors import (
    CheckpointFormatError,
    ConfigError,
    DataValidationError,
    EmptySubjectError,
    MissingArrayError,
)
from .evaluation import f1_scores
from .model import LOGIT_CAP, AUModel, build_model, forward_logits, binarize

CHECKPOINT_FORMAT_VERSION = 1
PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    max_epochs: int = 15
    patience: int = 3
    min_epochs: int = 1
    seed: int = 0
    val_fraction: float = 0.2
    recompute_frequencies_each_epoch: bool = False
    accumulate_banks: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_epochs <= 0 or self.patience <= 0:
            raise ConfigError("learning_rate, batch_size, max_epochs, patience must be positive")
        if self.min_epochs < 1:
            raise ConfigError("min_epochs must be at least 1")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be nonnegative")
        if not (0.0 < self.val_fraction <= 0.5):
            raise ConfigError("val_fraction must lie in (0, 0.5]")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ClassFrequencies:
    """Per-AU positive-label rate over a training split."""

    mu: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if ((self.mu < 0) | (self.mu > 1)).any():
            raise DataValidationError("occurrence frequencies must lie in [0, 1]")


def compute_class_frequencies(train_split: Dataset) -> ClassFrequencies:
    if len(train_split) == 0:
        raise DataValidationError("cannot compute class frequencies of an empty split")
    return ClassFrequencies(mu=train_split.labels.mean(axis=0))


def adaptive_loss(p_hat, p, mu: ClassFrequencies) -> torch.Tensor:
    """Frequency-weighted binary cross-entropy summed over AUs, meaned over samples.

    L = -sum_j [ (1 - mu_j) p_j log p̂_j + mu_j (1 - p_j) log(1 - p̂_j) ]

    Rare AUs (small mu_j) get their positive term upweighted and their
    negative term downweighted. Probabilities are clamped to keep the loss
    finite.
    """
    p_hat = torch.as_tensor(p_hat, dtype=torch.float64)
    p = torch.as_tensor(np.asarray(p), dtype=torch.float64)
    if p_hat.shape != p.shape:
        raise DataValidationError(f"prediction shape {tuple(p_hat.shape)} != label shape {tuple(p.shape)}")
    m = torch.as_tensor(mu.mu, dtype=torch.float64)
    if p_hat.shape[-1] != m.shape[0]:
        raise DataValidationError("class-frequency vector length does not match label width")
    q = p_hat.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_au = (1.0 - m) * p * torch.log(q) + m * (1.0 - p) * torch.log(1.0 - q)
    loss = -per_au.sum(dim=-1)
    return loss.mean() if loss.dim() > 0 else loss


@dataclass
class TrainResult:
    model: AUModel
    history: list[dict]
    best_epoch: int
    best_val_macro_f1: float


def fit(
    model: AUModel,
    train_split: Dataset,
    config: TrainConfig,
    *,
    epoch_callback: Callable[[AUModel, int, dict], None] | None = None,
) -> TrainResult:
    """Train in place and return the model restored to its best-validation state."""
    if len(train_split) == 0:
        raise DataValidationError("training split is empty")
    present = train_split.subjects_present()
    if model.variant == "cisnet":
        missing = sorted(set(range(train_split.num_subjects)) - set(int(s) for s in present))
        if missing:
            raise EmptySubjectError(missing[0], f"subject {missing[0]} absent from the training split")
    if len(present) < 2:
        raise DataValidationError(
            "training split must contain at least two subjects for subject-exclusive validation"
        )

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(present)
    n_val = int(np.clip(round(config.val_fraction * len(present)), 1, len(present) - 1))
    val_subjects = np.sort(perm[:n_val])
    fit_subjects = np.sort(perm[n_val:])

    subject_col = train_split.subject_ids
    tr_idx = np.flatnonzero(np.isin(subject_col, fit_subjects))
    va_idx = np.flatnonzero(np.isin(subject_col, val_subjects))
    obs = torch.from_numpy(train_split.observations.copy())
    labels_np = train_split.labels
    labels_t = torch.from_numpy(labels_np.astype(np.float64))
    tr_sids = subject_col[tr_idx]

    mu = compute_class_frequencies_from(labels_np[tr_idx])
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    history: list[dict] = []

    def log_epoch(epoch: int, train_loss: float | None, rebuilt: bool, t0: float) -> dict:
        entry = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_macro_f1": _macro_f1(model, obs[va_idx], labels_np[va_idx], config.batch_size),
            "dict_rebuilt": rebuilt,
            "wall_time_s": time.perf_counter() - t0,
        }
        history.append(entry)
        if epoch_callback is not None:
            epoch_callback(model, epoch, entry)
        return entry

    if model.variant == "cisnet":
        # Initialization epoch: fill banks from backbone features, no updates.
        t0 = time.perf_counter()
        banks = MemoryBanks(fit_subjects, model.config.d_in)
        model.banks = banks
        order = rng.permutation(len(tr_idx))
        with torch.no_grad():
            for batch in _batches(order, config.batch_size):
                rows = tr_idx[batch]
                banks.update_batch(subject_col[rows], model.backbone(obs[rows]))
        model.dictionary = rebuild_dictionary(banks, epoch=0)
        log_epoch(0, None, True, t0)

    best_state: dict | None = None
    best_f1 = -np.inf
    best_epoch = 0
    patience_left = config.patience

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        if model.variant == "cisnet" and not config.accumulate_banks:
            model.banks.reset()
        if config.recompute_frequencies_each_epoch and epoch > 1:
            mu = compute_class_frequencies_from(labels_np[tr_idx])
        order = rng.permutation(len(tr_idx))
        losses = []
        for batch in _batches(order, config.batch_size):
            rows = tr_idx[batch]
            xb, yb = obs[rows], labels_t[rows]
            f = model.backbone(xb)
            if model.variant == "cisnet":
                model.banks.update_batch(subject_col[rows], f.detach())
                out = cis_forward(
                    f,
                    model.dictionary,
                    model.cis,
                    head=model.config.head,
                    alpha_mode=model.config.alpha_mode,
                    renormalize=model.config.renormalize_weights,
                )
                logits = model.classifier(out.head_out)
            else:
                logits = model.classifier(f)
            probs = torch.sigmoid(logits.clamp(-LOGIT_CAP, LOGIT_CAP))
            loss = adaptive_loss(probs, yb, mu)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        rebuilt = False
        if model.variant == "cisnet":
            model.dictionary = rebuild_dictionary(model.banks, epoch=epoch)
            rebuilt = True
        entry = log_epoch(epoch, float(np.mean(losses)), rebuilt, t0)

        # the validation signal is noisy on few subjects; candidate selection
        # and the patience clock only start once the warmup floor is reached
        if epoch < config.min_epochs:
            continue
        if entry["val_macro_f1"] > best_f1:
            best_f1 = entry["val_macro_f1"]
            best_epoch = epoch
            best_state = _snapshot(model)
            patience_left = config.patience
        else:
            patience_left -= 1
            if patience_left == 0:
                break

    if best_state is not None:
        _restore(model, best_state)
    return TrainResult(model=model, history=history, best_epoch=best_epoch, best_val_macro_f1=best_f1)


def compute_class_frequencies_from(labels: np.ndarray) -> ClassFrequencies:
    return ClassFrequencies(mu=np.asarray(labels, dtype=np.float64).mean(axis=0))


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def _macro_f1(model: AUModel, obs: torch.Tensor, labels: np.ndarray, batch_size: int) -> float:
    preds = np.zeros_like(labels)
    with torch.no_grad():
        for start in range(0, len(labels), batch_size):
            logits = forward_logits(model, obs[start : start + batch_size])
            probs = torch.sigmoid(logits.clamp(-LOGIT_CAP, LOGIT_CAP)).numpy()
            preds[start : start + batch_size] = binarize(probs, model.config.tau)
    _, macro = f1_scores(preds, labels)
    return macro


def _snapshot(model: AUModel) -> dict:
    return {
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "dictionary": model.dictionary.clone() if model.dictionary is not None else None,
        "banks": model.banks.clone() if model.banks is not None else None,
    }


def _restore(model: AUModel, state: dict) -> None:
    model.load_state_dict(state["params"])
    model.dictionary = state["dictionary"]
    model.banks = state["banks"]


def parameter_hash(model: AUModel) -> str:
    """Order-stable digest of all trainable parameters."""
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(name.encode("utf-8"))
        h.update(p.detach().numpy().astype("<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoint container: one JSON metadata line, then raw little-endian float64
# payload for each named array in header order.

def save_checkpoint(
    model: AUModel,
    path: str | Path,
    *,
    train_config: TrainConfig | None = None,
    history: list[dict] | None = None,
    epoch: int | None = None,
) -> None:
    arrays: list[tuple[str, np.ndarray]] = [
        (name, p.detach().numpy()) for name, p in model.named_parameters()
    ]
    # wall times vary run to run; keep checkpoints byte-identical for equal seeds
    clean_history = [
        {k: v for k, v in entry.items() if k != "wall_time_s"} for entry in (history or [])
    ]
    meta: dict = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "variant": model.variant,
        "obs_dim": model.obs_dim,
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "epoch": epoch,
        "metric_history": clean_history,
    }
    if model.dictionary is not None:
        arrays.append(("dict.prototypes", model.dictionary.prototypes.numpy()))
        arrays.append(("dict.priors", model.dictionary.priors.numpy()))
        meta["dictionary"] = {
            "subject_ids": model.dictionary.subject_ids.tolist(),
            "epoch_built": model.dictionary.epoch_built,
        }
    if model.banks is not None:
        bank_list = model.banks.banks()
        sums = np.stack([b.running_sum.numpy() for b in bank_list])
        counts = np.array([float(b.count) for b in bank_list])
        arrays.append(("banks.sums", sums))
        arrays.append(("banks.counts", counts))
        meta["banks"] = {"subject_ids": [b.subject_id for b in bank_list]}
    meta["arrays"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays]
    with open(path, "wb") as fh:
        fh.write(json.dumps(meta, sort_keys=True).encode("utf-8") + b"\n")
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[AUModel, dict]:
    """Rebuild the model from a checkpoint; forward passes reproduce bit-for-bit."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        meta = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable checkpoint header: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version {meta.get('format_version')!r}"
        )
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for spec in meta["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise CheckpointFormatError("checkpoint payload is truncated")
        arrays[spec["name"]] = np.frombuffer(
            payload, dtype="<f8", count=count, offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise CheckpointFormatError("checkpoint payload has trailing bytes")

    config = ModelConfig.from_dict(meta["model_config"])
    model = build_model(meta["variant"], config, int(meta["obs_dim"]), seed=0)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in arrays:
                raise MissingArrayError(name)
            if tuple(arrays[name].shape) != tuple(p.shape):
                raise CheckpointFormatError(
                    f"array {name!r} has shape {arrays[name].shape}, expected {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arrays[name]))
    if "dictionary" in meta and meta["dictionary"] is not None:
        for required in ("dict.prototypes", "dict.priors"):
            if required not in arrays:
                raise MissingArrayError(required)
        model.dictionary = ConfounderDictionary(
            prototypes=torch.from_numpy(arrays["dict.prototypes"]),
            priors=torch.from_numpy(arrays["dict.priors"]),
            subject_ids=np.asarray(meta["dictionary"]["subject_ids"], dtype=np.int64),
            epoch_built=int(meta["dictionary"]["epoch_built"]),
        )
    if "banks" in meta and meta["banks"] is not None:
        for required in ("banks.sums", "banks.counts"):
            if required not in arrays:
                raise MissingArrayError(required)
        sids = [int(s) for s in meta["banks"]["subject_ids"]]
        banks = MemoryBanks(sids, model.config.d_in)
        for i, s in enumerate(sids):
            bank = banks.bank(s)
            bank.running_sum = torch.from_numpy(arrays["banks.sums"][i]).clone()
            bank.count = int(arrays["banks.counts"][i])
        model.banks = banks
    return model, meta
