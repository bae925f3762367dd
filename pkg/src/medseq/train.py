"""Losses, Adam/SGD optimizers, the epoch loop, and validation-driven model
selection. Training is fully deterministic given the config seed (single
threaded, fixed batch order, seeded dropout).
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ehr import combo_from_vec, is_unknown_combo
from .models import Checkpoint, ModelSpec, _NeuralModel, build_model
from .numerics import Parameter
from .preprocess import CaseSequence

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout: float = 0.5
    seed: int = 0
    precision: int = 64
    clip_norm: Optional[float] = None  # 5.0 is the recommended recovery value
    selection: str = "val_loss"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "epochs", "batch_size", "optimizer", "lr", "beta1", "beta2",
            "adam_eps", "dropout", "seed", "precision", "clip_norm", "selection")}


def loss_dcc(probs: np.ndarray, label: int) -> float:
    """Negative log-likelihood of one combination class, log floored at 1e-12."""
    if label < 0 or label >= probs.shape[-1]:
        raise ValueError(f"label {label} outside [0, {probs.shape[-1]})")
    return -float(np.log(max(float(probs[label]), LOG_FLOOR)))


def loss_dc(probs: np.ndarray, label: np.ndarray) -> float:
    """Sum of the 7 per-class binary cross-entropies."""
    p = np.clip(np.asarray(probs, dtype=np.float64), LOG_FLOOR, 1.0 - LOG_FLOOR)
    y = np.asarray(label, dtype=np.float64)
    return -float(np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def batch_loss(task: str, probs: np.ndarray, labels_dc: np.ndarray,
               labels_dcc: np.ndarray) -> float:
    """Mean per-case loss over a batch (vectorized form of loss_dcc / loss_dc)."""
    n = probs.shape[0]
    if task == "dcc":
        if labels_dcc.min() < 0 or labels_dcc.max() >= probs.shape[1]:
            raise ValueError("combination label outside the trained class range")
        picked = np.maximum(probs[np.arange(n), labels_dcc], LOG_FLOOR)
        return -float(np.log(picked).mean())
    p = np.clip(probs.astype(np.float64), LOG_FLOOR, 1.0 - LOG_FLOOR)
    y = labels_dc.astype(np.float64)
    return -float((y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum(axis=1).mean())


def batch_dlogits(task: str, probs: np.ndarray, labels_dc: np.ndarray,
                  labels_dcc: np.ndarray) -> np.ndarray:
    """Gradient of the mean batch loss w.r.t. the head logits.

    Softmax+NLL and sigmoid+BCE both reduce to (probs - targets) / B.
    """
    n = probs.shape[0]
    if task == "dcc":
        onehot = np.zeros_like(probs)
        onehot[np.arange(n), labels_dcc] = 1.0
        return (probs - onehot) / n
    return (probs - labels_dc.astype(probs.dtype)) / n


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction1 = 1.0 - b1 ** self.t
        correction2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / correction1
            v_hat = v / correction2
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Sgd:
    def __init__(self, params: Sequence[Parameter], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            p.value -= self.lr * p.grad


def clip_gradients(params: Sequence[Parameter], max_norm: float) -> float:
    total = np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for p in params:
            p.grad *= scale
    return total


class TrainDivergence(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "val_loss": self.val_loss, "val_metric": self.val_metric}


@dataclass
class TrainLog:
    epochs: list[EpochLog] = field(default_factory=list)
    best_epoch: int = -1
    wall_clock_sec: float = 0.0
    skipped_unknown_labels: int = 0

    def to_jsonl(self) -> str:
        """One line per epoch plus a summary line (the only line with timing)."""
        lines = [json.dumps(e.to_dict(), sort_keys=True) for e in self.epochs]
        lines.append(json.dumps({"summary": True, "best_epoch": self.best_epoch,
                                 "epochs_run": len(self.epochs),
                                 "skipped_unknown_labels": self.skipped_unknown_labels,
                                 "wall_clock_sec": round(self.wall_clock_sec, 3)},
                                sort_keys=True))
        return "\n".join(lines) + "\n"


def _mean_loss(model: _NeuralModel, cases: Sequence[CaseSequence],
               batch_size: int) -> tuple[float, np.ndarray]:
    """Inference-mode mean loss and stacked probabilities over a case list."""
    total = 0.0
    outputs = []
    for lo in range(0, len(cases), batch_size):
        chunk = cases[lo:lo + batch_size]
        batch = model.make_batch(chunk)
        logits, _ = model.forward_batch(batch, train=False)
        probs = model.probs(logits)
        total += batch_loss(model.spec.task, probs, batch.labels_dc,
                            batch.labels_dcc) * len(chunk)
        outputs.append(probs)
    return total / max(len(cases), 1), np.concatenate(outputs, axis=0)


def _val_metric(task: str, probs: np.ndarray,
                cases: Sequence[CaseSequence]) -> float:
    if task == "dcc":
        pred = probs.argmax(axis=1)
        hits = sum(int(pred[i]) == c.label_dcc for i, c in enumerate(cases))
        return hits / max(len(cases), 1)
    # mean per-class accuracy at 0.5 is cheap and monotone enough for logging
    labels = np.stack([c.label_dc for c in cases])
    return float(((probs >= 0.5) == (labels >= 0.5)).mean())


def train_model(spec: ModelSpec, train_cases: Sequence[CaseSequence],
                val_cases: Sequence[CaseSequence], config: TrainConfig,
                fingerprint: dict) -> tuple[Checkpoint, TrainLog]:
    """Train a neural model; returns the best-validation-loss checkpoint and log.

    Deterministic given (config.seed, precision, single thread): the per-epoch
    shuffle, dropout masks, and update order are all driven by one seeded
    generator.
    """
    started = time.monotonic()
    spec = ModelSpec.from_dict({**spec.to_dict(), "precision": config.precision})
    model = build_model(spec)
    log = TrainLog()
    usable = []
    for case in train_cases:
        if spec.task == "dcc" and is_unknown_combo(case.label_dcc):
            log.skipped_unknown_labels += 1
            continue
        usable.append(case)
    if not usable:
        raise ValueError("no trainable cases")
    if log.skipped_unknown_labels:
        logger.warning("skipped %d training cases with unknown combination labels",
                       log.skipped_unknown_labels)
    if spec.task == "dcc":
        # the loss is undefined for labels outside the vocabulary; they still
        # count as misses at evaluation time
        val_cases = [c for c in val_cases if not is_unknown_combo(c.label_dcc)]
    if not val_cases:
        raise ValueError("no usable validation cases")
    rng = np.random.default_rng(config.seed)
    if config.optimizer == "adam":
        opt = Adam(model.params(), config.lr, config.beta1, config.beta2,
                   config.adam_eps)
    else:
        opt = Sgd(model.params(), config.lr)
    best_state: Optional[dict[str, np.ndarray]] = None
    best_loss = np.inf
    order = np.arange(len(usable))
    for epoch in range(config.epochs):
        rng.shuffle(order)
        epoch_total = 0.0
        for bi, lo in enumerate(range(0, len(order), config.batch_size)):
            chunk = [usable[i] for i in order[lo:lo + config.batch_size]]
            batch = model.make_batch(chunk)
            model.zero_grads()
            logits, cache = model.forward_batch(batch, train=True, rng=rng)
            probs = model.probs(logits)
            loss = batch_loss(spec.task, probs, batch.labels_dc, batch.labels_dcc)
            if not np.isfinite(loss):
                raise TrainDivergence(epoch, bi, loss)
            dlogits = batch_dlogits(spec.task, probs, batch.labels_dc,
                                    batch.labels_dcc)
            model.backward_batch(dlogits, cache)
            if config.clip_norm is not None:
                clip_gradients(model.params(), config.clip_norm)
            opt.step()
            epoch_total += loss * len(chunk)
        train_loss = epoch_total / len(usable)
        val_loss, val_probs = _mean_loss(model, val_cases, config.batch_size)
        if not np.isfinite(val_loss):
            raise TrainDivergence(epoch, -1, val_loss)
        metric = _val_metric(spec.task, val_probs, val_cases)
        log.epochs.append(EpochLog(epoch, float(train_loss), float(val_loss),
                                   float(metric)))
        if val_loss < best_loss:
            best_loss = val_loss
            log.best_epoch = epoch
            best_state = {k: v.copy() for k, v in model.tensors().items()}
        logger.info("%s/%s epoch %d: train %.4f val %.4f metric %.4f",
                    spec.kind, spec.task, epoch, train_loss, val_loss, metric)
    model.load_tensors(best_state)
    log.wall_clock_sec = time.monotonic() - started
    meta = {"seed": config.seed, "epochs_run": config.epochs,
            "best_epoch": log.best_epoch, "best_val_loss": float(best_loss),
            "optimizer": config.optimizer, "lr": config.lr}
    return Checkpoint.from_model(model, fingerprint, meta), log


def sequence_nll(model: _NeuralModel, case: CaseSequence,
                 encode_combo) -> tuple[float, list[float], float]:
    """Factorization-check mode: run the model over every outer prefix of a case.

    Returns (sum of per-step NLLs, the per-step NLLs, product of the per-step
    probabilities of the realized labels). The sum equals -log(product) up to
    float round-off, which ties the per-case training loss to the sequence
    probability decomposition.
    """
    if model.spec.task != "dcc":
        raise ValueError("sequence factorization applies to the dcc task")
    from .preprocess import CaseSequence as CS, Position

    prefixes = []
    labels = []
    for t in range(1, len(case.outer_steps) + 1):
        step = case.outer_steps[t - 1]
        label = encode_combo(combo_from_vec(step.drugs))
        labels.append(label)
        prefixes.append(CS(case.patient_id, case.outer_steps[:t], step.drugs,
                           label, Position.MID))
    probs = model.predict_probs(prefixes)
    nlls = [loss_dcc(probs[i], labels[i]) for i in range(len(prefixes))]
    product = 1.0
    for i, label in enumerate(labels):
        product *= max(float(probs[i][label]), LOG_FLOOR)
    return float(sum(nlls)), nlls, product
