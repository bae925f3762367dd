"""The predictors: previous-prescription baseline, logistic regression, a basic
recurrent model over aggregated windows, and two hierarchical variants, plus
binary checkpoint serialization.

Neural models share a convention: ``make_batch`` tensorizes cases (left-padded),
``forward_batch`` returns logits plus a cache, ``backward_batch`` accumulates
parameter gradients from d(logits). The loss itself lives in ``train``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .ehr import DrugComboVocab, N_DRUG_CLASSES, combo_from_vec
from .layers import (
    DenseHead,
    LstmCell,
    dropout,
    dropout_backward,
    head_dc,
    head_dcc,
    lstm_backward_from_final,
    merge_concat,
    merge_concat_backward,
    run_masked_sequence,
)
from .numerics import Parameter, ShapeError
from .preprocess import CaseSequence, MODE_WITH_PREV, MODES

KINDS = ("prev", "lr", "rnn", "hrnn1", "hrnn2")
TASKS = ("dc", "dcc")

DROPOUT_RATE = 0.5


@dataclass(frozen=True)
class ModelSpec:
    """Topology and data-shape contract for one predictor."""

    kind: str
    task: str
    mode: str
    n_icd: int
    n_meas: int
    n_combos: int
    hidden: int = 64
    l_outer: int = 20
    l_inner: int = 20
    seed: int = 0
    precision: int = 64

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.kind == "prev" and self.mode != MODE_WITH_PREV:
            raise ValueError("the Prev. baseline requires with_prev mode")
        if self.task == "dcc" and self.n_combos < 1:
            raise ValueError("dcc task needs a combination vocabulary")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @property
    def with_prev(self) -> bool:
        return self.mode == MODE_WITH_PREV

    @property
    def d_base(self) -> int:
        return self.n_icd + self.n_meas

    @property
    def d_flat(self) -> int:
        """Width of one aggregated step's input (LR input / basic RNN step input)."""
        return self.d_base + (N_DRUG_CLASSES if self.with_prev else 0)

    @property
    def n_out(self) -> int:
        return N_DRUG_CLASSES if self.task == "dc" else self.n_combos

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def _case_step_features(case: CaseSequence, with_prev: bool) -> list[np.ndarray]:
    feats = []
    for step in case.outer_steps:
        x = step.aggregated.features()
        if with_prev:
            x = np.concatenate([x, step.prev_drugs])
        feats.append(x)
    return feats


@dataclass
class SeqBatch:
    x: np.ndarray          # (T, B, D) left-padded outer inputs
    mask: np.ndarray       # (T, B)
    labels_dc: np.ndarray  # (B, 7)
    labels_dcc: np.ndarray  # (B,) int, negatives = unknown combos
    cases: list[CaseSequence]
    inner: Optional["InnerBatch"] = None


@dataclass
class InnerBatch:
    x: np.ndarray          # (T_in, R, D) inner days for real outer slots
    mask: np.ndarray       # (T_in, R)
    slot_t: np.ndarray     # (R,) outer time index of each slot
    slot_b: np.ndarray     # (R,) case index of each slot


def _base_batch(cases: Sequence[CaseSequence], width: int, with_prev: bool,
                pad_to: Optional[int], dtype) -> SeqBatch:
    n = len(cases)
    t_max = max(len(c.outer_steps) for c in cases)
    if pad_to is not None:
        if pad_to < t_max:
            raise ShapeError(f"pad_to {pad_to} shorter than longest case {t_max}")
        t_max = pad_to
    x = np.zeros((t_max, n, width), dtype=dtype)
    mask = np.zeros((t_max, n), dtype=dtype)
    labels_dc = np.zeros((n, N_DRUG_CLASSES), dtype=dtype)
    labels_dcc = np.zeros(n, dtype=np.int64)
    for b, case in enumerate(cases):
        matrix = getattr(case, "_feat_matrix", None)
        n_steps = len(case.outer_steps)
        offset = t_max - n_steps  # left padding
        if matrix is not None:
            x[offset:, b, :] = matrix[case._feat_lo:case._feat_hi, :width]
        else:
            for j, f in enumerate(_case_step_features(case, with_prev)):
                x[offset + j, b, :] = f
        mask[offset:, b] = 1.0
        labels_dc[b] = case.label_dc
        labels_dcc[b] = case.label_dcc
    return SeqBatch(x, mask, labels_dc, labels_dcc, list(cases))


def _inner_features(step) -> np.ndarray:
    cached = getattr(step, "_inner_x", None)
    if cached is None:
        cached = np.stack([v.features() for v in step.inner_steps])
        step._inner_x = cached
    return cached


def _inner_batch(cases: Sequence[CaseSequence], t_outer: int, d: int,
                 dtype) -> InnerBatch:
    slots = []
    for b, case in enumerate(cases):
        offset = t_outer - len(case.outer_steps)
        for j, step in enumerate(case.outer_steps):
            slots.append((offset + j, b, step))
    t_in_max = max(len(s.inner_steps) for _, _, s in slots)
    r = len(slots)
    x = np.zeros((t_in_max, r, d), dtype=dtype)
    mask = np.zeros((t_in_max, r), dtype=dtype)
    slot_t = np.empty(r, dtype=np.int64)
    slot_b = np.empty(r, dtype=np.int64)
    for ri, (t, b, step) in enumerate(slots):
        feats = _inner_features(step)
        off = t_in_max - feats.shape[0]
        x[off:, ri, :] = feats
        mask[off:, ri] = 1.0
        slot_t[ri] = t
        slot_b[ri] = b
    return InnerBatch(x, mask, slot_t, slot_b)


class _NeuralModel:
    spec: ModelSpec

    def params(self) -> list[Parameter]:
        raise NotImplementedError

    def named_params(self) -> dict[str, Parameter]:
        out = {}
        for p in self.params():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params())

    def make_batch(self, cases: Sequence[CaseSequence],
                   pad_to: Optional[int] = None) -> SeqBatch:
        raise NotImplementedError

    def forward_batch(self, batch: SeqBatch, train: bool = False,
                      rng: Optional[np.random.Generator] = None
                      ) -> tuple[np.ndarray, dict]:
        raise NotImplementedError

    def backward_batch(self, dlogits: np.ndarray, cache: dict) -> None:
        raise NotImplementedError

    def probs(self, logits: np.ndarray) -> np.ndarray:
        return head_dc(logits) if self.spec.task == "dc" else head_dcc(logits)

    def predict_probs(self, cases: Sequence[CaseSequence],
                      chunk: int = 512) -> np.ndarray:
        """Deterministic inference probabilities for a list of cases."""
        outputs = []
        for lo in range(0, len(cases), chunk):
            batch = self.make_batch(cases[lo:lo + chunk])
            logits, _ = self.forward_batch(batch, train=False)
            outputs.append(self.probs(logits))
        return np.concatenate(outputs, axis=0)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.named_params().items()}

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        named = self.named_params()
        if set(named) != set(tensors):
            missing = set(named) ^ set(tensors)
            raise CheckpointError(f"parameter names do not match: {sorted(missing)}")
        for name, p in named.items():
            arr = tensors[name]
            if arr.shape != p.value.shape:
                raise CheckpointError(
                    f"tensor {name}: shape {arr.shape} vs expected {p.value.shape}")
            p.value[...] = arr.astype(p.value.dtype)


class LrModel(_NeuralModel):
    """Single affine layer over the final outer step's aggregated features."""

    def __init__(self, spec: ModelSpec):
        if spec.kind != "lr":
            raise ValueError("LrModel needs kind='lr'")
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.head = DenseHead("lr.head", spec.d_flat, spec.n_out, rng, spec.dtype)

    def params(self) -> list[Parameter]:
        return self.head.params()

    def make_batch(self, cases, pad_to=None) -> SeqBatch:
        if pad_to is not None:
            return _base_batch(cases, self.spec.d_flat, self.spec.with_prev,
                               pad_to, self.spec.dtype)
        # only the final (always real) step feeds the affine layer
        n = len(cases)
        width = self.spec.d_flat
        x = np.zeros((1, n, width), dtype=self.spec.dtype)
        labels_dc = np.zeros((n, N_DRUG_CLASSES), dtype=self.spec.dtype)
        labels_dcc = np.zeros(n, dtype=np.int64)
        for b, case in enumerate(cases):
            matrix = getattr(case, "_feat_matrix", None)
            if matrix is not None:
                x[0, b, :] = matrix[case._feat_hi - 1, :width]
            else:
                x[0, b, :] = _case_step_features(case, self.spec.with_prev)[-1]
            labels_dc[b] = case.label_dc
            labels_dcc[b] = case.label_dcc
        return SeqBatch(x, np.ones((1, n), dtype=self.spec.dtype), labels_dc,
                        labels_dcc, list(cases))

    def forward_batch(self, batch, train=False, rng=None):
        feats = batch.x[-1]  # final step is always real under left padding
        logits = self.head.forward(feats)
        return logits, {"feats": feats}

    def backward_batch(self, dlogits, cache):
        self.head.backward(dlogits, cache["feats"])


class RnnModel(_NeuralModel):
    """One LSTM over the aggregated outer sequence, dropout, dense head."""

    def __init__(self, spec: ModelSpec):
        if spec.kind != "rnn":
            raise ValueError("RnnModel needs kind='rnn'")
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.cell = LstmCell("rnn.cell", spec.d_flat, spec.hidden, rng, spec.dtype)
        self.head = DenseHead("rnn.head", spec.hidden, spec.n_out, rng, spec.dtype)

    def params(self) -> list[Parameter]:
        return self.cell.params() + self.head.params()

    def make_batch(self, cases, pad_to=None) -> SeqBatch:
        return _base_batch(cases, self.spec.d_flat, self.spec.with_prev,
                           pad_to, self.spec.dtype)

    def forward_batch(self, batch, train=False, rng=None):
        run = run_masked_sequence(self.cell, batch.x, batch.mask)
        h, keep = dropout(run.h_final, DROPOUT_RATE, train, rng)
        logits = self.head.forward(h)
        return logits, {"run": run, "h_drop": h, "keep": keep}

    def backward_batch(self, dlogits, cache):
        dh = self.head.backward(dlogits, cache["h_drop"])
        dh = dropout_backward(dh, cache["keep"])
        lstm_backward_from_final(self.cell, cache["run"], dh)


class Hrnn1Model(_NeuralModel):
    """Hierarchical model: one shared lower LSTM encodes each sandwich window of
    day vectors; the upper LSTM consumes the window encodings."""

    def __init__(self, spec: ModelSpec):
        if spec.kind != "hrnn1":
            raise ValueError("Hrnn1Model needs kind='hrnn1'")
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.lower = LstmCell("hrnn1.lower", spec.d_base, spec.hidden, rng, spec.dtype)
        upper_in = spec.hidden + (N_DRUG_CLASSES if spec.with_prev else 0)
        self.upper = LstmCell("hrnn1.upper", upper_in, spec.hidden, rng, spec.dtype)
        self.head = DenseHead("hrnn1.head", spec.hidden, spec.n_out, rng, spec.dtype)

    def params(self) -> list[Parameter]:
        return self.lower.params() + self.upper.params() + self.head.params()

    def make_batch(self, cases, pad_to=None) -> SeqBatch:
        batch = _base_batch(cases, self.spec.d_flat, self.spec.with_prev,
                            pad_to, self.spec.dtype)
        batch.inner = _inner_batch(cases, batch.x.shape[0], self.spec.d_base,
                                   self.spec.dtype)
        return batch

    def _upper_input(self, batch, h_low):
        t_len, n = batch.mask.shape
        hsz = self.spec.hidden
        enc = np.zeros((t_len, n, hsz), dtype=batch.x.dtype)
        enc[batch.inner.slot_t, batch.inner.slot_b] = h_low
        if self.spec.with_prev:
            prev = batch.x[:, :, self.spec.d_base:]
            return np.concatenate([enc, prev], axis=2)
        return enc

    def forward_batch(self, batch, train=False, rng=None):
        inner = batch.inner
        low_run = run_masked_sequence(self.lower, inner.x, inner.mask)
        upper_x = self._upper_input(batch, low_run.h_final)
        up_run = run_masked_sequence(self.upper, upper_x, batch.mask)
        h, keep = dropout(up_run.h_final, DROPOUT_RATE, train, rng)
        logits = self.head.forward(h)
        return logits, {"low_run": low_run, "up_run": up_run,
                        "h_drop": h, "keep": keep, "batch": batch}

    def backward_batch(self, dlogits, cache):
        batch = cache["batch"]
        dh = self.head.backward(dlogits, cache["h_drop"])
        dh = dropout_backward(dh, cache["keep"])
        d_upper_x = lstm_backward_from_final(self.upper, cache["up_run"], dh)
        hsz = self.spec.hidden
        d_enc = d_upper_x[:, :, :hsz]
        dh_low = d_enc[batch.inner.slot_t, batch.inner.slot_b]
        lstm_backward_from_final(self.lower, cache["low_run"], dh_low)


class Hrnn2Model(_NeuralModel):
    """Two lower LSTMs (diagnosis branch, measurement branch) whose window
    encodings are concatenated, plus raw previous-drug bits in with_prev mode."""

    def __init__(self, spec: ModelSpec):
        if spec.kind != "hrnn2":
            raise ValueError("Hrnn2Model needs kind='hrnn2'")
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.lower_icd = LstmCell("hrnn2.lower_icd", spec.n_icd, spec.hidden,
                                  rng, spec.dtype)
        self.lower_meas = LstmCell("hrnn2.lower_meas", spec.n_meas, spec.hidden,
                                   rng, spec.dtype)
        upper_in = 2 * spec.hidden + (N_DRUG_CLASSES if spec.with_prev else 0)
        self.upper = LstmCell("hrnn2.upper", upper_in, spec.hidden, rng, spec.dtype)
        self.head = DenseHead("hrnn2.head", spec.hidden, spec.n_out, rng, spec.dtype)

    def params(self) -> list[Parameter]:
        return (self.lower_icd.params() + self.lower_meas.params()
                + self.upper.params() + self.head.params())

    def make_batch(self, cases, pad_to=None) -> SeqBatch:
        batch = _base_batch(cases, self.spec.d_flat, self.spec.with_prev,
                            pad_to, self.spec.dtype)
        batch.inner = _inner_batch(cases, batch.x.shape[0], self.spec.d_base,
                                   self.spec.dtype)
        return batch

    def forward_batch(self, batch, train=False, rng=None):
        inner = batch.inner
        k = self.spec.n_icd
        icd_run = run_masked_sequence(self.lower_icd, inner.x[:, :, :k], inner.mask)
        meas_run = run_masked_sequence(self.lower_meas, inner.x[:, :, k:], inner.mask)
        h_cat = merge_concat([icd_run.h_final, meas_run.h_final])
        t_len, n = batch.mask.shape
        enc = np.zeros((t_len, n, 2 * self.spec.hidden), dtype=batch.x.dtype)
        enc[inner.slot_t, inner.slot_b] = h_cat
        if self.spec.with_prev:
            prev = batch.x[:, :, self.spec.d_base:]
            upper_x = np.concatenate([enc, prev], axis=2)
        else:
            upper_x = enc
        up_run = run_masked_sequence(self.upper, upper_x, batch.mask)
        h, keep = dropout(up_run.h_final, DROPOUT_RATE, train, rng)
        logits = self.head.forward(h)
        return logits, {"icd_run": icd_run, "meas_run": meas_run,
                        "up_run": up_run, "h_drop": h, "keep": keep,
                        "batch": batch}

    def backward_batch(self, dlogits, cache):
        batch = cache["batch"]
        dh = self.head.backward(dlogits, cache["h_drop"])
        dh = dropout_backward(dh, cache["keep"])
        d_upper_x = lstm_backward_from_final(self.upper, cache["up_run"], dh)
        hsz = self.spec.hidden
        d_enc = d_upper_x[:, :, :2 * hsz]
        d_cat = d_enc[batch.inner.slot_t, batch.inner.slot_b]
        d_icd, d_meas = merge_concat_backward(d_cat, [hsz, hsz])
        lstm_backward_from_final(self.lower_icd, cache["icd_run"], d_icd)
        lstm_backward_from_final(self.lower_meas, cache["meas_run"], d_meas)


class PrevPredictor:
    """Repeats the final outer step's previously prescribed combination.

    Head cases (no previous medication) abstain: the combination prediction is
    None and the per-class scores are all zero.
    """

    def __init__(self, combo_vocab: DrugComboVocab):
        self.combo_vocab = combo_vocab

    def predict(self, case: CaseSequence) -> tuple[np.ndarray, Optional[int]]:
        prev = case.outer_steps[-1].prev_drugs
        if not prev.any():
            return np.zeros(N_DRUG_CLASSES), None
        return prev.astype(np.float64), self.combo_vocab.encode(combo_from_vec(prev))


def build_model(spec: ModelSpec) -> _NeuralModel:
    cls = {"lr": LrModel, "rnn": RnnModel, "hrnn1": Hrnn1Model, "hrnn2": Hrnn2Model}
    if spec.kind not in cls:
        raise ValueError(f"{spec.kind!r} is not a trainable neural model")
    return cls[spec.kind](spec)


class CheckpointError(RuntimeError):
    pass


CHECKPOINT_MAGIC = b"MEDSEQC1"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """Portable model state: spec, vocab fingerprint, training metadata, tensors."""

    spec: ModelSpec
    fingerprint: dict
    train_meta: dict
    tensors: dict[str, np.ndarray]

    def to_model(self) -> _NeuralModel:
        model = build_model(self.spec)
        model.load_tensors(self.tensors)
        return model

    @classmethod
    def from_model(cls, model: _NeuralModel, fingerprint: dict,
                   train_meta: dict) -> "Checkpoint":
        tensors = {k: v.astype(np.float64).copy() for k, v in model.tensors().items()}
        return cls(model.spec, dict(fingerprint), dict(train_meta), tensors)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    meta = {
        "spec": ckpt.spec.to_dict(),
        "fingerprint": ckpt.fingerprint,
        "train_meta": ckpt.train_meta,
    }
    meta_bytes = _canonical_json(meta)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        names = sorted(ckpt.tensors)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def load_checkpoint(path: str,
                    expect_fingerprint: Optional[dict] = None) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0]
                          for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            buf = _read_exact(fh, 8 * count)
            tensors[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after checkpoint payload")
    ckpt = Checkpoint(ModelSpec.from_dict(meta["spec"]), meta["fingerprint"],
                      meta["train_meta"], tensors)
    if expect_fingerprint is not None and ckpt.fingerprint != expect_fingerprint:
        raise CheckpointError(
            "vocabulary fingerprint mismatch: checkpoint "
            f"{ckpt.fingerprint} vs dataset {expect_fingerprint}")
    return ckpt
