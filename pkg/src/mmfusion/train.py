"""Adam + binary cross entropy training and per-class ROC-AUC evaluation."""

from __future__ import annotations

import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .checkpoint import save_checkpoint
from .data import CLASS_NAMES, Dataset, batch_iter
from .features import Tokenizer
from .tensor import Rng, Tensor, add, backward, clip, log, mul, scale, total, _topo

log_ = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 20
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if not isinstance(self.epochs, int) or self.epochs < 0:
            out.append(f"epochs must be a non-negative integer (got {self.epochs!r})")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            out.append(f"batch_size must be a positive integer (got {self.batch_size!r})")
        for name in ("learning_rate", "epsilon"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be positive")
        if self.weight_decay < 0:
            out.append("weight_decay must be non-negative")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                out.append(f"{name} must lie in [0, 1)")
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def bce_loss(probs: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} differ in shape")
    p = clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = Tensor(labels)
    one_minus_p = add(scale(p, -1.0), Tensor(np.ones_like(labels)))
    ll = add(mul(y, log(p)), mul(Tensor(1.0 - labels), log(one_minus_p)))
    return scale(total(ll), -1.0 / max(labels.size, 1))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: Sequence[Tensor], state: AdamState, cfg: TrainConfig):
    """One Adam update with coupled L2 decay; zeroes the grads afterwards."""
    live = [p for p in params if p.requires_grad]
    for p in live:
        if p.grad is None:
            raise ValueError(f"trainable parameter {p.name or p.shape} has no gradient")
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for p in live:
        key = id(p)
        g = p.grad + cfg.weight_decay * p.data
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m = state.m[key] = cfg.beta1 * state.m[key] + (1.0 - cfg.beta1) * g
        v = state.v[key] = cfg.beta2 * state.v[key] + (1.0 - cfg.beta2) * g * g
        p.data = p.data - cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
        p.grad = None


def roc_auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with ties counted one half; None if a class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores ({scores.shape}) and labels ({labels.shape}) differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class EvalResult:
    loss: float
    auc_per_class: list
    mean_auc: float | None
    probs: np.ndarray = field(repr=False, default=None)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MMFX_THREADS", "1")))
    except ValueError:
        return 1


def predict(model, dataset: Dataset, tokenizer: Tokenizer, batch_size: int = 20,
            seq_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode probabilities for every example, in dataset order."""
    seq_len = seq_len or model.cfg.text_seq_len
    batches = list(batch_iter(dataset, batch_size, tokenizer, seq_len))
    if not batches:
        n = model.cfg.n_classes
        return np.zeros((0, n)), np.zeros((0, n))

    def run(b):
        return model.forward(b.token_ids, b.images, training=False).data

    n_threads = min(_threads(), len(batches))
    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            outs = list(pool.map(run, batches))  # map preserves dataset order
    else:
        outs = [run(b) for b in batches]
    return np.concatenate(outs), np.concatenate([b.labels for b in batches])


def _bce_value(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-(labels * np.log(p) + (1 - labels) * np.log(1 - p)).mean())


def evaluate(model, dataset: Dataset, tokenizer: Tokenizer, batch_size: int = 20) -> EvalResult:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs, labels = predict(model, dataset, tokenizer, batch_size)
    aucs = [roc_auc(probs[:, c], labels[:, c]) for c in range(probs.shape[1])]
    defined = [a for a in aucs if a is not None]
    mean_auc = float(np.mean(defined)) if defined else None
    return EvalResult(_bce_value(probs, labels), aucs, mean_auc, probs)


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc_per_class: list
    val_mean_auc: float | None


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def metrics_csv(records: Sequence[MetricsRecord], n_classes: int = len(CLASS_NAMES)) -> str:
    buf = io.StringIO()
    header = ["epoch", "train_loss", "val_loss", "val_mean_auc"] + [f"auc_{c}" for c in range(n_classes)]
    buf.write(",".join(header) + "\n")
    for r in records:
        row = [str(r.epoch), _fmt(r.train_loss), _fmt(r.val_loss), _fmt(r.val_mean_auc)]
        row += [_fmt(a) for a in r.val_auc_per_class]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def connected_parameters(model, batch, rng_seed: int = 0) -> list[Tensor]:
    """Trainable parameters that actually reach the loss for this wiring."""
    probs = model.forward(batch.token_ids, batch.images, training=True, rng=Rng(rng_seed))
    reach = {id(n) for n in _topo(bce_loss(probs, batch.labels))}
    return [p for p in model.parameters() if p.requires_grad and id(p) in reach]


@dataclass
class TrainResult:
    records: list[MetricsRecord]
    best_path: Path | None
    best_auc: float | None


def train_loop(model, train: Dataset, validation: Dataset, tokenizer: Tokenizer, tcfg: TrainConfig,
               out_dir: str | Path | None = None, checkpoint_name: str = "best.mmfx") -> TrainResult:
    problems = tcfg.problems()
    if problems:
        raise ValueError("invalid train config: " + "; ".join(problems))
    records: list[MetricsRecord] = []
    if tcfg.epochs == 0 or len(train) == 0:
        return TrainResult(records, None, None)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    rng = Rng(tcfg.seed)
    seq_len = model.cfg.text_seq_len
    probe = next(batch_iter(train, tcfg.batch_size, tokenizer, seq_len))
    params = connected_parameters(model, probe)
    state = AdamState()
    best_auc, best_path = None, None
    for epoch in range(tcfg.epochs):
        loss_sum, n_seen = 0.0, 0
        for batch in batch_iter(train, tcfg.batch_size, tokenizer, seq_len, shuffle=True, rng=rng):
            probs = model.forward(batch.token_ids, batch.images, training=True, rng=rng)
            loss = bce_loss(probs, batch.labels)
            backward(loss)
            adam_step(params, state, tcfg)
            loss_sum += float(loss.data) * len(batch)
            n_seen += len(batch)
        if len(validation):
            ev = evaluate(model, validation, tokenizer, tcfg.batch_size)
            rec = MetricsRecord(epoch, loss_sum / n_seen, ev.loss, ev.auc_per_class, ev.mean_auc)
        else:
            rec = MetricsRecord(epoch, loss_sum / n_seen, float("nan"), [None] * model.cfg.n_classes, None)
        records.append(rec)
        log_.info("epoch %d train_loss %.5f val_loss %.5f val_mean_auc %s",
                  epoch, rec.train_loss, rec.val_loss, rec.val_mean_auc)
        if out_dir is not None and rec.val_mean_auc is not None and (
                best_auc is None or rec.val_mean_auc > best_auc):
            best_auc = rec.val_mean_auc
            best_path = Path(out_dir) / checkpoint_name
            save_checkpoint(model, best_path, tokenizer, {"epoch": epoch, "val_mean_auc": best_auc})
    return TrainResult(records, best_path, best_auc)
