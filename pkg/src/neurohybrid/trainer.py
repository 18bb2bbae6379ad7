"""Training protocol: stratified splits, weighted BCE, Adam, plateau/early stop, CV."""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import voltensor as vt
from .metrics import auc
from .netarch import ArchitectureConfig, ModelCheckpoint, build_model, forward, predict_proba
from .voltensor import Tensor

log = logging.getLogger(__name__)

CLAMP_EPS = 1e-7


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite."""


@dataclass
class TrainConfig:
    batch_size: int = 2
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 100
    stop_patience: int = 12
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    min_delta: float = 1e-4
    seed: int = 0
    class_weight: str = "balanced"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.stop_patience < 1 or self.plateau_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.class_weight not in ("balanced", "none"):
            raise ValueError("class_weight must be 'balanced' or 'none'")


def derive_seed(seed: int, *keys) -> int:
    """Stable child seed from a master seed and string/int keys."""
    words = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


# ---------------------------------------------------------------- loss


def class_weights(labels) -> tuple[float, float]:
    """Balanced weights ``N / (2 n_c)`` for (negative, positive)."""
    y = np.asarray(labels)
    n = y.size
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != n:
        raise ValueError("labels must be binary 0/1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("class weights need both classes present")
    return n / (2.0 * n_neg), n / (2.0 * n_pos)


def weighted_bce(p: Tensor, y, weights=(1.0, 1.0), events: list | None = None) -> Tensor:
    """Mean of ``-w_y [y log p + (1-y) log(1-p)]`` over the batch.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]``; clamped entries get
    zero gradient and, when ``events`` is given, append a record to it.
    """
    y = np.asarray(y, dtype=p.data.dtype).reshape(p.shape)
    w = np.where(y == 1, weights[1], weights[0]).astype(p.data.dtype)
    pc = np.clip(p.data, CLAMP_EPS, 1.0 - CLAMP_EPS)
    clamped = pc != p.data
    if clamped.any():
        log.debug("weighted_bce: clamped %d probabilities", int(clamped.sum()))
        if events is not None:
            events.append({"event": "clamp", "count": int(clamped.sum())})
    n = p.size
    loss = -(w * (y * np.log(pc) + (1.0 - y) * np.log1p(-pc))).sum() / n

    def rule(g):
        dp = -w * (y / pc - (1.0 - y) / (1.0 - pc)) / n
        return (np.where(clamped, 0.0, dp * g).astype(p.data.dtype),)

    return vt._result(np.asarray(loss, dtype=p.data.dtype), (p,), rule)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update applied in place to ``params``."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise vt.ShapeError(f"adam: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape:
            raise vt.ShapeError(f"adam: moment buffer for {name} has shape {m.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    return state


# ---------------------------------------------------------------- splits


@dataclass
class SplitPlan:
    """Held-out test ids, the training pool and its CV folds."""

    train_ids: list[str]
    test_ids: list[str]
    folds: list[tuple[list[str], list[str]]] = field(default_factory=list)
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "train_ids": self.train_ids, "test_ids": self.test_ids,
             "folds": [{"train": list(t), "validation": list(v)} for t, v in self.folds]},
            indent=1, sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        d = json.loads(text)
        return cls(d["train_ids"], d["test_ids"], [(f["train"], f["validation"]) for f in d["folds"]], d["seed"])


def _by_class(ids: Sequence[str], labels) -> dict:
    groups: dict = {}
    for i, lab in zip(ids, labels):
        groups.setdefault(lab, []).append(i)
    return groups


def stratified_split(ids: Sequence[str], labels, test_fraction: float = 0.2, seed: int = 0) -> SplitPlan:
    """Per-class shuffled, proportional train/test split.

    Each class contributes ``round(n_c * test_fraction)`` test subjects,
    clipped to leave at least one subject on each side.
    """
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for lab, members in sorted(_by_class(ids, labels).items(), key=lambda kv: str(kv[0])):
        if len(members) < 2:
            raise ValueError(f"class {lab!r} has {len(members)} subject(s); need >= 2")
        order = [members[i] for i in rng.permutation(len(members))]
        n_test = min(max(math.floor(len(members) * test_fraction + 0.5), 1), len(members) - 1)
        test += order[:n_test]
        train += order[n_test:]
    return SplitPlan(train_ids=train, test_ids=test, seed=seed)


def stratified_kfold(ids: Sequence[str], labels, k: int = 5, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """k (train, validation) partitions; each class is dealt round-robin over folds."""
    if k < 2:
        raise ValueError("k must be >= 2")
    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    start = 0
    for lab, members in sorted(_by_class(ids, labels).items(), key=lambda kv: str(kv[0])):
        if len(members) < k:
            raise ValueError(f"class {lab!r} has {len(members)} subject(s); need >= k={k}")
        order = [members[i] for i in rng.permutation(len(members))]
        for j, sid in enumerate(order):
            folds[(start + j) % k].append(sid)
        start = (start + len(members)) % k
    out = []
    for i in range(k):
        val = set(folds[i])
        out.append(([s for s in ids if s not in val], [s for s in ids if s in val]))
    return out


# ---------------------------------------------------------------- training


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0
    best_metric: float = math.inf

    @property
    def learning_rates(self) -> list[float]:
        return [e["lr"] for e in self.epochs]

    @property
    def train_loss(self) -> list[float]:
        return [e["train_loss"] for e in self.epochs]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.epochs)


class PlateauMonitor:
    """Tracks a monitored loss; halves the lr on plateaus and signals early stop.

    An epoch improves when ``metric < best - min_delta``.  After
    ``plateau_patience`` epochs without improvement since the last
    improvement or reduction, the lr is multiplied by ``factor``.  After
    ``stop_patience`` epochs without improvement, training stops.
    """

    def __init__(self, lr: float, plateau_patience: int, stop_patience: int, factor: float, min_delta: float):
        self.lr = lr
        self.plateau_patience = plateau_patience
        self.stop_patience = stop_patience
        self.factor = factor
        self.min_delta = min_delta
        self.best = math.inf
        self.since_best = 0
        self.since_reduce = 0

    def update(self, metric: float) -> list[str]:
        events = []
        if metric < self.best - self.min_delta:
            self.best = metric
            self.since_best = 0
            self.since_reduce = 0
            events.append("improved")
            return events
        self.since_best += 1
        self.since_reduce += 1
        if self.since_best >= self.stop_patience:
            events.append("early_stop")
        elif self.since_reduce >= self.plateau_patience:
            self.lr *= self.factor
            self.since_reduce = 0
            events.append("lr_reduced")
        return events


@dataclass
class Dataset:
    """Branch inputs [N, C, D, H, W] per branch, binary labels, subject ids."""

    inputs: dict[str, np.ndarray]
    labels: np.ndarray
    ids: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, ids: Sequence[str]) -> "Dataset":
        pos = {s: i for i, s in enumerate(self.ids)}
        idx = np.array([pos[s] for s in ids], dtype=int)
        return Dataset({b: v[idx] for b, v in self.inputs.items()}, self.labels[idx], [self.ids[i] for i in idx])


def evaluate_loss(model: ModelCheckpoint, data: Dataset, weights, chunk: int | None = None) -> float:
    p = np.clip(predict_proba(model, data.inputs, chunk), CLAMP_EPS, 1 - CLAMP_EPS)
    y = data.labels
    w = np.where(y == 1, weights[1], weights[0])
    return float(-(w * (y * np.log(p) + (1 - y) * np.log1p(-p))).mean())


def train(
    model: ModelCheckpoint,
    data: Dataset,
    cfg: TrainConfig,
    validation: Dataset | None = None,
) -> tuple[ModelCheckpoint, TrainHistory]:
    """Mini-batch Adam with plateau lr reduction and early stopping.

    The monitored metric is the validation loss when ``validation`` is given,
    otherwise the mean training loss of the epoch.  On return the model holds
    the parameters of the best monitored epoch.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    weights = class_weights(data.labels) if cfg.class_weight == "balanced" else (1.0, 1.0)
    rng = np.random.default_rng(cfg.seed)
    params = dict(model.parameters())
    arrays = {k: t.data for k, t in params.items()}
    state = AdamState()
    monitor = PlateauMonitor(cfg.learning_rate, cfg.plateau_patience, cfg.stop_patience, cfg.plateau_factor, cfg.min_delta)
    history = TrainHistory()
    best_snapshot = model.snapshot()
    n = len(data)
    for epoch in range(1, cfg.max_epochs + 1):
        lr = monitor.lr
        order = rng.permutation(n)
        losses, events = [], []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch = {b: v[idx] for b, v in data.inputs.items()}
            with vt.Tape() as tape:
                res = forward(model, batch, training=True, rng=rng)
                loss = weighted_bce(res.probability, data.labels[idx], weights, events)
            value = float(np.asarray(loss.data).item())
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch}, batch {bi}")
            tape.backward(loss)
            adam_step(arrays, {k: t.grad for k, t in params.items()}, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            for t in tape.tensors():
                t.grad = None
            losses.append(value * len(idx))
        train_loss = float(np.sum(losses) / n)
        record = {"epoch": epoch, "train_loss": train_loss, "lr": lr}
        if validation is not None:
            record["val_loss"] = evaluate_loss(model, validation, weights)
        metric = record.get("val_loss", train_loss)
        signals = monitor.update(metric)
        if "improved" in signals:
            best_snapshot = model.snapshot()
            history.best_epoch, history.best_metric = epoch, metric
        record["events"] = [e for e in signals] + [f"clamp:{e['count']}" for e in events]
        history.epochs.append(record)
        log.info("epoch %d loss %.5f%s lr %.2e %s", epoch, train_loss,
                 f" val {record['val_loss']:.5f}" if validation is not None else "", lr, " ".join(signals))
        if "early_stop" in signals:
            history.stop_reason = "early_stop"
            break
    else:
        history.stop_reason = "max_epochs"
    model.restore(best_snapshot)
    model.metadata["epochs_run"] = len(history.epochs)
    model.metadata["best_epoch"] = history.best_epoch
    return model, history


@dataclass
class CVResult:
    histories: list[TrainHistory]
    fold_aucs: list[float]
    best_epochs: list[int]

    @property
    def epoch_budget(self) -> int:
        return max(1, int(math.ceil(float(np.median(self.best_epochs)))))

    @property
    def mean_auc(self) -> float:
        return float(np.mean(self.fold_aucs))

    def summary(self) -> dict:
        return {"fold_aucs": self.fold_aucs, "mean_auc": self.mean_auc,
                "best_epochs": self.best_epochs, "epoch_budget": self.epoch_budget}


def fold_seed(seed: int, validation_ids: Sequence[str]) -> int:
    """Seed tied to the fold's content so fold order does not matter."""
    return derive_seed(seed, "fold", ",".join(sorted(validation_ids)))


def cross_validate(
    data: Dataset,
    folds: Sequence[tuple[Sequence[str], Sequence[str]]],
    arch: ArchitectureConfig,
    cfg: TrainConfig,
    dtype=None,
) -> CVResult:
    """Train one fresh model per fold and score it on the fold's validation part."""
    histories, aucs, best = [], [], []
    for i, (tr, va) in enumerate(folds):
        seed = fold_seed(cfg.seed, va)
        model = build_model(arch, seed, dtype)
        fold_cfg = TrainConfig(**{**asdict(cfg), "seed": seed})
        vdata = data.subset(va)
        model, hist = train(model, data.subset(tr), fold_cfg, validation=vdata)
        score = auc(vdata.labels, predict_proba(model, vdata.inputs))
        log.info("fold %d: best epoch %d, AUC %.4f", i, hist.best_epoch, score)
        histories.append(hist)
        aucs.append(float(score))
        best.append(hist.best_epoch)
    return CVResult(histories, aucs, best)
