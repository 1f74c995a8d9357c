"""Losses, optimizers, the training loop, metrics and experiment records."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .attention import RELATIONS
from .block import VARIANTS
from .geometry import PointCloud
from .model import ModelConfig, SpotrNet, build_model, collate
from .numerics import NumericError, Tensor

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or activation."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    variant: str = "full"
    relation: str = "sub"
    eval_every: int = 1

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be sgd or adam")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.relation not in RELATIONS:
            raise ValueError(f"relation must be one of {RELATIONS}")


# --------------------------------------------------------------------------
# loss and optimizers


def cross_entropy(logits, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over all leading positions.

    ``logits (..., K)`` and integer ``labels`` with shape ``logits.shape[:-1]``.
    """
    logits = nx.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    ls = nx.reshape(nx.log_softmax(logits, axis=-1), (-1, k, 1))
    picked = nx.gather(ls, labels.reshape(-1, 1))
    return nx.mul(nx.sum(picked), -1.0 / labels.size)


class SGD:
    def __init__(self, params, lr: float):
        self.params, self.lr = list(params), lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params, tc: TrainConfig):
    if tc.optimizer == "sgd":
        return SGD(params, tc.lr)
    return Adam(params, tc.lr, tc.beta1, tc.beta2, tc.eps)


# --------------------------------------------------------------------------
# metrics


def classification_metrics(pred, true, num_classes: int) -> dict:
    """OA, mAcc (mean over classes present in ``true``) and per-class accuracy."""
    pred, true = np.asarray(pred).reshape(-1), np.asarray(true).reshape(-1)
    per_class = {}
    for c in range(num_classes):
        sel = true == c
        if sel.any():
            per_class[c] = float((pred[sel] == c).mean())
    return {
        "oa": float((pred == true).mean()) if true.size else float("nan"),
        "macc": float(np.mean(list(per_class.values()))) if per_class else float("nan"),
        "per_class": per_class,
    }


def instance_miou(preds, trues) -> float:
    """Mean over samples of the mean IoU over parts seen in truth or prediction."""
    scores = []
    for p, t in zip(preds, trues):
        p, t = np.asarray(p), np.asarray(t)
        parts = np.union1d(np.unique(p), np.unique(t))
        ious = [np.logical_and(p == k, t == k).sum() / np.logical_or(p == k, t == k).sum() for k in parts]
        scores.append(float(np.mean(ious)))
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# training


def _targets(clouds: list[PointCloud], task: str) -> np.ndarray:
    if task == "classify":
        if any(pc.label is None for pc in clouds):
            raise ValueError("classification needs a class label on every cloud")
        return np.array([pc.label for pc in clouds], dtype=np.int64)
    if any(pc.point_labels is None for pc in clouds):
        raise ValueError("segmentation needs per-point labels on every cloud")
    return np.stack([pc.point_labels for pc in clouds])


def check_compatible(dataset: list[PointCloud], cfg: ModelConfig) -> None:
    if not dataset:
        raise ValueError("dataset is empty")
    n = {len(pc) for pc in dataset}
    if len(n) != 1:
        raise ValueError("all clouds in a dataset must have the same point count")
    y = _targets(dataset, cfg.task)
    k = cfg.num_classes if cfg.task == "classify" else cfg.num_parts
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"dataset labels exceed the model's {k} outputs")


class PlanCache:
    """Geometry plans keyed by cloud position within a dataset."""

    def __init__(self, model: SpotrNet, dataset: list[PointCloud]):
        self.plans = [model.plan(pc.positions) for pc in dataset]

    def batch(self, idx):
        return collate([self.plans[i] for i in idx])


def predict(model: SpotrNet, dataset: list[PointCloud], batch_size: int = 32, cache: PlanCache | None = None):
    """Argmax predictions and mean loss over a dataset (no tape)."""
    cache = cache or PlanCache(model, dataset)
    y = _targets(dataset, model.cfg.task)
    preds, loss_sum = [], 0.0
    with nx.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(len(dataset), start + batch_size))
            logits = model(cache.batch(idx))
            loss_sum += cross_entropy(logits, y[idx]).item() * len(idx)
            preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds), loss_sum / len(dataset)


def evaluate(dataset: list[PointCloud], model: SpotrNet, cache: PlanCache | None = None) -> dict:
    """OA / mAcc / per-class accuracy, plus instance mIoU for segmentation."""
    check_compatible(dataset, model.cfg)
    pred, loss = predict(model, dataset, cache=cache)
    y = _targets(dataset, model.cfg.task)
    k = model.cfg.num_classes if model.cfg.task == "classify" else model.cfg.num_parts
    m = classification_metrics(pred, y, k)
    m["loss"] = loss
    if model.cfg.task == "segment":
        m["miou"] = instance_miou(pred, y)
    return m


@dataclass
class TrainResult:
    model: SpotrNet
    history: list = field(default_factory=list)   # dict rows: epoch, split, loss, oa, macc[, miou]

    def metrics_csv(self) -> str:
        seg = self.model.cfg.task == "segment"
        cols = ["epoch", "split", "loss", "oa", "macc"] + (["miou"] if seg else [])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.history:
            w.writerow([row["epoch"], row["split"]] + ["%.17g" % row[c] for c in cols[2:]])
        return buf.getvalue()


def train(dataset: list[PointCloud], cfg: ModelConfig, tc: TrainConfig,
          test: list[PointCloud] | None = None) -> TrainResult:
    """Train with a fixed seeded shuffle; the variant and relation in ``tc``
    override those in ``cfg``.

    Each epoch logs the running training loss/accuracy (split ``train``) and,
    when ``test`` is given, a full evaluation (split ``test``).
    """
    cfg = replace(cfg, variant=tc.variant, relation=tc.relation)
    check_compatible(dataset, cfg)
    if test:
        check_compatible(test, cfg)
    model = build_model(cfg, tc.seed)
    rng = np.random.default_rng(tc.seed)
    cache = PlanCache(model, dataset)
    test_cache = PlanCache(model, test) if test else None
    y = _targets(dataset, cfg.task)
    k = cfg.num_classes if cfg.task == "classify" else cfg.num_parts
    opt = make_optimizer(model.parameters(), tc)
    result = TrainResult(model)
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(dataset))
        loss_sum, preds = 0.0, np.empty_like(y)
        for start in range(0, len(order), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            model.zero_grad()
            try:
                logits = model(cache.batch(idx))
                loss = cross_entropy(logits, y[idx])
                loss.backward()
            except NumericError as exc:
                raise DivergenceError(f"non-finite values at epoch {epoch}, batch starting {start}: {exc}") from exc
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"loss is not finite at epoch {epoch}")
            opt.step()
            loss_sum += loss.item() * len(idx)
            preds[idx] = np.argmax(logits.data, axis=-1)
        row = {"epoch": epoch, "split": "train", "loss": loss_sum / len(dataset)}
        row.update({key: v for key, v in classification_metrics(preds, y, k).items() if key != "per_class"})
        if cfg.task == "segment":
            row["miou"] = instance_miou(preds, y)
        result.history.append(row)
        log.info("epoch %d train loss %.4f oa %.4f", epoch, row["loss"], row["oa"])
        if test and (epoch % tc.eval_every == 0 or epoch == tc.epochs):
            m = evaluate(test, model, test_cache)
            trow = {"epoch": epoch, "split": "test", "loss": m["loss"], "oa": m["oa"], "macc": m["macc"]}
            if cfg.task == "segment":
                trow["miou"] = m["miou"]
            result.history.append(trow)
            log.info("epoch %d test oa %.4f", epoch, m["oa"])
    return result


# --------------------------------------------------------------------------
# experiment records


def content_hash(data: bytes) -> str:
    """Git-style blob hash (sha1 over ``blob <len>\\0`` + content)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def experiment_record(cfg: ModelConfig, tc: TrainConfig, dataset_hash: str) -> dict:
    return {"model": cfg.to_kv(), "train": asdict(tc), "seed": tc.seed, "dataset_hash": dataset_hash}
