"""
Desk-scale learning tasks.

Synthetic Gaussian class clusters stand in for image datasets. Models are a
multinomial logistic regression (default) and a one-hidden-layer tanh MLP; both
are written directly against numpy with explicit gradients so trainers and
servers can run many small SGD windows cheaply.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Final

import numpy as np
import numpy.typing as npt

from aggchain.errors import TrainingError
from aggchain.rng import SeedStreams

logger = logging.getLogger(__name__)

ModelParams = npt.NDArray[np.float64]

# floor(epochs * n) must not lose an example to float noise (0.29 * 100 = 28.999...)
_VISIT_EPS: Final[float] = 1e-9


@dataclass(frozen=True)
class Dataset:
    features: npt.NDArray[np.float64]
    labels: npt.NDArray[np.int64]
    n_classes: int

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise TrainingError("features must be 2-D and labels 1-D")
        if len(self.features) != len(self.labels):
            raise TrainingError(
                f"{len(self.features)} feature rows but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def label_histogram(self, indices: npt.NDArray[np.int64] | None = None) -> npt.NDArray[np.float64]:
        labels = self.labels if indices is None else self.labels[indices]
        counts = np.bincount(labels, minlength=self.n_classes).astype(np.float64)
        return counts / max(1, len(labels))


@dataclass(frozen=True)
class DataShard:
    owner: str
    indices: npt.NDArray[np.int64]

    def __len__(self) -> int:
        return len(self.indices)

    def without(self, removed: npt.NDArray[np.int64]) -> DataShard:
        keep = np.setdiff1d(self.indices, removed, assume_unique=True)
        return DataShard(self.owner, keep)


@dataclass
class TrainerProfile:
    trainer_id: str
    cpu_speed: float
    shard: DataShard
    uploaded: set[int] = field(default_factory=set)

    def __post_init__(self) -> None:
        if self.cpu_speed <= 0:
            raise TrainingError(f"{self.trainer_id}: cpu_speed must be > 0, got {self.cpu_speed}")

    def offload(self, indices: npt.NDArray[np.int64]) -> None:
        """Hand ``indices`` to the server; they are never trained locally again."""
        self.uploaded.update(int(i) for i in indices)
        self.shard = self.shard.without(indices)


# ---------------------------------------------------------------------------
# models


class Model:
    n_classes: int
    dim: int

    @property
    def n_params(self) -> int:
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator) -> ModelParams:
        raise NotImplementedError

    def logits(self, params: ModelParams, x: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
        raise NotImplementedError

    def loss_and_grad(
        self,
        params: ModelParams,
        x: npt.NDArray[np.float64],
        y: npt.NDArray[np.int64],
        l2: float = 0.0,
    ) -> tuple[float, ModelParams]:
        raise NotImplementedError

    def loss(
        self, params: ModelParams, x: npt.NDArray[np.float64], y: npt.NDArray[np.int64], l2: float = 0.0
    ) -> float:
        probs = _softmax(self.logits(params, x))
        nll = -np.mean(np.log(probs[np.arange(len(y)), y] + 1e-300))
        return float(nll + 0.5 * l2 * float(params @ params))


def _softmax(z: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _one_hot(y: npt.NDArray[np.int64], n_classes: int) -> npt.NDArray[np.float64]:
    out = np.zeros((len(y), n_classes))
    out[np.arange(len(y)), y] = 1.0
    return out


@dataclass(frozen=True)
class LogisticModel(Model):
    dim: int
    n_classes: int

    @property
    def n_params(self) -> int:
        return (self.dim + 1) * self.n_classes

    def _split(self, params: ModelParams) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
        w = params[: self.dim * self.n_classes].reshape(self.dim, self.n_classes)
        b = params[self.dim * self.n_classes :]
        return w, b

    def init_params(self, rng: np.random.Generator) -> ModelParams:
        return np.zeros(self.n_params)

    def logits(self, params: ModelParams, x: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
        w, b = self._split(params)
        return x @ w + b

    def loss_and_grad(self, params, x, y, l2=0.0):
        w, b = self._split(params)
        probs = _softmax(x @ w + b)
        n = len(y)
        loss = -np.mean(np.log(probs[np.arange(n), y] + 1e-300)) + 0.5 * l2 * float(params @ params)
        delta = (probs - _one_hot(y, self.n_classes)) / n
        grad = np.concatenate([(x.T @ delta).ravel(), delta.sum(axis=0)]) + l2 * params
        return float(loss), grad


@dataclass(frozen=True)
class MlpModel(Model):
    dim: int
    n_classes: int
    hidden: int = 16

    @property
    def n_params(self) -> int:
        return self.dim * self.hidden + self.hidden + self.hidden * self.n_classes + self.n_classes

    def _split(self, params: ModelParams):
        d, h, c = self.dim, self.hidden, self.n_classes
        i = 0
        w1 = params[i : i + d * h].reshape(d, h)
        i += d * h
        b1 = params[i : i + h]
        i += h
        w2 = params[i : i + h * c].reshape(h, c)
        i += h * c
        b2 = params[i : i + c]
        return w1, b1, w2, b2

    def init_params(self, rng: np.random.Generator) -> ModelParams:
        w1 = rng.normal(0.0, 1.0 / math.sqrt(self.dim), size=(self.dim, self.hidden))
        w2 = rng.normal(0.0, 1.0 / math.sqrt(self.hidden), size=(self.hidden, self.n_classes))
        return np.concatenate([w1.ravel(), np.zeros(self.hidden), w2.ravel(), np.zeros(self.n_classes)])

    def logits(self, params, x):
        w1, b1, w2, b2 = self._split(params)
        return np.tanh(x @ w1 + b1) @ w2 + b2

    def loss_and_grad(self, params, x, y, l2=0.0):
        w1, b1, w2, b2 = self._split(params)
        hid = np.tanh(x @ w1 + b1)
        probs = _softmax(hid @ w2 + b2)
        n = len(y)
        loss = -np.mean(np.log(probs[np.arange(n), y] + 1e-300)) + 0.5 * l2 * float(params @ params)
        d_out = (probs - _one_hot(y, self.n_classes)) / n
        d_hid = (d_out @ w2.T) * (1.0 - hid**2)
        grad = np.concatenate(
            [
                (x.T @ d_hid).ravel(),
                d_hid.sum(axis=0),
                (hid.T @ d_out).ravel(),
                d_out.sum(axis=0),
            ]
        )
        return float(loss), grad + l2 * params


def build_model(kind: str, dim: int, n_classes: int, hidden: int = 16) -> Model:
    if kind == "logistic":
        return LogisticModel(dim, n_classes)
    if kind == "mlp":
        return MlpModel(dim, n_classes, hidden)
    raise TrainingError(f"unknown model kind {kind!r} (expected 'logistic' or 'mlp')")


# ---------------------------------------------------------------------------
# data


def generate_task(
    seed: int,
    n_classes: int,
    dim: int,
    n_train: int,
    n_test: int,
    separation: float = 3.0,
    clusters_per_class: int = 1,
) -> tuple[Dataset, Dataset]:
    if n_classes < 2:
        raise TrainingError(f"n_classes must be >= 2, got {n_classes}")
    if dim < 1:
        raise TrainingError(f"dim must be >= 1, got {dim}")
    if n_train < n_classes or n_test < 1:
        raise TrainingError(f"degenerate sizes: n_train={n_train}, n_test={n_test}")
    if clusters_per_class not in (1, 2):
        raise TrainingError(f"clusters_per_class must be 1 or 2, got {clusters_per_class}")

    rng = SeedStreams(seed).stream("data")
    if n_classes <= dim:
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        centers = separation * q[:n_classes]
    else:
        raw = rng.normal(size=(n_classes, dim))
        centers = separation * raw / np.linalg.norm(raw, axis=1, keepdims=True)

    total = n_train + n_test
    labels = rng.permutation(np.arange(total) % n_classes).astype(np.int64)
    means = centers[labels]
    if clusters_per_class == 2:
        # antipodal twin clusters: no single hyperplane separates a class
        means = means * rng.choice([-1.0, 1.0], size=(total, 1))
    features = means + rng.normal(size=(total, dim))

    train = Dataset(features[:n_train].copy(), labels[:n_train].copy(), n_classes)
    test = Dataset(features[n_train:].copy(), labels[n_train:].copy(), n_classes)
    return train, test


def partition_noniid(
    train: Dataset,
    trainer_ids: list[str],
    skew: float,
    seed: int,
) -> dict[str, DataShard]:
    """
    Dirichlet label partition: for every class, the share each trainer gets is
    drawn from Dirichlet(skew). Small ``skew`` concentrates each class on a few
    trainers; very large ``skew`` approaches an even split.
    """
    n_trainers = len(trainer_ids)
    if skew <= 0:
        raise TrainingError(f"skew must be > 0, got {skew}")
    if n_trainers == 0:
        raise TrainingError("no trainers to partition over")
    if n_trainers > len(train):
        raise TrainingError(f"{n_trainers} trainers but only {len(train)} examples")

    rng = SeedStreams(seed).stream("partition")
    buckets: list[list[int]] = [[] for _ in range(n_trainers)]
    for c in range(train.n_classes):
        idx = np.flatnonzero(train.labels == c)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(n_trainers, skew))
        counts = np.floor(props * len(idx)).astype(int)
        remainder = len(idx) - int(counts.sum())
        if remainder > 0:
            order = np.argsort(-(props * len(idx) - counts), kind="stable")
            counts[order[:remainder]] += 1
        start = 0
        for t in range(n_trainers):
            buckets[t].extend(idx[start : start + counts[t]].tolist())
            start += counts[t]

    # every trainer must hold at least one example; take from the largest shard
    for t in range(n_trainers):
        if not buckets[t]:
            donor = max(range(n_trainers), key=lambda j: (len(buckets[j]), -j))
            buckets[t].append(buckets[donor].pop())

    shards = {}
    for t, trainer_id in enumerate(trainer_ids):
        idx = np.array(sorted(buckets[t]), dtype=np.int64)
        shards[trainer_id] = DataShard(trainer_id, idx)
    return shards


def dataset_to_text(dataset: Dataset) -> str:
    """One JSON header line (``n_classes``, ``dim``), then one ``{"x", "y"}`` line per example."""
    lines = [json.dumps({"n_classes": dataset.n_classes, "dim": dataset.dim})]
    for x, y in zip(dataset.features, dataset.labels, strict=True):
        lines.append(json.dumps({"x": [float(v) for v in x], "y": int(y)}))
    return "\n".join(lines) + "\n"


def load_dataset(path: Path) -> Dataset:
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines:
        raise TrainingError(f"{path}: empty dataset file")
    try:
        meta = json.loads(lines[0])
        rows = [json.loads(line) for line in lines[1:]]
        features = np.array([r["x"] for r in rows], dtype=np.float64).reshape(len(rows), meta["dim"])
        labels = np.array([r["y"] for r in rows], dtype=np.int64)
        return Dataset(features, labels, int(meta["n_classes"]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise TrainingError(f"{path}: malformed dataset file ({exc})") from None


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class SgdResult:
    params: ModelParams
    visits: int
    untrained: npt.NDArray[np.int64]
    mean_loss: float
    epochs: float = 0.0


def training_progress(cpu_speed: float, window: float) -> tuple[float, float]:
    """Epochs a trainer finishes in ``window`` time units, and the unfinished share of one epoch."""
    epochs_done = cpu_speed * window
    untrained = max(0.0, 1.0 - epochs_done) if epochs_done < 1.0 else 0.0
    return epochs_done, untrained


def train_sgd(
    model: Model,
    params: ModelParams,
    dataset: Dataset,
    indices: npt.NDArray[np.int64],
    epochs: float,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 10,
    l2: float = 0.0,
) -> SgdResult:
    if epochs < 0:
        raise TrainingError(f"epochs must be >= 0, got {epochs}")
    n = len(indices)
    theta = np.array(params, dtype=np.float64, copy=True)
    if n == 0 or epochs == 0:
        return SgdResult(theta, 0, np.asarray(indices, dtype=np.int64), float("nan"), 0.0)

    total = int(math.floor(epochs * n + _VISIT_EPS))
    full_passes, remainder = divmod(total, n)

    order_parts = [rng.permutation(indices) for _ in range(full_passes)]
    untrained = np.empty(0, dtype=np.int64)
    if epochs < 1.0 or remainder:
        last = rng.permutation(indices)
        order_parts.append(last[:remainder])
        if epochs < 1.0:
            untrained = last[remainder:]
    order = np.concatenate(order_parts) if order_parts else np.empty(0, dtype=np.int64)

    losses: list[float] = []
    for step, start in enumerate(range(0, len(order), batch_size)):
        batch = order[start : start + batch_size]
        loss, grad = model.loss_and_grad(theta, dataset.features[batch], dataset.labels[batch], l2)
        if not np.all(np.isfinite(grad)):
            raise TrainingError(
                f"non-finite gradient at step {step} (batch loss {loss!r}, lr {lr}); "
                "lower the learning rate or check the inputs"
            )
        theta -= lr * grad
        losses.append(loss)

    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return SgdResult(theta, len(order), untrained.astype(np.int64), mean_loss, total / n)


def train_until_converged(
    model: Model,
    params: ModelParams,
    dataset: Dataset,
    indices: npt.NDArray[np.int64],
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 10,
    l2: float = 0.0,
    tol: float = 1e-4,
    max_epochs: int = 200,
) -> SgdResult:
    """Whole epochs until the shard loss improves by less than ``tol`` (or ``max_epochs``)."""
    theta = np.array(params, dtype=np.float64, copy=True)
    x, y = dataset.features[indices], dataset.labels[indices]
    prev = model.loss(theta, x, y, l2)
    visits = 0
    epochs = 0
    while epochs < max_epochs:
        step = train_sgd(model, theta, dataset, indices, 1.0, lr, rng, batch_size, l2)
        theta, visits, epochs = step.params, visits + step.visits, epochs + 1
        cur = model.loss(theta, x, y, l2)
        if prev - cur < tol:
            prev = cur
            break
        prev = cur
    return SgdResult(theta, visits, np.empty(0, dtype=np.int64), prev, float(epochs))


def evaluate(model: Model, params: ModelParams, test: Dataset) -> float:
    """Accuracy on the held-out set; ties go to the lowest class index (np.argmax)."""
    if len(test) == 0:
        raise TrainingError("cannot evaluate on an empty test set")
    pred = np.argmax(model.logits(params, test.features), axis=1)
    return float(np.count_nonzero(pred == test.labels)) / len(test)


def evaluate_loss(model: Model, params: ModelParams, test: Dataset) -> float:
    return model.loss(params, test.features, test.labels)
