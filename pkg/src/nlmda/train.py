"""Adam, the mini-batch training loop, accuracy, stratified cross-validation
and a logistic-regression sanity baseline."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import ModelConfig, ModelParams, init_params, model_forward
from .pipeline import EpochSet, FoldPlan, stratified_kfold
from .tensor import Tape, Tensor, backward, cross_entropy, linear, reshape

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place. ``None`` grads count as zero."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


# ---------------------------------------------------------------- models


class NLMDAClassifier:
    """NLMDA-Net behind the interface ``fit`` trains."""

    def __init__(self, params: ModelParams):
        self.params = params

    @property
    def batchnorm(self) -> bool:
        return self.params.config.use_batchnorm

    def tensors(self) -> list[Tensor]:
        return self.params.tensors()

    def logits(self, x: Tensor, training: bool = False) -> Tensor:
        return model_forward(x, self.params, training)

    def snapshot(self) -> ModelParams:
        return self.params.copy()

    def restore(self, snap: ModelParams) -> None:
        self.params = snap.copy()


class LogisticClassifier:
    """Multinomial logistic regression on flattened epochs."""

    batchnorm = False

    def __init__(self, n_features: int, n_classes: int = 2, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.W = Tensor(rng.standard_normal((n_classes, n_features)) / math.sqrt(n_features),
                        requires_grad=True)
        self.b = Tensor(np.zeros(n_classes), requires_grad=True)

    def tensors(self) -> list[Tensor]:
        return [self.W, self.b]

    def logits(self, x: Tensor, training: bool = False) -> Tensor:
        return linear(reshape(x, (x.shape[0], -1)), self.W, self.b)

    def snapshot(self):
        return self.W.data.copy(), self.b.data.copy()

    def restore(self, snap) -> None:
        self.W.data, self.b.data = snap[0].copy(), snap[1].copy()


# ---------------------------------------------------------------- loop


@dataclass
class FitHistory:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based

    @property
    def best_val_accuracy(self) -> float:
        return self.val_accuracy[self.best_epoch - 1]


def predict(model, data: EpochSet, batch_size: int = 200) -> np.ndarray:
    preds = []
    for start in range(0, len(data), batch_size):
        x = Tensor(data.epochs[start:start + batch_size])
        # argmax picks the lowest index among equal logits
        preds.append(np.argmax(model.logits(x, training=False).data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model, data: EpochSet) -> float:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty set")
    return float(np.mean(predict(model, data) == data.labels))


def _batches(order: np.ndarray, size: int, drop_singleton: bool):
    for start in range(0, order.size, size):
        idx = order[start:start + size]
        if idx.size == 1 and drop_singleton:
            continue
        yield idx


def fit(model, train: EpochSet, val: EpochSet, config: TrainConfig) -> FitHistory:
    """Train ``model`` in place and leave it holding the best-validation weights.

    Ties in validation accuracy keep the earlier epoch.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation sets must be non-empty")
    if np.unique(train.labels).size < 2:
        raise ValueError("training set holds a single class")
    if model.batchnorm and config.batch_size < 2:
        raise ValueError("batch_size must be >= 2 with batch norm")
    rng = np.random.default_rng(config.seed)
    params = model.tensors()
    state = AdamState.zeros_like(params)
    history = FitHistory()
    best = None
    n = len(train)
    for ep in range(1, config.epochs + 1):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total, seen = 0.0, 0
        for idx in _batches(order, config.batch_size, model.batchnorm):
            for p in params:
                p.grad = None
            with Tape():
                loss = cross_entropy(model.logits(Tensor(train.epochs[idx]), training=True),
                                     train.labels[idx])
                backward(loss)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite training loss in epoch {ep}")
            adam_step(params, [p.grad for p in params], state, config)
            total += loss.item() * idx.size
            seen += idx.size
        history.train_loss.append(total / seen)
        acc = evaluate(model, val)
        history.val_accuracy.append(acc)
        if best is None or acc > history.best_val_accuracy:
            history.best_epoch = ep
            best = model.snapshot()
        log.debug("epoch %d loss %.5f val_acc %.4f", ep, total / seen, acc)
    model.restore(best)
    return history


# ---------------------------------------------------------------- cross-validation


@dataclass
class RunMetrics:
    fold_accuracies: list[float]
    mean: float
    ci95_halfwidth: float
    loss_curves: list[list[float]] = field(default_factory=list)
    val_curves: list[list[float]] = field(default_factory=list)
    best_epochs: list[int] = field(default_factory=list)

    @classmethod
    def from_folds(cls, accs: Sequence[float], **extra) -> "RunMetrics":
        mean, ci = summarize(accs)
        return cls([float(a) for a in accs], mean, ci, **extra)


def summarize(accs: Sequence[float]) -> tuple[float, float]:
    """Mean and 95% half-width 1.96 * std / sqrt(k) with the population std."""
    a = np.asarray(accs, dtype=np.float64)
    if a.size == 0:
        raise ValueError("no fold accuracies")
    return float(a.sum() / a.size), float(1.96 * a.std() / math.sqrt(a.size))


def stratified_holdout(labels: np.ndarray, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split positions into (keep, holdout) with floor(frac * n_class) (at least 1) held out per class."""
    rng = np.random.default_rng(seed)
    keep, hold = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_hold = min(max(1, int(frac * idx.size)), idx.size - 1)
        hold.append(idx[:n_hold])
        keep.append(idx[n_hold:])
    return np.sort(np.concatenate(keep)), np.sort(np.concatenate(hold))


def build_model(kind: str, config: ModelConfig):
    if kind == "nlmda":
        return NLMDAClassifier(init_params(config))
    if kind == "logistic":
        return LogisticClassifier(config.C * config.T, config.n_classes, config.seed)
    raise ValueError(f"unknown model kind {kind!r}")


def _run_fold(data: EpochSet, plan: FoldPlan, fold: int, model_config: ModelConfig,
              train_config: TrainConfig, kind, val_frac: float, derive_n_t: bool):
    train_idx, test_idx = plan.train_test(fold)
    keep, hold = stratified_holdout(data.labels[train_idx], val_frac, train_config.seed + fold)
    train, val = data.subset(train_idx[keep]), data.subset(train_idx[hold])
    cfg = replace(model_config, N_t=len(train)) if derive_n_t else model_config
    model = kind(cfg) if callable(kind) else build_model(kind, cfg)
    history = fit(model, train, val, replace(train_config, seed=train_config.seed + fold))
    acc = evaluate(model, data.subset(test_idx))
    log.info("fold %d: test accuracy %.4f (best epoch %d)", fold, acc, history.best_epoch)
    return acc, history


def cross_validate(data: EpochSet, model_config: ModelConfig, train_config: TrainConfig,
                   k: int = 5, kind: str | Callable = "nlmda", jobs: int = 1,
                   val_frac: float = 0.1, split_seed: int | None = None,
                   derive_n_t: bool = True) -> RunMetrics:
    """Stratified k-fold evaluation.

    Each fold trains on the other k-1 folds minus a stratified ``val_frac``
    holdout used for checkpoint selection, then scores the held-out fold.
    ``kind`` is ``"nlmda"``, ``"logistic"`` or a ``ModelConfig -> model`` callable.
    With ``derive_n_t`` the model's ``N_t`` becomes each fold's training-set size.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if (data.C, data.T) != (model_config.C, model_config.T):
        raise ValueError(f"data is C={data.C}, T={data.T} but model expects "
                         f"C={model_config.C}, T={model_config.T}")
    seed = train_config.seed if split_seed is None else split_seed
    plan = stratified_kfold(data, k, seed)
    args = [(data, plan, i, model_config, train_config, kind, val_frac, derive_n_t)
            for i in range(k)]
    if jobs > 1 and not callable(kind):
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, *zip(*args)))
    else:
        results = [_run_fold(*a) for a in args]
    accs = [r[0] for r in results]
    hists = [r[1] for r in results]
    return RunMetrics.from_folds(
        accs,
        loss_curves=[h.train_loss for h in hists],
        val_curves=[h.val_accuracy for h in hists],
        best_epochs=[h.best_epoch for h in hists],
    )


def baseline_logistic(train: EpochSet, test: EpochSet, config: TrainConfig,
                      val_frac: float = 0.1) -> float:
    """Test accuracy of logistic regression trained with the same engine and Adam."""
    keep, hold = stratified_holdout(train.labels, val_frac, config.seed)
    n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    model = LogisticClassifier(train.C * train.T, max(2, n_classes), config.seed)
    fit(model, train.subset(keep), train.subset(hold), config)
    return evaluate(model, test)


# ---------------------------------------------------------------- metrics file

METRICS_HEADER = "# nlmda-metrics v1"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def write_metrics(path, entries: dict, table: Sequence[Sequence] = (),
                  columns: Sequence[str] = ()) -> None:
    """Write ``key=value`` lines, then an optional tab-separated table after ``[table]``."""
    lines = [METRICS_HEADER]
    lines += [f"{k}={_fmt(v)}" for k, v in entries.items()]
    if columns:
        lines += ["", "[table]", "\t".join(columns)]
        lines += ["\t".join(_fmt(c) for c in row) for row in table]
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics(path) -> tuple[dict[str, str], list[dict[str, str]]]:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != METRICS_HEADER:
        raise ValueError(f"{path} is not a metrics file")
    entries, rows = {}, []
    it = iter(text[1:])
    for line in it:
        if line == "[table]":
            cols = next(it).split("\t")
            rows = [dict(zip(cols, r.split("\t"))) for r in it if r]
            break
        if line:
            key, _, value = line.partition("=")
            entries[key] = value
    return entries, rows


def config_entries(prefix: str, cfg) -> dict:
    return {f"{prefix}.{k}": v for k, v in asdict(cfg).items()}


def run_metrics_entries(metrics: RunMetrics, prefix: str = "") -> dict:
    out = {f"{prefix}fold.{i}.accuracy": a for i, a in enumerate(metrics.fold_accuracies)}
    out.update({f"{prefix}fold.{i}.best_epoch": e for i, e in enumerate(metrics.best_epochs)})
    out[f"{prefix}mean_accuracy"] = metrics.mean
    out[f"{prefix}ci95_halfwidth"] = metrics.ci95_halfwidth
    return out


def curve_rows(metrics: RunMetrics) -> list[tuple]:
    rows = []
    for fold, (loss, val) in enumerate(zip(metrics.loss_curves, metrics.val_curves)):
        for ep, (l, a) in enumerate(zip(loss, val), start=1):
            rows.append((fold, ep, l, a))
    return rows


CURVE_COLUMNS = ("fold", "epoch", "train_loss", "val_accuracy")
