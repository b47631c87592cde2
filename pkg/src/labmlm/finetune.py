"""Frozen-base fine-tuning: task heads, grid search, and linear baselines.

The pre-trained model is never updated here. Each sample's lab panel runs
through the base encoder with gradient recording disabled, final embeddings
are mean-pooled over real positions, and only a small task head trains on
top. Extra (non-lab) features join through a width-preserving ReLU dense
before the head. Heads are scored with k-fold cross-validation over an
exhaustive hyperparameter grid, and a regularized logistic (or plain least
squares) baseline can be fit on the same folds for comparison.
"""

from __future__ import annotations

import csv
import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tape
from .corpus import LabBag, pad_batch
from .ecdf import MODE_CONTINUOUS, ecdf_apply
from .errors import ConfigError, ContractError, DataError
from .model import ModelParams, encode
from .optim import AdamState, adam_step, zero_param_grads
from .tape import Tape, TapeTensor, backward, glorot_uniform, untracked

TASK_BINARY = "binary"
TASK_MULTICLASS = "multiclass"
TASK_REGRESSION = "regression"
_TASKS = (TASK_BINARY, TASK_MULTICLASS, TASK_REGRESSION)

DEFAULT_EPOCHS_GRID = (30, 60, 90)
DEFAULT_BATCH_GRID = (16, 32, 64)
DEFAULT_LR_GRID = (1e-4, 3e-4, 5e-4, 1e-3)
DEFAULT_DROPOUT_GRID = (0.1, 0.3, 0.5, 0.7)
DEFAULT_L2_GRID = (0.0001, 0.001, 0.01, 0.1)


@dataclass
class FinetuneConfig:
    task_kind: str = TASK_BINARY
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 3e-4
    dropout: float = 0.3
    n_classes: int = 2
    epochs_grid: tuple = DEFAULT_EPOCHS_GRID
    batch_grid: tuple = DEFAULT_BATCH_GRID
    lr_grid: tuple = DEFAULT_LR_GRID
    dropout_grid: tuple = DEFAULT_DROPOUT_GRID

    def __post_init__(self):
        if self.task_kind not in _TASKS:
            raise ConfigError(f"unknown task kind {self.task_kind!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.task_kind == TASK_MULTICLASS and self.n_classes < 2:
            raise ConfigError(f"multiclass needs n_classes >= 2, got {self.n_classes}")
        for name in ("epochs_grid", "batch_grid", "lr_grid", "dropout_grid"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be nonempty")


@dataclass
class FinetuneDataset:
    lab_values: np.ndarray        # (n, n_lab) raw values, NaN where missing
    labels: np.ndarray            # (n,)
    lab_codes: list
    extras: np.ndarray            # (n, n_extra)
    extra_names: list

    def __len__(self):
        return len(self.labels)


def load_finetune_csv(csv_path, sidecar_path, vocab) -> FinetuneDataset:
    """Read a labeled feature table; the sidecar says which columns are labs.

    Declared lab columns whose code is not in the vocabulary are routed to
    the extra-feature path instead of being dropped.
    """
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    label_col = sidecar["label"]
    lab_cols = list(sidecar.get("lab_codes", []))
    extra_cols = list(sidecar.get("extra_features", []))

    in_vocab = [c for c in lab_cols if vocab.contains(c)]
    rerouted = [c for c in lab_cols if not vocab.contains(c)]
    extra_cols = extra_cols + rerouted

    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{csv_path}: empty file")
        missing = [c for c in [label_col, *in_vocab, *extra_cols]
                   if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{csv_path}: missing columns {missing}")
        labels, labs, extras = [], [], []
        for ln, row in enumerate(reader, start=2):
            try:
                labels.append(float(row[label_col]))
                labs.append([float(row[c]) if row[c] not in ("", "nan") else np.nan
                             for c in in_vocab])
                extras.append([float(row[c]) for c in extra_cols])
            except ValueError as exc:
                raise DataError(f"{csv_path} line {ln}: {exc}") from None
    if not labels:
        raise DataError(f"{csv_path}: no data rows")
    return FinetuneDataset(
        lab_values=np.asarray(labs, dtype=float).reshape(len(labels), len(in_vocab)),
        labels=np.asarray(labels, dtype=float),
        lab_codes=in_vocab,
        extras=np.asarray(extras, dtype=float).reshape(len(labels), len(extra_cols)),
        extra_names=extra_cols,
    )


# ---------------------------------------------------------------------------
# Base encoding (frozen) and the task head


def dataset_bags(dataset: FinetuneDataset, vocab, ecdfs) -> list:
    """One unmasked bag per sample from its non-missing lab columns."""
    if vocab.mode != MODE_CONTINUOUS:
        raise ConfigError("fine-tuning bags need a continuous vocabulary")
    bags = []
    for i in range(len(dataset)):
        tokens, values = [], []
        for j, code in enumerate(dataset.lab_codes):
            raw = dataset.lab_values[i, j]
            if np.isnan(raw):
                continue
            if code not in ecdfs:
                raise DataError(f"no eCDF for lab code {code!r}")
            tokens.append(vocab.token_for_code(code))
            values.append(ecdf_apply(ecdfs[code], raw))
        if not tokens:
            raise DataError(f"sample {i} has no usable lab values")
        L = len(tokens)
        bags.append(LabBag(f"s{i}", 0.0, np.asarray(tokens, dtype=np.int64),
                           np.asarray(values, dtype=float), np.zeros(L, dtype=bool)))
    return bags


def pool_embeddings(base: ModelParams, bags, batch_size: int = 128) -> np.ndarray:
    """Mean over non-pad final embeddings, with the base kept off the tape."""
    pooled = []
    with untracked():
        for start in range(0, len(bags), batch_size):
            batch = pad_batch(bags[start : start + batch_size])
            h = encode(base, batch, training=False).data
            keep = (~batch.pad_mask)[:, :, None]
            pooled.append((h * keep).sum(axis=1) / batch.lengths[:, None])
    return np.concatenate(pooled, axis=0)


@dataclass
class FinetuneHead:
    task_kind: str
    extra_w: TapeTensor | None
    extra_b: TapeTensor | None
    dense_w: TapeTensor
    dense_b: TapeTensor
    out_w: TapeTensor
    out_b: TapeTensor

    def tensors(self):
        out = []
        if self.extra_w is not None:
            out += [self.extra_w, self.extra_b]
        out += [self.dense_w, self.dense_b, self.out_w, self.out_b]
        return out


def init_finetune_head(rng, d_model, n_extra, task_kind, n_classes=2) -> FinetuneHead:
    if task_kind not in _TASKS:
        raise ConfigError(f"unknown task kind {task_kind!r}")
    out_dim = n_classes if task_kind == TASK_MULTICLASS else 1

    def dense(fan_in, fan_out):
        w = TapeTensor(glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out), trainable=True)
        return w, TapeTensor(np.zeros(fan_out), trainable=True)

    extra_w = extra_b = None
    width = d_model
    if n_extra > 0:
        extra_w, extra_b = dense(n_extra, n_extra)
        width += n_extra
    dense_w, dense_b = dense(width, width)
    out_w, out_b = dense(width, out_dim)
    return FinetuneHead(task_kind, extra_w, extra_b, dense_w, dense_b, out_w, out_b)


def head_logits(head: FinetuneHead, pooled, extras=None, training=False,
                rng=None, dropout=0.0) -> TapeTensor:
    x = pooled if isinstance(pooled, TapeTensor) else TapeTensor(np.asarray(pooled))
    if head.extra_w is not None:
        if extras is None or np.asarray(extras).shape[1] != head.extra_w.shape[0]:
            raise ConfigError("head expects extra features of width "
                              f"{head.extra_w.shape[0]}")
        e = tape.relu(tape.matmul(TapeTensor(np.asarray(extras)), head.extra_w) + head.extra_b)
        x = tape.concat([x, e], axis=-1)
    z = tape.relu(tape.matmul(x, head.dense_w) + head.dense_b)
    z = tape.dropout(z, dropout, rng, training)
    logits = tape.matmul(z, head.out_w) + head.out_b
    if head.task_kind != TASK_MULTICLASS:
        logits = tape.reshape(logits, logits.shape[:-1])
    return logits


def finetune_forward(base: ModelParams, batch, extras, head: FinetuneHead,
                     training=False, rng=None, dropout=0.0) -> TapeTensor:
    """Frozen base encode, pool, head, task activation."""
    with untracked():
        h = encode(base, batch, training=False).data
    keep = (~batch.pad_mask)[:, :, None]
    pooled = (h * keep).sum(axis=1) / batch.lengths[:, None]
    logits = head_logits(head, pooled, extras, training, rng, dropout)
    if head.task_kind == TASK_BINARY:
        return tape.sigmoid(logits)
    if head.task_kind == TASK_MULTICLASS:
        return tape.softmax(logits, axis=-1)
    return logits


def head_loss(head: FinetuneHead, logits, labels) -> TapeTensor:
    """Mean CE (from logits) for classification, mean squared error otherwise."""
    labels = np.asarray(labels, dtype=float)
    if head.task_kind == TASK_BINARY:
        # -[y log p + (1-y) log(1-p)] = softplus(z) - y z
        return tape.tmean(tape.softplus(logits) - tape.mul(logits, labels))
    if head.task_kind == TASK_MULTICLASS:
        logp = tape.log_softmax(logits, axis=-1)
        picked = tape.take_along_last(logp, labels.astype(np.int64))
        return tape.neg(tape.tmean(picked))
    diff = logits - labels
    return tape.tmean(tape.mul(diff, diff))


def train_head(head: FinetuneHead, pooled, extras, labels, *, epochs, batch_size,
               learning_rate, dropout, seed) -> float:
    """Adam over minibatches; returns the final-epoch mean training loss."""
    n = len(labels)
    if batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds {n} training samples")
    rng = np.random.default_rng(seed)
    tensors = head.tensors()
    adam = AdamState(tensors, learning_rate)
    pooled = np.asarray(pooled)
    extras = None if extras is None else np.asarray(extras)
    last = float("nan")
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            zero_param_grads(tensors)
            with Tape():
                logits = head_logits(head, pooled[idx],
                                     None if extras is None else extras[idx],
                                     training=True, rng=rng, dropout=dropout)
                loss = head_loss(head, logits, labels[idx])
                backward(loss)
            adam_step(adam)
            losses.append(loss.item())
        last = float(np.mean(losses))
    return last


def eval_head(head: FinetuneHead, pooled, extras, labels) -> float:
    with untracked():
        logits = head_logits(head, pooled, extras, training=False)
        return head_loss(head, logits, labels).item()


# ---------------------------------------------------------------------------
# Grid search


def make_folds(n: int, k: int, rng) -> np.ndarray:
    """Balanced fold ids in {0..k-1}; sizes differ by at most one."""
    if not 2 <= k <= n:
        raise ConfigError(f"need 2 <= k <= n, got k={k}, n={n}")
    fold = np.empty(n, dtype=np.int64)
    fold[rng.permutation(n)] = np.arange(n) % k
    return fold


@dataclass
class GridSearchResult:
    rows: list          # one dict per grid cell, with per-replicate metrics
    best: dict
    metric: str
    k_folds: int
    replicates: int
    seed: int


def grid_search_finetune(base: ModelParams, dataset: FinetuneDataset, vocab, ecdfs,
                         cfg: FinetuneConfig, k_folds: int = 5, replicates: int = 5,
                         seed: int = 0) -> GridSearchResult:
    """Exhaustive grid, k-fold CV per cell, replicated over reseeded runs.

    The base model is encoded once up front (it is frozen, so its pooled
    embeddings never change); every grid cell trains only a head. Replicates
    vary the seed alone, which redraws fold assignments and head inits.
    The winner has the lowest mean held-out metric; ties prefer fewer epochs,
    then a smaller learning rate.
    """
    n = len(dataset)
    min_train = n - (n + k_folds - 1) // k_folds
    too_big = [b for b in cfg.batch_grid if b > min_train]
    if too_big:
        raise ConfigError(f"batch sizes {too_big} exceed the smallest training fold "
                          f"({min_train} samples)")
    labels = dataset.labels
    if cfg.task_kind == TASK_MULTICLASS:
        if labels.max() >= cfg.n_classes or labels.min() < 0:
            raise ConfigError("labels outside [0, n_classes)")

    bags = dataset_bags(dataset, vocab, ecdfs)
    pooled = pool_embeddings(base, bags)
    extras = dataset.extras if dataset.extras.shape[1] else None

    cells = list(itertools.product(cfg.epochs_grid, cfg.batch_grid,
                                   cfg.lr_grid, cfg.dropout_grid))
    per_cell = [[] for _ in cells]
    for rep in range(replicates):
        rep_seed = seed + rep
        fold = make_folds(n, k_folds, np.random.default_rng(rep_seed))
        for ci, (epochs, batch_size, lr, dropout) in enumerate(cells):
            fold_metrics = []
            for f in range(k_folds):
                train_idx = np.flatnonzero(fold != f)
                test_idx = np.flatnonzero(fold == f)
                head = init_finetune_head(
                    np.random.default_rng((rep_seed * 1009 + ci) * 31 + f),
                    pooled.shape[1], 0 if extras is None else extras.shape[1],
                    cfg.task_kind, cfg.n_classes)
                train_head(head, pooled[train_idx],
                           None if extras is None else extras[train_idx],
                           labels[train_idx], epochs=epochs, batch_size=batch_size,
                           learning_rate=lr, dropout=dropout,
                           seed=(rep_seed * 7919 + ci) * 31 + f)
                fold_metrics.append(eval_head(
                    head, pooled[test_idx],
                    None if extras is None else extras[test_idx], labels[test_idx]))
            per_cell[ci].append(float(np.mean(fold_metrics)))

    rows = []
    for (epochs, batch_size, lr, dropout), reps in zip(cells, per_cell):
        rows.append({"epochs": epochs, "batch_size": batch_size,
                     "learning_rate": lr, "dropout": dropout,
                     "replicate_metrics": reps, "mean": float(np.mean(reps)),
                     "min": float(np.min(reps)), "max": float(np.max(reps))})
    best = min(rows, key=lambda r: (r["mean"], r["epochs"], r["learning_rate"]))
    metric = "mse" if cfg.task_kind == TASK_REGRESSION else "ce"
    return GridSearchResult(rows, best, metric, k_folds, replicates, seed)


# ---------------------------------------------------------------------------
# Linear baselines


def _normalize(train_x, test_x):
    """Standardize by training statistics; constant columns become zeros.

    NaNs (missing labs) are filled with the training mean, i.e. zero after
    standardizing.
    """
    mu = np.nanmean(train_x, axis=0)
    mu = np.where(np.isnan(mu), 0.0, mu)
    sd = np.nanstd(train_x, axis=0)
    sd = np.where((sd == 0) | np.isnan(sd), 1.0, sd)

    def apply(x):
        z = (x - mu) / sd
        return np.where(np.isnan(z), 0.0, z)

    return apply(train_x), apply(test_x), mu, sd


def _logistic_newton(x, y, c, max_iter=100, tol=1e-10):
    """Binary logistic fit: mean CE plus (c/2)·||w||², intercept unpenalized."""
    n, d = x.shape
    xb = np.concatenate([np.ones((n, 1)), x], axis=1)
    beta = np.zeros(d + 1)
    ridge = np.full(d + 1, c)
    ridge[0] = 0.0
    for _ in range(max_iter):
        z = xb @ beta
        with np.errstate(over="ignore"):
            p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
        grad = xb.T @ (p - y) / n + ridge * beta
        if np.max(np.abs(grad)) < tol:
            break
        w = p * (1.0 - p)
        hess = (xb * w[:, None]).T @ xb / n + np.diag(ridge)
        beta = beta - np.linalg.solve(hess, grad)
    return beta


def _logistic_ce(x, y, beta):
    xb = np.concatenate([np.ones((len(x), 1)), x], axis=1)
    z = xb @ beta
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def _softmax_regression(x, y, c, n_classes, steps=400, lr=0.3):
    """Multiclass logistic via full-batch Adam on the tape."""
    n, d = x.shape
    w = TapeTensor(np.zeros((d, n_classes)), trainable=True)
    b = TapeTensor(np.zeros(n_classes), trainable=True)
    adam = AdamState([w, b], lr)
    y_idx = y.astype(np.int64)
    for _ in range(steps):
        zero_param_grads([w, b])
        with Tape():
            logp = tape.log_softmax(tape.matmul(TapeTensor(x), w) + b, axis=-1)
            ce = tape.neg(tape.tmean(tape.take_along_last(logp, y_idx)))
            penalty = tape.mul(tape.tsum(tape.mul(w, w)), c / 2.0)
            backward(ce + penalty)
        adam_step(adam)
    return w.data, b.data


def _multiclass_ce(x, y, w, b):
    z = x @ w + b
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(y)), y.astype(np.int64)]))


@dataclass
class LinearBaselineResult:
    task_kind: str
    cv_metric: float
    best_c: float | None
    per_c: list
    coef: np.ndarray
    intercept: np.ndarray | float


def fit_linear_baseline(dataset: FinetuneDataset, task_kind: str,
                        l2_grid=DEFAULT_L2_GRID, k_folds: int = 5,
                        seed: int = 0) -> LinearBaselineResult:
    """Cross-validated linear baseline on raw tabular features.

    Classification tunes the L2 penalty over `l2_grid`; regression is plain
    least squares (no penalty). Features are standardized with the training
    statistics of each fold. The returned model is refit on all data at the
    winning penalty, with coefficients mapped back to raw feature scale.
    """
    if task_kind not in _TASKS:
        raise ConfigError(f"unknown task kind {task_kind!r}")
    x_all = np.concatenate([dataset.lab_values, dataset.extras], axis=1)
    y = dataset.labels
    n = len(y)
    fold = make_folds(n, k_folds, np.random.default_rng(seed))
    n_classes = int(y.max()) + 1 if task_kind == TASK_MULTICLASS else 2

    def cv_for(c):
        scores = []
        for f in range(k_folds):
            tr, te = fold != f, fold == f
            xt, xe, _, _ = _normalize(x_all[tr], x_all[te])
            if task_kind == TASK_BINARY:
                beta = _logistic_newton(xt, y[tr], c)
                scores.append(_logistic_ce(xe, y[te], beta))
            elif task_kind == TASK_MULTICLASS:
                w, b = _softmax_regression(xt, y[tr], c, n_classes)
                scores.append(_multiclass_ce(xe, y[te], w, b))
            else:
                beta, *_ = np.linalg.lstsq(
                    np.concatenate([np.ones((tr.sum(), 1)), xt], axis=1), y[tr],
                    rcond=None)
                pred = np.concatenate([np.ones((te.sum(), 1)), xe], axis=1) @ beta
                scores.append(float(np.mean((pred - y[te]) ** 2)))
        return float(np.mean(scores))

    if task_kind == TASK_REGRESSION:
        per_c = [{"c": None, "metric": cv_for(None)}]
        best_c = None
    else:
        per_c = [{"c": c, "metric": cv_for(c)} for c in l2_grid]
        best = min(per_c, key=lambda e: e["metric"])
        best_c = best["c"]

    xn, _, mu, sd = _normalize(x_all, x_all)
    if task_kind == TASK_BINARY:
        beta = _logistic_newton(xn, y, best_c)
        coef = beta[1:] / sd
        intercept = float(beta[0] - np.sum(beta[1:] * mu / sd))
    elif task_kind == TASK_MULTICLASS:
        w, b = _softmax_regression(xn, y, best_c, n_classes)
        coef = w / sd[:, None]
        intercept = b - (mu / sd) @ w
    else:
        design = np.concatenate([np.ones((n, 1)), xn], axis=1)
        rank = np.linalg.matrix_rank(design)
        if rank < design.shape[1]:
            warnings.warn("singular design matrix; returning the least-norm solution")
        beta, *_ = np.linalg.lstsq(design, y, rcond=None)
        coef = beta[1:] / sd
        intercept = float(beta[0] - np.sum(beta[1:] * mu / sd))

    cv_metric = min(e["metric"] for e in per_c)
    return LinearBaselineResult(task_kind, cv_metric, best_c, per_c, coef, intercept)


def mean_min_max(values) -> tuple:
    vals = np.asarray(list(values), dtype=float)
    return float(vals.mean()), float(vals.min()), float(vals.max())
