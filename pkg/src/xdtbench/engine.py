"""Supervised training, zero-shot evaluation, metrics, and rank analysis.

Training runs seeded-shuffled minibatches (stratified by class where
possible) and keeps the parameters from the epoch with the best validation
accuracy, stopping early after ``patience`` epochs without improvement.
Evaluation reduces to confusion counts; every metric derives from those.

The results file is tab-separated with a fixed column order::

    train_ds eval_ds loss lambda acc f1 precision recall acc_sb acc_rel
    size_ratio mode

holding full-precision values; ``mode`` is ``supervised`` or ``zeroshot``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import DatasetManifest, SampleRecord, SplitSpec, make_splits
from .encoder import EmbeddingSet
from .errors import DataError, LossError, ModelError, TrainError
from .losses import LossConfig, one_hot, loss_gradient
from .model import HeadConfig, HeadParameters, init_head, predict_batch

OPTIMIZERS = ("sgd", "adam")

RESULT_COLUMNS = (
    "train_ds",
    "eval_ds",
    "loss",
    "lambda",
    "acc",
    "f1",
    "precision",
    "recall",
    "acc_sb",
    "acc_rel",
    "size_ratio",
    "mode",
)

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings for one training run."""

    loss: LossConfig
    learning_rate: float = 1e-2
    optimizer: str = "sgd"
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0.0:
            raise TrainError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise TrainError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        min_batch = 2 if self.loss.kind in ("lc", "ec") else 1
        if self.batch_size < min_batch:
            raise TrainError(
                f"batch_size must be >= {min_batch} for loss {self.loss.kind!r}, got {self.batch_size}"
            )
        if self.max_epochs < 1:
            raise TrainError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise TrainError(f"patience must be >= 1, got {self.patience}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass(frozen=True)
class TrainedModel:
    """Selected head parameters plus the run that produced them."""

    params: HeadParameters
    train_dataset: str
    config: TrainConfig
    history: tuple[EpochStats, ...]
    selected_epoch: int
    train_size: int


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise DataError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    f1: float
    precision: float
    recall: float
    acc_sb: float
    acc_rel: float


@dataclass(frozen=True)
class ExperimentResult:
    """One cell of the transfer matrix."""

    train_dataset: str
    eval_dataset: str
    loss_kind: str
    ce_weight: float
    metrics: MetricsReport
    size_ratio: float
    mode: str

    def __post_init__(self) -> None:
        if not self.size_ratio > 0.0:
            raise DataError(f"size_ratio must be > 0, got {self.size_ratio}")
        if self.mode not in ("supervised", "zeroshot"):
            raise DataError(f"mode must be supervised|zeroshot, got {self.mode!r}")


def _stratified_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches with near-proportional class mixture.

    Classes are shuffled independently and merged so that each prefix holds
    both classes in roughly their global ratio; a trailing singleton batch is
    folded into its predecessor so contrastive losses always see a pair.
    """
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    pos = pos[rng.permutation(pos.size)]
    neg = neg[rng.permutation(neg.size)]
    merged = np.empty(labels.size, dtype=np.int64)
    i = j = 0
    for k in range(labels.size):
        frac_pos = i / pos.size if pos.size else 1.0
        frac_neg = j / neg.size if neg.size else 1.0
        if i < pos.size and (j >= neg.size or frac_pos <= frac_neg):
            merged[k] = pos[i]
            i += 1
        else:
            merged[k] = neg[j]
            j += 1
    batches = [merged[s : s + batch_size] for s in range(0, labels.size, batch_size)]
    if len(batches) > 1 and batches[-1].size == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _check_set_width(embedding_set: EmbeddingSet, head_config: HeadConfig) -> None:
    if embedding_set.dim != head_config.model_dim:
        raise ModelError(
            f"embedding set {embedding_set.dataset_name!r} has width {embedding_set.dim}, "
            f"head expects {head_config.model_dim}"
        )


def _validation_accuracy(params: HeadParameters, val_set: EmbeddingSet) -> float:
    preds = predict_batch(params, val_set.vectors)
    return float(np.mean(preds == val_set.labels))


def train(
    train_set: EmbeddingSet,
    val_set: EmbeddingSet,
    head_config: HeadConfig,
    config: TrainConfig,
) -> TrainedModel:
    """Fit the head on ``train_set``; return the best-validation-epoch model.

    Fully deterministic given the embedding sets, the head's init seed, and
    ``config.seed`` (which drives batch shuffling).
    """
    _check_set_width(train_set, head_config)
    _check_set_width(val_set, head_config)
    n_neg, n_pos = train_set.class_counts()
    if n_pos < 2 or n_neg < 2:
        raise TrainError(
            f"training set {train_set.dataset_name!r} needs >= 2 samples per class, "
            f"got {n_pos} positive / {n_neg} negative"
        )

    params = init_head(head_config)
    labels_2d = one_hot(train_set.labels, head_config.num_classes)
    rng = np.random.default_rng(config.seed)

    adam_m = adam_v = None
    adam_t = 0
    if config.optimizer == "adam":
        adam_m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        adam_v = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    history: list[EpochStats] = []
    best_acc = -np.inf
    best_params = params.copy()
    best_epoch = 0
    stale = 0

    for epoch in range(1, config.max_epochs + 1):
        batches = _stratified_batches(train_set.labels, config.batch_size, rng)
        loss_sum = 0.0
        for batch_idx, batch in enumerate(batches):
            try:
                value, grads = loss_gradient(
                    config.loss, params, train_set.vectors[batch], labels_2d[batch]
                )
            except LossError as exc:
                raise TrainError(f"epoch {epoch} batch {batch_idx}: {exc}") from exc
            loss_sum += value.value * batch.size
            if config.optimizer == "sgd":
                for name, g in grads.items():
                    params.tensors[name] -= config.learning_rate * g
            else:
                adam_t += 1
                c1 = 1.0 - _ADAM_BETA1**adam_t
                c2 = 1.0 - _ADAM_BETA2**adam_t
                for name, g in grads.items():
                    adam_m[name] = _ADAM_BETA1 * adam_m[name] + (1.0 - _ADAM_BETA1) * g
                    adam_v[name] = _ADAM_BETA2 * adam_v[name] + (1.0 - _ADAM_BETA2) * g**2
                    step = (adam_m[name] / c1) / (np.sqrt(adam_v[name] / c2) + _ADAM_EPS)
                    params.tensors[name] -= config.learning_rate * step

        val_acc = _validation_accuracy(params, val_set)
        history.append(EpochStats(epoch=epoch, train_loss=loss_sum / len(train_set), val_accuracy=val_acc))
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = params.copy()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    return TrainedModel(
        params=best_params,
        train_dataset=train_set.dataset_name,
        config=config,
        history=tuple(history),
        selected_epoch=best_epoch,
        train_size=len(train_set),
    )


def evaluate(model: TrainedModel, eval_set: EmbeddingSet) -> ConfusionCounts:
    """Confusion counts of the model over every sample of ``eval_set``."""
    _check_set_width(eval_set, model.params.config)
    preds = predict_batch(model.params, eval_set.vectors)
    actual = eval_set.labels.astype(np.int64)
    return ConfusionCounts(
        tp=int(np.sum((preds == 1) & (actual == 1))),
        tn=int(np.sum((preds == 0) & (actual == 0))),
        fp=int(np.sum((preds == 1) & (actual == 0))),
        fn=int(np.sum((preds == 0) & (actual == 1))),
    )


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def accuracy(counts: ConfusionCounts) -> float:
    """Fraction of correctly classified samples."""
    if counts.total == 0:
        raise DataError("empty confusion counts")
    return (counts.tp + counts.tn) / counts.total


def precision(counts: ConfusionCounts) -> float:
    denom = counts.tp + counts.fp
    return counts.tp / denom if denom else 0.0


def recall(counts: ConfusionCounts) -> float:
    denom = counts.tp + counts.fn
    return counts.tp / denom if denom else 0.0


def f1(counts: ConfusionCounts) -> float:
    """Binary F1 with the disease-positive class as positive.

    Zero true positives score 0 unless the counts contain no positive
    predictions and no positive samples at all, which scores 1.
    """
    if counts.total == 0:
        raise DataError("empty confusion counts")
    if counts.tp == 0:
        return 1.0 if counts.fp == 0 and counts.fn == 0 else 0.0
    p = precision(counts)
    r = recall(counts)
    return 2.0 * p * r / (p + r)


def _swap_classes(counts: ConfusionCounts) -> ConfusionCounts:
    return ConfusionCounts(tp=counts.tn, tn=counts.tp, fp=counts.fn, fn=counts.fp)


def f1_macro(counts: ConfusionCounts) -> float:
    """Unweighted mean of the per-class F1 scores."""
    return 0.5 * (f1(counts) + f1(_swap_classes(counts)))


def f1_weighted(counts: ConfusionCounts) -> float:
    """Per-class F1 averaged with weights equal to true class frequencies."""
    if counts.total == 0:
        raise DataError("empty confusion counts")
    support_pos = counts.tp + counts.fn
    support_neg = counts.tn + counts.fp
    return (support_pos * f1(counts) + support_neg * f1(_swap_classes(counts))) / counts.total


def statistical_best_counts(labels: Sequence[int] | np.ndarray) -> ConfusionCounts:
    """Confusion counts of the constant majority-label predictor."""
    arr = np.asarray(labels)
    if arr.size == 0:
        raise DataError("empty label list")
    n_pos = int(np.sum(arr == 1))
    n_neg = int(arr.size - n_pos)
    if n_pos >= n_neg:
        return ConfusionCounts(tp=n_pos, tn=0, fp=n_neg, fn=0)
    return ConfusionCounts(tp=0, tn=n_neg, fp=0, fn=n_pos)


def statistical_best(labels: Sequence[int] | np.ndarray) -> tuple[float, float, int]:
    """(accuracy, plain F1, majority label) of the majority predictor.

    Ties between class sizes resolve to the positive label.
    """
    counts = statistical_best_counts(labels)
    majority = 1 if counts.tp > 0 or counts.fp > 0 else 0
    return accuracy(counts), f1(counts), majority


def relative_accuracy(acc: float, acc_sb: float) -> float:
    """Relative change of accuracy over the statistical-best accuracy."""
    if acc_sb <= 0.0:
        raise DataError(f"statistical-best accuracy must be > 0, got {acc_sb}")
    return (acc - acc_sb) / acc_sb


def metrics_report(counts: ConfusionCounts, eval_labels: Sequence[int] | np.ndarray) -> MetricsReport:
    """All scalar metrics for one evaluation, including the baseline-relative ones."""
    acc = accuracy(counts)
    acc_sb, _, _ = statistical_best(eval_labels)
    return MetricsReport(
        acc=acc,
        f1=f1(counts),
        precision=precision(counts),
        recall=recall(counts),
        acc_sb=acc_sb,
        acc_rel=relative_accuracy(acc, acc_sb),
    )


# --------------------------------------------------------------------------
# Transfer matrix
# --------------------------------------------------------------------------


def split_embedding_set(
    embedding_set: EmbeddingSet, spec: SplitSpec
) -> tuple[EmbeddingSet, EmbeddingSet, EmbeddingSet]:
    """Deterministic (train, val, test) partition of one embedding set."""
    manifest = DatasetManifest.from_records(
        embedding_set.dataset_name,
        (SampleRecord(id=i, source="", label=int(l)) for i, l in zip(embedding_set.ids, embedding_set.labels)),
    )
    assignment = make_splits(manifest, spec)
    return (
        embedding_set.subset(assignment.train_ids),
        embedding_set.subset(assignment.val_ids),
        embedding_set.subset(assignment.test_ids),
    )


def zero_shot_matrix(
    models: Sequence[TrainedModel], eval_sets: Sequence[EmbeddingSet]
) -> list[ExperimentResult]:
    """Evaluate every model on every set; self-pairs are the supervised cells."""
    results = []
    for model in models:
        for eval_set in eval_sets:
            counts = evaluate(model, eval_set)
            report = metrics_report(counts, eval_set.labels)
            mode = "supervised" if model.train_dataset == eval_set.dataset_name else "zeroshot"
            results.append(
                ExperimentResult(
                    train_dataset=model.train_dataset,
                    eval_dataset=eval_set.dataset_name,
                    loss_kind=model.config.loss.kind,
                    ce_weight=model.config.loss.ce_weight,
                    metrics=report,
                    size_ratio=len(eval_set) / model.train_size,
                    mode=mode,
                )
            )
    return results


def write_results(results: Sequence[ExperimentResult], path: str | Path) -> None:
    """Write the fixed-column results file with full-precision values."""
    lines = ["\t".join(RESULT_COLUMNS)]
    for r in results:
        m = r.metrics
        lines.append(
            "\t".join(
                [
                    r.train_dataset,
                    r.eval_dataset,
                    r.loss_kind,
                    repr(r.ce_weight),
                    repr(m.acc),
                    repr(m.f1),
                    repr(m.precision),
                    repr(m.recall),
                    repr(m.acc_sb),
                    repr(m.acc_rel),
                    repr(r.size_ratio),
                    r.mode,
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_results(path: str | Path) -> list[ExperimentResult]:
    """Parse a results file back into experiment results."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"results file not found: {p}")
    lines = p.read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].split("\t")) != RESULT_COLUMNS:
        raise DataError(f"{p}: missing or wrong results header")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != len(RESULT_COLUMNS):
            raise DataError(f"{p}:{lineno}: expected {len(RESULT_COLUMNS)} columns")
        (train_ds, eval_ds, loss_kind, lam, acc, f1_, prec, rec, acc_sb, acc_rel, ratio, mode) = fields
        out.append(
            ExperimentResult(
                train_dataset=train_ds,
                eval_dataset=eval_ds,
                loss_kind=loss_kind,
                ce_weight=float(lam),
                metrics=MetricsReport(
                    acc=float(acc),
                    f1=float(f1_),
                    precision=float(prec),
                    recall=float(rec),
                    acc_sb=float(acc_sb),
                    acc_rel=float(acc_rel),
                ),
                size_ratio=float(ratio),
                mode=mode,
            )
        )
    return out


# --------------------------------------------------------------------------
# Rank analysis
# --------------------------------------------------------------------------


def rank_cells(
    grid: Mapping[str, Mapping[tuple[str, str], float]]
) -> dict[str, dict[tuple[str, str], float]]:
    """Per-cell accuracy ranks of each loss, 1 = best, ties averaged.

    Self-cells (train == eval) are assigned rank 0 for every loss; they mark
    the supervised diagonal and stay out of the rank competition.
    """
    losses = list(grid)
    if not losses:
        raise DataError("empty accuracy grid")
    cells: set[tuple[str, str]] | None = None
    for loss, cellmap in grid.items():
        keys = set(cellmap)
        if cells is None:
            cells = keys
        elif keys != cells:
            raise DataError(f"ragged grid: loss {loss!r} covers different cells")
    assert cells is not None
    ranks: dict[str, dict[tuple[str, str], float]] = {loss: {} for loss in losses}
    for cell in sorted(cells):
        if cell[0] == cell[1]:
            for loss in losses:
                ranks[loss][cell] = 0.0
            continue
        values = [float(grid[loss][cell]) for loss in losses]
        order = sorted(range(len(losses)), key=lambda k: -values[k])
        pos = 0
        while pos < len(order):
            end = pos + 1
            while end < len(order) and values[order[end]] == values[order[pos]]:
                end += 1
            shared = ((pos + 1) + end) / 2.0
            for k in range(pos, end):
                ranks[losses[order[k]]][cell] = shared
            pos = end
    return ranks


def compute_mar(grid: Mapping[str, Mapping[tuple[str, str], float]]) -> dict[str, float]:
    """Mean average rank per loss over the cross-dataset cells (lower is better)."""
    ranks = rank_cells(grid)
    any_ranks = next(iter(ranks.values()))
    offdiag = [cell for cell in any_ranks if cell[0] != cell[1]]
    if not offdiag:
        raise DataError("accuracy grid has no cross-dataset cells")
    return {loss: float(np.mean([cell_ranks[c] for c in offdiag])) for loss, cell_ranks in ranks.items()}


def results_accuracy_grid(
    results: Sequence[ExperimentResult],
) -> dict[str, dict[tuple[str, str], float]]:
    """Group results into the (loss label -> cell -> accuracy) grid shape."""
    grid: dict[str, dict[tuple[str, str], float]] = {}
    for r in results:
        label = LossConfig(kind=r.loss_kind, ce_weight=r.ce_weight).label()
        grid.setdefault(label, {})[(r.train_dataset, r.eval_dataset)] = r.metrics.acc
    return grid
