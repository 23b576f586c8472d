"""Training objectives: log-distance contrastive, euclidean contrastive,
cross-entropy, and their exact gradients through the head.

The two contrastive objectives act on all C(n, 2) unordered pairs within a
batch.  With one-hot labels y, the pair agreement ``s_ij = 2 y_i.y_j - 1``
is +1 for same-class pairs and -1 otherwise, so same-class distances are
pulled down and cross-class distances pushed up:

    lc:  mean over pairs of  s_ij * log(|z_i - z_j| + eps)
                             + ce_weight * (H(p_i, y_i) + H(p_j, y_j))
    ec:  mean over pairs of  s_ij * |z_i - z_j|
    ce:  mean over samples of H(p_i, y_i)

where ``H(p, y) = -sum_k y_k log(p_k + eps)`` is computed against the
classifier's soft probability vector.  Because the lc prediction-error term
is summed per pair, each sample's H appears n-1 times; after the pair-count
normalisation its effective weight is ``2 * ce_weight / n`` per sample.

Gradients are analytic and match central finite differences; the distance
gradient at exactly coincident latents is defined as zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LossError
from .model import HeadParameters, _backward_trace, _forward_trace

LOSS_KINDS = ("lc", "ec", "ce")

DEFAULT_CE_WEIGHT = 0.001
DEFAULT_EPSILON = 1e-8


@dataclass(frozen=True)
class LossConfig:
    """Which objective to optimise and its two scalar knobs.

    ``ce_weight`` is the lc loss's weight on the prediction-error term;
    ``epsilon`` stabilises the log argument and the H computation.
    ``latent_norm_cap``, when set, projects latents onto a ball of that
    radius inside the training-gradient path only (the contrastive terms are
    unbounded below as clusters separate; the cap makes divergence
    impossible without altering the reported value operations).
    """

    kind: str = "lc"
    ce_weight: float = DEFAULT_CE_WEIGHT
    epsilon: float = DEFAULT_EPSILON
    latent_norm_cap: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise LossError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.ce_weight < 0.0:
            raise LossError(f"ce_weight must be >= 0, got {self.ce_weight}")
        if not self.epsilon > 0.0:
            raise LossError(f"epsilon must be > 0, got {self.epsilon}")
        if self.latent_norm_cap is not None and not self.latent_norm_cap > 0.0:
            raise LossError(f"latent_norm_cap must be > 0, got {self.latent_norm_cap}")

    def label(self) -> str:
        """Stable display label, e.g. ``lc(0.001)`` or ``ec``."""
        if self.kind == "lc":
            return f"lc({self.ce_weight:g})"
        return self.kind


@dataclass(frozen=True)
class LossValue:
    """Scalar loss plus its clustering / prediction-error breakdown."""

    value: float
    clustering_term: float
    cross_entropy_term: float


def one_hot(labels: np.ndarray, num_classes: int = 2) -> np.ndarray:
    """Integer class labels to one-hot rows."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise LossError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise LossError(f"labels outside [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
    return out


def pair_agreement(labels_onehot: np.ndarray) -> np.ndarray:
    """Matrix of 2 y_i.y_j - 1: +1 same class, -1 different."""
    y = _check_onehot(labels_onehot)
    return 2.0 * (y @ y.T) - 1.0


def _check_onehot(labels_onehot: np.ndarray) -> np.ndarray:
    y = np.asarray(labels_onehot, dtype=np.float64)
    if y.ndim != 2:
        raise LossError(f"one-hot labels must be 2-D, got shape {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)) or not np.all(y.sum(axis=1) == 1.0):
        raise LossError("labels are not one-hot rows")
    return y


def _check_probs(probs: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or (num_classes is not None and p.shape[1] != num_classes):
        raise LossError(f"invalid probability array shape {p.shape}")
    if p.size == 0:
        raise LossError("empty batch")
    if np.any(p < 0.0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise LossError("rows are not probability vectors")
    return p


def _pair_distances(latents: np.ndarray) -> np.ndarray:
    diff = latents[:, None, :] - latents[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


def _check_latents(latents: np.ndarray) -> np.ndarray:
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2:
        raise LossError(f"latents must be 2-D, got shape {z.shape}")
    if z.shape[0] < 2:
        raise LossError(f"contrastive losses need >= 2 samples, got {z.shape[0]}")
    if not np.all(np.isfinite(z)):
        raise LossError("latents contain non-finite values")
    return z


def _mean_entropy(probs: np.ndarray, labels_onehot: np.ndarray, epsilon: float) -> float:
    h = -(labels_onehot * np.log(probs + epsilon)).sum(axis=1)
    return float(h.mean())


def lc_loss(
    latents: np.ndarray,
    probs: np.ndarray,
    labels_onehot: np.ndarray,
    config: LossConfig,
) -> LossValue:
    """Log-distance contrastive loss over all batch pairs.

    Value is ``clustering + ce_weight * pair_entropy`` where the entropy
    term equals twice the per-sample mean of H (every sample pairs with the
    other n-1).
    """
    if config.kind != "lc":
        raise LossError(f"lc_loss called with config.kind={config.kind!r}")
    z = _check_latents(latents)
    y = _check_onehot(labels_onehot)
    p = _check_probs(probs, num_classes=y.shape[1])
    if not (z.shape[0] == y.shape[0] == p.shape[0]):
        raise LossError(
            f"batch misaligned: {z.shape[0]} latents, {p.shape[0]} probs, {y.shape[0]} labels"
        )
    n = z.shape[0]
    s = pair_agreement(y)
    dist = _pair_distances(z)
    iu = np.triu_indices(n, k=1)
    n_pairs = iu[0].size
    clustering = float((s[iu] * np.log(dist[iu] + config.epsilon)).sum() / n_pairs)
    entropy_pairs = 2.0 * _mean_entropy(p, y, config.epsilon)
    return LossValue(
        value=clustering + config.ce_weight * entropy_pairs,
        clustering_term=clustering,
        cross_entropy_term=entropy_pairs,
    )


def ec_loss(latents: np.ndarray, labels_onehot: np.ndarray) -> LossValue:
    """Euclidean contrastive loss: mean of s_ij * |z_i - z_j| over pairs."""
    z = _check_latents(latents)
    y = _check_onehot(labels_onehot)
    if z.shape[0] != y.shape[0]:
        raise LossError(f"batch misaligned: {z.shape[0]} latents, {y.shape[0]} labels")
    s = pair_agreement(y)
    dist = _pair_distances(z)
    iu = np.triu_indices(z.shape[0], k=1)
    clustering = float((s[iu] * dist[iu]).sum() / iu[0].size)
    return LossValue(value=clustering, clustering_term=clustering, cross_entropy_term=0.0)


def ce_loss(probs: np.ndarray, labels_onehot: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> LossValue:
    """Mean cross-entropy of soft predictions against one-hot labels."""
    y = _check_onehot(labels_onehot)
    p = _check_probs(probs, num_classes=y.shape[1])
    if p.shape[0] != y.shape[0]:
        raise LossError(f"batch misaligned: {p.shape[0]} probs, {y.shape[0]} labels")
    entropy = _mean_entropy(p, y, epsilon)
    return LossValue(value=entropy, clustering_term=0.0, cross_entropy_term=entropy)


def _apply_norm_cap(z: np.ndarray, cap: float):
    """Project rows with norm > cap onto the cap sphere; returns (z', cache)."""
    norms = np.sqrt((z**2).sum(axis=1, keepdims=True))
    over = norms > cap
    scale = np.where(over, cap / np.maximum(norms, 1e-300), 1.0)
    return z * scale, (norms, over, scale)


def _norm_cap_backward(d_capped: np.ndarray, z: np.ndarray, cache) -> np.ndarray:
    norms, over, scale = cache
    unit = z / np.maximum(norms, 1e-300)
    radial = (d_capped * unit).sum(axis=1, keepdims=True)
    projected = scale * (d_capped - unit * radial)
    return np.where(over, projected, d_capped)


def _clustering_gradient(z: np.ndarray, s: np.ndarray, n_pairs: int, kind: str, epsilon: float) -> np.ndarray:
    """d(clustering term)/dz; coincident pairs contribute zero."""
    dist = _pair_distances(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind == "lc":
            coef = s / (dist * (dist + epsilon))
        else:
            coef = s / dist
    np.fill_diagonal(coef, 0.0)
    coef[dist == 0.0] = 0.0
    coef /= n_pairs
    row = coef.sum(axis=1, keepdims=True)
    return row * z - coef @ z


def _entropy_logit_gradient(probs: np.ndarray, y: np.ndarray, epsilon: float) -> np.ndarray:
    """Exact dH/dlogits for H computed against probs + epsilon."""
    ratio = y * probs / (probs + epsilon)
    return probs * ratio.sum(axis=1, keepdims=True) - ratio


def loss_gradient(
    config: LossConfig,
    params: HeadParameters,
    embeddings: np.ndarray,
    labels_onehot: np.ndarray,
) -> tuple[LossValue, dict[str, np.ndarray]]:
    """Loss value and its gradient w.r.t. every head parameter.

    The gradient structure mirrors ``params.tensors`` key for key.  When
    ``config.latent_norm_cap`` is set the contrastive geometry (value and
    gradient) is computed on ball-projected latents; the classifier path is
    unaffected.
    """
    arr = np.asarray(embeddings, dtype=np.float64)
    y = _check_onehot(labels_onehot)
    if arr.ndim != 2 or arr.shape[0] != y.shape[0]:
        raise LossError(f"batch misaligned: embeddings {arr.shape}, labels {y.shape}")
    if y.shape[1] != params.config.num_classes:
        raise LossError(
            f"labels have {y.shape[1]} classes, head has {params.config.num_classes}"
        )
    n = arr.shape[0]
    if config.kind in ("lc", "ec") and n < 2:
        raise LossError(f"contrastive losses need >= 2 samples, got {n}")

    latents, probs, trace = _forward_trace(params, arr)
    d_latents = np.zeros_like(latents)
    d_logits = np.zeros_like(probs)

    if config.kind in ("lc", "ec"):
        if config.latent_norm_cap is not None:
            z_geom, cap_cache = _apply_norm_cap(latents, config.latent_norm_cap)
        else:
            z_geom, cap_cache = latents, None
        s = pair_agreement(y)
        iu = np.triu_indices(n, k=1)
        n_pairs = iu[0].size
        dist = _pair_distances(z_geom)
        if config.kind == "lc":
            clustering = float((s[iu] * np.log(dist[iu] + config.epsilon)).sum() / n_pairs)
            entropy = 2.0 * _mean_entropy(probs, y, config.epsilon)
            value = LossValue(
                value=clustering + config.ce_weight * entropy,
                clustering_term=clustering,
                cross_entropy_term=entropy,
            )
            d_geom = _clustering_gradient(z_geom, s, n_pairs, "lc", config.epsilon)
            d_logits = (2.0 * config.ce_weight / n) * _entropy_logit_gradient(probs, y, config.epsilon)
        else:
            clustering = float((s[iu] * dist[iu]).sum() / n_pairs)
            value = LossValue(value=clustering, clustering_term=clustering, cross_entropy_term=0.0)
            d_geom = _clustering_gradient(z_geom, s, n_pairs, "ec", config.epsilon)
        if cap_cache is not None:
            d_latents = _norm_cap_backward(d_geom, latents, cap_cache)
        else:
            d_latents = d_geom
    else:
        entropy = _mean_entropy(probs, y, config.epsilon)
        value = LossValue(value=entropy, clustering_term=0.0, cross_entropy_term=entropy)
        d_logits = _entropy_logit_gradient(probs, y, config.epsilon) / n

    grads = _backward_trace(params, trace, d_latents, d_logits)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise LossError(f"non-finite gradient for parameter {name!r}")
    if not np.isfinite(value.value):
        raise LossError(f"non-finite {config.kind} loss value")
    return value, grads
