"""Probabilities and losses for joint known/synthesized discrimination.

All probability heads share one primitive: cosine similarity between a
feature and a matrix of class-embedding columns, followed by a stable
temperature softmax. Both sides of the cosine are normalized internally,
and the backward helpers chain gradients through that normalization into
the raw feature and raw class matrix, which is what training needs
(class embeddings drift off the unit sphere while learning).

Two heads exist for synthesized features: the joint scheme scores one
feature; the multi-column scheme averages the per-column softmax vectors
(score-level aggregation over the K synthesized features).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding_store import class_probabilities
from .errors import DataError


@dataclass
class LossBreakdown:
    """Per-step loss terms; total applies the configured weights."""

    known_ce: float
    synth_ce: float
    distill_mse: float
    lambda_syn: float = 1.0
    lambda_distill: float = 1.0

    @property
    def total(self) -> float:
        return self.known_ce + self.lambda_syn * self.synth_ce + self.lambda_distill * self.distill_mse

    def validate(self) -> None:
        terms = (self.known_ce, self.synth_ce, self.distill_mse, self.lambda_syn, self.lambda_distill)
        if not all(np.isfinite(t) for t in terms):
            raise DataError(f"non-finite loss terms: {self}")
        if self.known_ce < 0 or self.synth_ce < 0 or self.distill_mse < 0:
            raise DataError(f"negative loss terms: {self}")
        if self.lambda_syn < 0 or self.lambda_distill < 0:
            raise DataError("loss weights must be non-negative")


# ---------------------------------------------------------------------------
# Cosine-score graph with hand-chained gradients
# ---------------------------------------------------------------------------


def _unit_columns(mat):
    m = np.asarray(mat, dtype=np.float64)
    norms = np.linalg.norm(m, axis=0)
    if np.any(norms == 0.0):
        raise DataError("zero-norm column in cosine input")
    return m / norms, norms


def _unit_columns_vjp(unit, norms, d_unit):
    # w -> w/|w| per column: J^T g = (g - u (u . g)) / |w|
    return (d_unit - unit * (unit * d_unit).sum(axis=0)) / norms


class CosineGraph:
    """Cosine scores of feature columns against class columns.

    features: (d,) or (d, K) raw vectors; classes: (d, C) raw columns.
    scores has shape (C,) or (C, K). backward(d_scores) returns gradients
    w.r.t. the raw features and the raw class matrix.
    """

    def __init__(self, features, classes):
        feats = np.asarray(features, dtype=np.float64)
        self._single = feats.ndim == 1
        if self._single:
            feats = feats[:, None]
        self.fu, self.fnorms = _unit_columns(feats)
        self.wu, self.wnorms = _unit_columns(classes)
        if self.fu.shape[0] != self.wu.shape[0]:
            raise DataError(
                f"feature dim {self.fu.shape[0]} != class dim {self.wu.shape[0]}"
            )
        self.scores = self.wu.T @ self.fu  # (C, K)

    def backward(self, d_scores):
        ds = np.asarray(d_scores, dtype=np.float64)
        if ds.ndim == 1:
            ds = ds[:, None]
        d_fu = self.wu @ ds                      # (d, K)
        d_wu = self.fu @ ds.T                    # (d, C)
        d_feat = _unit_columns_vjp(self.fu, self.fnorms, d_fu)
        d_classes = _unit_columns_vjp(self.wu, self.wnorms, d_wu)
        if self._single:
            d_feat = d_feat[:, 0]
        return d_feat, d_classes


def _stable_softmax(logits, axis=0):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(logits, axis=0):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_vjp(probs, d_probs, tau: float):
    """Pull a gradient on softmax outputs back to the score inputs."""
    inner = (probs * d_probs).sum(axis=0, keepdims=probs.ndim > 1)
    return probs * (d_probs - inner) / tau


# ---------------------------------------------------------------------------
# Probability heads
# ---------------------------------------------------------------------------


def prob_joint_scheme(feature, class_matrix, tau: float) -> np.ndarray:
    """Single-feature softmax over the union class set."""
    return class_probabilities(feature, class_matrix, tau)


def prob_per_class_scheme(features, class_matrix, tau: float) -> np.ndarray:
    """Average of the per-column softmax vectors of a (d, K) feature bank."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise DataError(f"expected a (d, K) feature matrix, got shape {feats.shape}")
    graph = CosineGraph(feats, class_matrix)
    probs = _stable_softmax(graph.scores / tau, axis=0)
    return probs.mean(axis=1)


def cross_entropy(probs, target: int):
    """Negative log-likelihood of the target class.

    Returns (loss, gradient w.r.t. the probability vector); callers chain
    the gradient through their softmax/cosine graph.
    """
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= target < p.shape[0]:
        raise DataError(f"target {target} out of range for {p.shape[0]} classes")
    loss = -np.log(p[target])
    grad = np.zeros_like(p)
    grad[target] = -1.0 / p[target]
    return float(loss), grad


def distill_mse(p_teacher, p_student):
    """Mean squared error between probability vectors.

    The teacher is a constant target: the returned gradient is w.r.t. the
    student vector only.
    """
    pt = np.asarray(p_teacher, dtype=np.float64)
    ps = np.asarray(p_student, dtype=np.float64)
    if pt.shape != ps.shape:
        raise DataError(f"probability shapes differ: {pt.shape} vs {ps.shape}")
    diff = ps - pt
    loss = float((diff * diff).mean())
    return loss, 2.0 * diff / ps.shape[0]


# ---------------------------------------------------------------------------
# Fused loss paths used by the trainer (loss + raw-input gradients)
# ---------------------------------------------------------------------------


def known_batch_ce(features, class_matrix, tau: float, targets):
    """Mean cross-entropy of fixed feature columns against class columns.

    features (d, B) are data (no gradient); returns (loss, d class_matrix).
    Loss is evaluated in log space, so it stays finite even when the
    target probability underflows at extreme temperatures.
    """
    t = np.asarray(targets, dtype=int)
    graph = CosineGraph(features, class_matrix)
    logits = graph.scores / tau
    log_probs = _log_softmax(logits, axis=0)
    B = logits.shape[1]
    loss = float(-log_probs[t, np.arange(B)].mean())
    d_scores = _stable_softmax(logits, axis=0)
    d_scores[t, np.arange(B)] -= 1.0
    d_scores /= tau * B
    _, d_classes = graph.backward(d_scores)
    return loss, d_classes


def synth_ce_joint(feature, class_matrix, tau: float, target: int):
    """Cross-entropy of one synthesized feature toward its conditioning
    class; returns (loss, d feature, d class_matrix). Log-space loss,
    fused softmax gradient."""
    graph = CosineGraph(feature, class_matrix)
    logits = graph.scores[:, 0] / tau
    loss = float(-_log_softmax(logits)[target])
    d_scores = _stable_softmax(logits)
    d_scores[target] -= 1.0
    d_scores /= tau
    d_feat, d_classes = graph.backward(d_scores)
    return loss, d_feat, d_classes


def synth_ce_per_class(features, class_matrix, tau: float, target: int):
    """Cross-entropy of the score-level average over K synthesized
    columns; returns (loss, d features, d class_matrix).

    The average enters in log space: -log mean_k p_k[target]. The
    gradient for column k is weight_k * (p_k - onehot) / tau with
    weight_k = p_k[target] / sum_j p_j[target], a ratio that stays
    bounded when the per-column target probabilities underflow.
    """
    graph = CosineGraph(features, class_matrix)
    logits = graph.scores / tau
    K = logits.shape[1]
    log_probs = _log_softmax(logits, axis=0)
    log_target = log_probs[target]  # (K,)
    shift = log_target.max()
    loss = float(-(shift + np.log(np.exp(log_target - shift).sum())) + np.log(K))
    weights = _stable_softmax(log_target)  # p_k[target] / sum_j p_j[target]
    probs = _stable_softmax(logits, axis=0)
    d_scores = probs.copy()
    d_scores[target] -= 1.0
    d_scores *= weights[None, :] / tau
    d_feats, d_classes = graph.backward(d_scores)
    return loss, d_feats, d_classes


def distill_grad_joint(p_teacher, feature, class_matrix, tau: float):
    """Consistency loss for one student feature against fixed teacher
    probabilities; returns (loss, d feature, d class_matrix)."""
    graph = CosineGraph(feature, class_matrix)
    probs = _stable_softmax(graph.scores[:, 0] / tau)
    loss, d_probs = distill_mse(p_teacher, probs)
    d_scores = softmax_vjp(probs, d_probs, tau)
    d_feat, d_classes = graph.backward(d_scores)
    return loss, d_feat, d_classes


def distill_grad_per_class(p_teacher, features, class_matrix, tau: float):
    """Consistency loss for a K-column student bank (score-level average)
    against fixed teacher probabilities."""
    graph = CosineGraph(features, class_matrix)
    probs = _stable_softmax(graph.scores / tau, axis=0)
    K = probs.shape[1]
    pbar = probs.mean(axis=1)
    loss, d_pbar = distill_mse(p_teacher, pbar)
    d_probs = np.repeat(d_pbar[:, None], K, axis=1) / K
    d_scores = softmax_vjp(probs, d_probs, tau)
    d_feats, d_classes = graph.backward(d_scores)
    return loss, d_feats, d_classes
