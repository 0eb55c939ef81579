"""Loss functions with exact analytic gradients w.r.t. embeddings and logits.

Implements the triplet hinge, its multi-negative polytuplet extension, the
categorical cross-entropy head on distance-derived logits, and the hybrid
objective combining both. Hinge subgradients at zero are defined as zero,
so a fully satisfied batch has exactly zero gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .manifold import EmbeddingBatch, distance_matrix
from .mining import classify_negatives, mining_weights


@dataclass
class TripletConfig:
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")


@dataclass
class PolytupletConfig:
    """Margin, mining weights, hybrid mixing weights, and logit temperature."""

    margin: float = 1.0
    w_hard: float = 1.0
    w_semi: float = 1.0
    lambda_poly: float = 1.0
    lambda_cce: float = 1.0
    temperature: float = 1.0

    def __post_init__(self) -> None:
        for name in ("margin", "w_hard", "w_semi", "lambda_poly", "lambda_cce", "temperature"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.lambda_poly + self.lambda_cce <= 0:
            raise ValueError("lambda_poly + lambda_cce must be > 0")


@dataclass
class LossOutput:
    """Scalar loss plus gradients mirroring the embedding batch shapes."""

    value: float
    grad_context: np.ndarray
    grad_results: np.ndarray


@dataclass
class CceOutput:
    value: float
    grad_logits: np.ndarray


@dataclass
class HybridOutput:
    """Hybrid loss with per-component values for reporting."""

    value: float
    poly_value: float
    cce_value: float
    grad_context: np.ndarray
    grad_results: np.ndarray


def triplet_loss(
    anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray, cfg: TripletConfig
) -> LossOutput:
    """Single-triplet hinge max(0, d(a,p) - d(a,n) + alpha).

    grad_results stacks [d/d positive, d/d negative]; gradients are exact
    subgradients, zero when the hinge is inactive.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    positive = np.asarray(positive, dtype=np.float64)
    negative = np.asarray(negative, dtype=np.float64)
    if anchor.shape != positive.shape or anchor.shape != negative.shape:
        raise ValueError("anchor, positive, negative must share one dimension")

    dp = anchor - positive
    dn = anchor - negative
    value = float(np.dot(dp, dp) - np.dot(dn, dn) + cfg.alpha)
    if value <= 0.0:
        zeros = np.zeros_like(anchor)
        return LossOutput(0.0, zeros, np.stack([zeros, zeros]))
    grad_anchor = 2.0 * (dp - dn)
    grad_positive = -2.0 * dp
    grad_negative = 2.0 * dn
    return LossOutput(value, grad_anchor, np.stack([grad_positive, grad_negative]))


def _poly_terms(batch: EmbeddingBatch, cfg: PolytupletConfig, dmat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-term (B, N) hinge values and weighted activity coefficients."""
    b = np.arange(batch.batch_size)
    pos = dmat[b, batch.labels]
    gaps = pos[:, None] - dmat + cfg.margin
    negatives = np.ones_like(dmat, dtype=bool)
    negatives[b, batch.labels] = False

    hinges = np.where(negatives, np.maximum(gaps, 0.0), 0.0)
    weights = mining_weights(classify_negatives(batch, cfg.margin), cfg.w_hard, cfg.w_semi)
    # subgradient convention: terms exactly at the boundary stay inactive
    coeff = np.where(negatives & (gaps > 0.0), weights, 0.0)
    return hinges * weights, coeff


def polytuplet_loss(batch: EmbeddingBatch, cfg: PolytupletConfig) -> LossOutput:
    """Sum of weighted hinges over all negatives, averaged over the batch.

    value = (1/B) * sum_i sum_{j != y_i} w(i,j) * max(0, d(a_i, y_i) - d(a_i, j) + m).
    The mean over samples keeps the magnitude batch-size independent; a B=1
    batch reproduces the unnormalized per-sample sum.
    """
    if batch.labels is None:
        raise ValueError("polytuplet_loss requires a labeled batch")
    batch.validate()

    dmat = distance_matrix(batch)
    terms, coeff = _poly_terms(batch, cfg, dmat)
    n_samples = batch.batch_size
    value = float(terms.sum()) / n_samples

    coeff = coeff / n_samples
    b = np.arange(n_samples)
    diff = batch.context[:, None, :] - batch.results
    sum_c = coeff.sum(axis=1)
    diff_pos = diff[b, batch.labels]

    grad_results = 2.0 * coeff[:, :, None] * diff
    grad_results[b, batch.labels] -= 2.0 * sum_c[:, None] * diff_pos
    grad_context = 2.0 * (sum_c[:, None] * diff_pos - np.einsum("bn,bnd->bd", coeff, diff))
    return LossOutput(value, grad_context, grad_results)


def distances_to_logits(distances: np.ndarray, temperature: float) -> np.ndarray:
    """logit_j = -distance_j / temperature; argmax(logits) == argmin(distances)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    return -np.asarray(distances, dtype=np.float64) / temperature


def cce_loss(logits: np.ndarray, labels: np.ndarray) -> CceOutput:
    """Mean categorical cross-entropy over samples, with gradient w.r.t. logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n_samples, n_classes = logits.shape
    if labels.shape != (n_samples,):
        raise ValueError(f"labels shape {labels.shape} != ({n_samples},)")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError("labels out of range [0, N)")

    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    b = np.arange(n_samples)
    value = float(-np.mean(np.log(probs[b, labels])))

    grad = probs.copy()
    grad[b, labels] -= 1.0
    return CceOutput(value, grad / n_samples)


def hybrid_loss(batch: EmbeddingBatch, cfg: PolytupletConfig) -> HybridOutput:
    """lambda_poly * polytuplet + lambda_cce * CCE on distance-derived logits.

    The CCE gradient flows back through the logits and distances to both the
    context and result embeddings, so distances stay the sole determinants
    of the classification path.
    """
    poly = polytuplet_loss(batch, cfg)

    dmat = distance_matrix(batch)
    cce = cce_loss(distances_to_logits(dmat, cfg.temperature), batch.labels)

    # d(loss)/d(distance) for the CCE path
    grad_dist = -cfg.lambda_cce * cce.grad_logits / cfg.temperature
    diff = batch.context[:, None, :] - batch.results
    grad_context = cfg.lambda_poly * poly.grad_context + 2.0 * np.einsum("bn,bnd->bd", grad_dist, diff)
    grad_results = cfg.lambda_poly * poly.grad_results - 2.0 * grad_dist[:, :, None] * diff

    value = cfg.lambda_poly * poly.value + cfg.lambda_cce * cce.value
    return HybridOutput(value, poly.value, cce.value, grad_context, grad_results)
