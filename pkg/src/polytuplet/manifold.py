"""Unit-hypersphere embedding geometry with exact gradients.

Raw encoder outputs are projected onto the unit sphere; squared Euclidean
distances between projected points are then bounded in [0, 4] and equal
2 - 2*dot for unit inputs, which keeps every downstream hinge term bounded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_EPS = 1e-12


class DegenerateEmbeddingError(ValueError):
    """Input with (near-)zero norm cannot be projected onto the sphere."""


@dataclass
class EmbeddingBatch:
    """Unit-norm context and per-answer result embeddings for a mini-batch.

    context: (B, d) anchor embeddings, one per sample.
    results: (B, N, d) embeddings, one row of N per sample, answer-ordered.
    labels: (B,) correct answer indices, or None for unlabeled batches.
    """

    context: np.ndarray
    results: np.ndarray
    labels: np.ndarray | None

    @property
    def batch_size(self) -> int:
        return self.context.shape[0]

    @property
    def n_answers(self) -> int:
        return self.results.shape[1]

    @property
    def dim(self) -> int:
        return self.context.shape[1]

    def validate(self) -> None:
        if self.context.ndim != 2 or self.results.ndim != 3:
            raise ValueError("context must be (B, d) and results (B, N, d)")
        b, d = self.context.shape
        if self.results.shape[0] != b or self.results.shape[2] != d:
            raise ValueError(
                f"results shape {self.results.shape} does not match context shape {self.context.shape}"
            )
        if self.labels is not None:
            n = self.results.shape[1]
            if self.labels.shape != (b,):
                raise ValueError(f"labels shape {self.labels.shape} != ({b},)")
            if np.any(self.labels < 0) or np.any(self.labels >= n):
                raise ValueError("labels out of range [0, N)")


def project_to_sphere(raw: np.ndarray) -> np.ndarray:
    """Normalize vectors onto the unit sphere along the last axis.

    Raises DegenerateEmbeddingError for (near-)zero input norm instead of
    substituting a default direction; a silent fallback would mask encoder
    collapse.
    """
    raw = np.asarray(raw, dtype=np.float64)
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        raise DegenerateEmbeddingError(
            f"cannot project vector with norm <= {NORM_EPS} onto the unit sphere"
        )
    return raw / norms


def project_to_sphere_backward(raw: np.ndarray, upstream_grad: np.ndarray) -> np.ndarray:
    """Pull a gradient back through x -> x/||x||.

    The Jacobian is (I - u u^T)/||x|| with u = x/||x||, so the result is the
    component of the upstream gradient orthogonal to u, scaled by 1/||x||.
    Supports batched inputs along leading axes.
    """
    raw = np.asarray(raw, dtype=np.float64)
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if raw.shape != upstream_grad.shape:
        raise ValueError(f"shape mismatch: {raw.shape} vs {upstream_grad.shape}")
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        raise DegenerateEmbeddingError(
            f"cannot differentiate projection at norm <= {NORM_EPS}"
        )
    u = raw / norms
    radial = np.sum(u * upstream_grad, axis=-1, keepdims=True)
    return (upstream_grad - u * radial) / norms


def sq_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Squared Euclidean distance between two vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.dot(diff, diff))


def distance_matrix(batch: EmbeddingBatch) -> np.ndarray:
    """(B, N) matrix of squared distances from each context to its N results.

    Reductions run in numpy's fixed sequential axis order, so the result is
    bit-reproducible for identical inputs.
    """
    batch.validate()
    diff = batch.context[:, None, :] - batch.results
    return np.einsum("bnd,bnd->bn", diff, diff)
