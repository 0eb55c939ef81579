"""Hard / semi-hard / easy classification of negatives and per-term weights.

With gap = d(anchor, negative_j) - d(anchor, positive):
  hard       gap <= 0            (negative at least as close as the positive)
  semi-hard  0 < gap <= margin   (positive closer, but within the margin)
  easy       gap > margin

Boundaries are closed downward (gap == 0 is hard, gap == margin is
semi-hard) so every negative lands in exactly one category. The answer set
is fixed per question, so mining modulates the loss weights of the given
negatives rather than sampling a pool.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .manifold import EmbeddingBatch, distance_matrix

HARD = 0
SEMI_HARD = 1
EASY = 2
POSITIVE = -1


@dataclass
class MiningReport:
    """Per-negative category mask (B, N) and category totals.

    mask holds HARD/SEMI_HARD/EASY codes, with POSITIVE at each label slot;
    counts sum to B*(N-1).
    """

    mask: np.ndarray
    hard: int
    semi_hard: int
    easy: int

    @property
    def counts(self) -> tuple[int, int, int]:
        return (self.hard, self.semi_hard, self.easy)


def classify_negatives(batch: EmbeddingBatch, margin: float) -> MiningReport:
    """Tag every negative of every sample as hard, semi-hard, or easy."""
    if batch.labels is None:
        raise ValueError("classify_negatives requires a labeled batch")
    if not np.isfinite(margin) or margin < 0:
        raise ValueError(f"margin must be finite and >= 0, got {margin}")
    batch.validate()

    dmat = distance_matrix(batch)
    b = np.arange(batch.batch_size)
    gap = dmat - dmat[b, batch.labels][:, None]

    mask = np.full(dmat.shape, EASY, dtype=np.int8)
    mask[gap <= margin] = SEMI_HARD
    mask[gap <= 0.0] = HARD
    mask[b, batch.labels] = POSITIVE

    return MiningReport(
        mask=mask,
        hard=int(np.sum(mask == HARD)),
        semi_hard=int(np.sum(mask == SEMI_HARD)),
        easy=int(np.sum(mask == EASY)),
    )


def mining_weights(report: MiningReport, w_hard: float, w_semi: float) -> np.ndarray:
    """Per-term weight matrix: hard -> w_hard, semi-hard -> w_semi, easy -> 1.

    Easy terms have zero hinge value so their weight is immaterial; the
    positive slot is also set to 1 (the loss never reads it) so neutral
    weights yield an all-ones matrix.
    """
    if w_hard < 0 or w_semi < 0:
        raise ValueError("mining weights must be >= 0")
    weights = np.ones(report.mask.shape, dtype=np.float64)
    weights[report.mask == HARD] = w_hard
    weights[report.mask == SEMI_HARD] = w_semi
    return weights
