"""Negative candidate selection: similarity scores, pruning, top-K ranking.

The pipeline turns two (S, C) feature matrices into, per query row, at most
K negative similarity scores:

1. similarity_matrix - all pairwise dot products, diagonal (the positives)
   extracted and then structurally zeroed;
2. prune - drop candidates whose similarity does not exceed a threshold
   (low similarity means a negligible contribution to the query/negative
   mutual information, see the estimators module);
3. rank_topk - keep the K highest surviving scores per row, deterministic
   tie-break toward the lower column index.

Selection indices are constants under differentiation; gradients flow only
through the selected score values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, gather_pairs, matmul, transpose, zero_diag

__all__ = [
    "NoSurvivorsError",
    "SimilarityMatrix",
    "NegativeRow",
    "NegativeSet",
    "similarity_matrix",
    "prune",
    "rank_topk",
    "select_negatives",
    "write_similarity_csv",
]


class NoSurvivorsError(RuntimeError):
    """Pruning left a query row without any negative candidate."""

    def __init__(self, row):
        self.row = int(row)
        super().__init__(
            f"query row {row} has zero surviving negatives; lower theta"
        )


@dataclass
class SimilarityMatrix:
    """S x S score matrix with the diagonal held out as the positives.

    `scores` is the masked matrix (zero diagonal); `positives` holds the
    pre-mask diagonal. `eligible` tracks negative candidacy: the diagonal is
    never eligible, and pruning clears further entries.
    """

    scores: Tensor
    positives: Tensor
    mask_applied: bool
    eligible: np.ndarray
    theta: float | None = None

    @property
    def size(self):
        return self.scores.shape[0]

    def ranking_values(self):
        """Score matrix with ineligible entries at -inf, for selection."""
        return np.where(self.eligible, self.scores.data, -np.inf)


@dataclass
class NegativeRow:
    """Selected negatives of one query: indices, values, taped values."""

    query: int
    indices: np.ndarray
    scores: np.ndarray
    score_tensor: Tensor

    @property
    def k_effective(self):
        return int(self.indices.shape[0])


@dataclass
class NegativeSet:
    rows: list[NegativeRow] = field(default_factory=list)
    k_requested: int = 0

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)


def similarity_matrix(fake, real):
    """Pairwise scores between generated-image and source-image features.

    scores[i][j] is the dot product of fake row i with real row j. The
    diagonal is captured into `positives` before being structurally zeroed
    in `scores`; off-diagonal gradients are unaffected by the masking.
    """
    if fake.shape != real.shape or fake.data.ndim != 2:
        raise ValueError(
            f"similarity_matrix: shapes must match as (S, C), got {fake.shape} vs {real.shape}"
        )
    s = fake.shape[0]
    raw = matmul(fake, transpose(real))
    idx = np.arange(s)
    positives = gather_pairs(raw, idx, idx)
    scores = zero_diag(raw)
    eligible = ~np.eye(s, dtype=bool)
    return SimilarityMatrix(scores, positives, True, eligible)


def prune(sim, theta):
    """Keep candidates with score strictly above theta; positives untouched.

    theta = -inf disables pruning; raising theta never adds a survivor.
    """
    theta = float(theta)
    if math.isnan(theta):
        raise ValueError("prune: theta must not be NaN")
    if not sim.mask_applied:
        raise ValueError("prune: similarity matrix must be masked first")
    eligible = sim.eligible & (sim.scores.data > theta)
    return SimilarityMatrix(sim.scores, sim.positives, True, eligible, theta)


def rank_topk(sim, k, on_empty="error"):
    """Top-K surviving scores per query row, highest first.

    Ties break toward the lower column index; rows with fewer than K
    survivors keep them all (k_effective < K). A row with zero survivors
    raises NoSurvivorsError, or falls back to the full unpruned candidate
    row when on_empty="all-candidates" (training-loop convenience).
    """
    k = int(k)
    if k < 1:
        raise ValueError("rank_topk: K must be >= 1")
    if on_empty not in ("error", "all-candidates"):
        raise ValueError("rank_topk: on_empty must be 'error' or 'all-candidates'")
    values = sim.scores.data
    rows = []
    for i in range(sim.size):
        cand = np.flatnonzero(sim.eligible[i])
        if cand.size == 0:
            if on_empty == "error":
                raise NoSurvivorsError(i)
            cand = np.flatnonzero(~np.eye(sim.size, dtype=bool)[i])
        vals = values[i, cand]
        # stable sort on -value keeps ascending column order within ties
        order = np.argsort(-vals, kind="stable")[: min(k, cand.size)]
        chosen = cand[order]
        score_tensor = gather_pairs(
            sim.scores, np.full(chosen.shape, i, dtype=np.int64), chosen
        )
        rows.append(NegativeRow(i, chosen, values[i, chosen].copy(), score_tensor))
    return NegativeSet(rows, k)


def select_negatives(fake, real, theta, k, on_empty="error"):
    """similarity -> prune -> rank, returning (positives, NegativeSet)."""
    sim = prune(similarity_matrix(fake, real), theta)
    negset = rank_topk(sim, k, on_empty=on_empty)
    return sim.positives, negset


def write_similarity_csv(sim, negset, path):
    """Dump per-candidate rows: query, candidate, score, selected, pruned.

    Pruned entries are exported with score 0 (they are reset, not carried);
    the diagonal is the positive and is not listed as a candidate.
    """
    selected = np.zeros((sim.size, sim.size), dtype=bool)
    for row in negset:
        selected[row.query, row.indices] = True
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["query_index", "candidate_index", "score", "selected", "pruned"])
        for i in range(sim.size):
            for j in range(sim.size):
                if i == j:
                    continue
                pruned = not sim.eligible[i, j]
                score = 0.0 if pruned else float(sim.scores.data[i, j])
                writer.writerow(
                    [
                        i,
                        j,
                        repr(score),
                        "true" if selected[i, j] else "false",
                        "true" if pruned else "false",
                    ]
                )
