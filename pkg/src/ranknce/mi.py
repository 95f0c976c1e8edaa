"""Information-theoretic diagnostics for the contrastive pairs.

These estimators run on plain float64 arrays (feature-similarity snapshots,
never the training tape):

- infonce_bound: the single-sample variational lower bound on the mutual
  information between a query and its positive. The literal form is the
  mean log softmax ratio and is always <= 0; the standard form adds
  ln(N+1). Both are reported, neither is silently preferred.
- multisample_bound: the (N+1)-sample bound that stays valid when queries
  and negatives are dependent; needs the full cross-pairing score matrix,
  so it is a toy-regime quantity.
- conditional_probs: per-query softmax rows over {positive, negatives},
  with the marginal treated as a uniform constant (it has no operational
  definition here), so each row sums to 1.
- contribution_ranking_check: confirms that ranking negatives by raw
  similarity and by conditional probability is the same ordering - the
  softmax is monotone in a single logit with the rest of the row fixed.
  This is what justifies pruning and ranking on the similarity score: the
  per-negative entropy contribution p log p grows with p, so the most
  similar negatives are the ones dominating the query/negative mutual
  information.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MiReport",
    "infonce_bound",
    "multisample_bound",
    "conditional_probs",
    "contribution_ranking_check",
    "mi_report",
]


@dataclass
class MiReport:
    bound_single: float
    bound_single_offset: float
    bound_multi: float | None
    per_negative: list = field(default_factory=list)


def _as_rows(positives, negatives):
    positives = np.asarray(positives, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64)
    if positives.ndim == 0:
        positives = positives[None]
    if negatives.ndim == 1:
        negatives = negatives[None, :]
    if positives.ndim != 1 or negatives.ndim != 2 or negatives.shape[0] != positives.shape[0]:
        raise ValueError("expected positives (Q,) with negatives (Q, N)")
    if positives.shape[0] == 0 or negatives.shape[1] == 0:
        raise ValueError("at least one query with at least one negative required")
    return positives, negatives


def _log_softmax_rows(positives, negatives, tau):
    logits = np.concatenate([positives[:, None], negatives], axis=1) / tau
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    return logits - lse


def infonce_bound(positives, negatives, tau, with_offset=False):
    """Mean log softmax ratio of the positive over its row.

    Literal form (no offset) is non-positive; with_offset adds ln(N+1),
    turning it into the standard estimate whose value approaches the true
    mutual information from below.
    """
    if tau <= 0:
        raise ValueError("infonce_bound: tau must be > 0")
    positives, negatives = _as_rows(positives, negatives)
    log_p0 = _log_softmax_rows(positives, negatives, tau)[:, 0]
    bound = float(log_p0.mean())
    if with_offset:
        bound += float(np.log(negatives.shape[1] + 1))
    return bound


def multisample_bound(pairing, tau):
    """Multi-sample bound from the full (N+1) x (N+1) cross-pairing matrix.

    pairing[k][i] is the score of sample k against the positive partner of
    sample i; the diagonal holds the matched pairs. Value is at most
    ln(N+1), attained only when the diagonal dominates.
    """
    if tau <= 0:
        raise ValueError("multisample_bound: tau must be > 0")
    pairing = np.asarray(pairing, dtype=np.float64)
    if pairing.ndim != 2 or pairing.shape[0] != pairing.shape[1]:
        raise ValueError("multisample_bound: pairing matrix must be square")
    m = pairing.shape[0]
    logits = pairing / tau
    colmax = logits.max(axis=0, keepdims=True)
    log_colmean = colmax[0] + np.log(np.exp(logits - colmax).mean(axis=0))
    return float(np.mean(np.diag(logits) - log_colmean))


def conditional_probs(positives, negatives, tau):
    """Per-query rows [p(v|v+), p(v|v-_1)..p(v|v-_N)], each summing to 1."""
    if tau <= 0:
        raise ValueError("conditional_probs: tau must be > 0")
    positives, negatives = _as_rows(positives, negatives)
    return np.exp(_log_softmax_rows(positives, negatives, tau))


def contribution_ranking_check(positive, negatives, tau=0.07):
    """Verify similarity order == conditional-probability order for one row.

    Returns (ok, report); report carries both orderings and a Kendall tau
    over strictly comparable pairs (expected 1.0). Ties in probability must
    occur exactly where similarities tie.
    """
    negatives = np.asarray(negatives, dtype=np.float64)
    probs = conditional_probs(positive, negatives, tau)[0, 1:]
    sims = negatives.reshape(-1)
    order_by_sim = np.argsort(-sims, kind="stable")
    order_by_p = np.argsort(-probs, kind="stable")
    ties_match = True
    concordant = discordant = 0
    n = sims.shape[0]
    for a in range(n):
        for b in range(a + 1, n):
            sim_tie = sims[a] == sims[b]
            p_tie = probs[a] == probs[b]
            if sim_tie != p_tie:
                ties_match = False
            if sim_tie or p_tie:
                continue
            if (sims[a] > sims[b]) == (probs[a] > probs[b]):
                concordant += 1
            else:
                discordant += 1
    total = concordant + discordant
    kendall = 1.0 if total == 0 else (concordant - discordant) / total
    ok = bool(np.array_equal(order_by_sim, order_by_p) and ties_match and kendall == 1.0)
    return ok, {
        "kendall_tau": kendall,
        "ties_match": ties_match,
        "order_by_similarity": order_by_sim,
        "order_by_probability": order_by_p,
    }


def mi_report(positives, negatives, tau, pairing=None):
    """Assemble the per-snapshot diagnostic record.

    per_negative lists, for the first query row, (index, similarity,
    p(v|v-_n), p log p) - the sample estimate of that negative's entropy
    contribution.
    """
    positives, negatives = _as_rows(positives, negatives)
    probs = conditional_probs(positives, negatives, tau)
    per_negative = [
        (int(j), float(negatives[0, j]), float(p), float(p * np.log(p)) if p > 0 else 0.0)
        for j, p in enumerate(probs[0, 1:])
    ]
    return MiReport(
        bound_single=infonce_bound(positives, negatives, tau),
        bound_single_offset=infonce_bound(positives, negatives, tau, with_offset=True),
        bound_multi=None if pairing is None else multisample_bound(pairing, tau),
        per_negative=per_negative,
    )
