"""Training objectives: partially relevant retrieval, moment diversity, moment relevance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .model import pair_sim
from .numkit import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_ret: float = 0.02
    lambda_div: float = 1.0
    lambda_rel: float = 1.0
    alpha: float = 0.15
    beta: float = 0.1
    # feed the diversity term row-sum-normalized masks (see diversity_loss)
    div_row_normalize: bool = True

    def __post_init__(self):
        for name in ("lambda_ret", "lambda_div", "lambda_rel", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class BatchScores:
    """Query x video similarity matrix with each query's positive video index."""

    S: Tensor
    positives: np.ndarray

    def __post_init__(self):
        self.S = nk.as_tensor(self.S)
        self.positives = np.asarray(self.positives, dtype=int)
        if self.S.ndim != 2 or self.S.shape[0] != len(self.positives):
            raise ValueError(f"score matrix {self.S.shape} does not match {len(self.positives)} queries")
        if self.S.shape[0] == 0 or self.S.shape[1] == 0:
            raise ValueError("empty batch")
        if self.positives.min() < 0 or self.positives.max() >= self.S.shape[1]:
            raise ValueError("positive video index out of range")

    @property
    def positive_sets(self) -> list[np.ndarray]:
        """P_t for every video: indices of its positive queries."""
        return [np.flatnonzero(self.positives == v) for v in range(self.S.shape[1])]


def retrieval_loss(scores: BatchScores, temperature: float = 0.07) -> Tensor:
    """Video-to-multiquery plus query-to-video InfoNCE over a batch.

    For each video, the first term averages over its positive queries the log
    ratio of ``exp(S/tau)`` of that query against itself plus all queries that
    are not positives of the video. The second term averages, over the same
    positive queries, the usual query-to-video log-softmax across batch videos.
    Videos with no positive query in the batch are skipped.
    """
    S = scores.S
    n_q, n_v = S.shape
    pos = np.zeros((n_q, n_v), dtype=S.dtype)
    pos[np.arange(n_q), scores.positives] = 1.0
    counts = pos.sum(axis=0)
    active = counts > 0

    logits = S * (1.0 / temperature)
    shift = float(logits.data.max())
    E = nk.exp(logits - shift)
    neg_col = nk.sum(E * (1.0 - pos), axis=0, keepdims=True)  # (1, V)
    v2q = logits - shift - nk.log(E + neg_col)  # log-ratio for every (t, v)
    pos_logit = nk.sum(logits * pos, axis=1)  # (Q,)
    q2v = pos_logit - shift - nk.log(nk.sum(E, axis=1))

    per_query_weight = (1.0 / counts[scores.positives]).astype(S.dtype)
    weight = pos / np.where(counts > 0, counts, 1.0)
    total = nk.sum(v2q * weight) + nk.sum(q2v * per_query_weight)
    return total * (-1.0 / int(active.sum()))


def diversity_loss(M: Tensor, alpha: float = 0.15, row_normalize: bool = False) -> Tensor:
    """Frobenius penalty ``||M M^T - alpha I||^2`` averaged over leading batch axes.

    With ``row_normalize`` each mask row is first divided by its sum, which
    makes the diagonal target ``alpha`` reachable at moderate widths.
    """
    M = nk.as_tensor(M)
    if row_normalize:
        M = M / nk.sum(M, axis=-1, keepdims=True)
    H = M.shape[-2]
    gram = nk.matmul(M, M.T) - alpha * np.eye(H, dtype=M.dtype)
    per = nk.sum(nk.sum(gram * gram, axis=-1), axis=-1)
    return nk.mean(per) if per.ndim else per


def relevance_loss(q: Tensor, Vm: Tensor, vbar: Tensor, beta: float = 0.1, mode: str = "cosine") -> Tensor:
    """Hinge ``[beta + sim(q, vbar) - max_h sim(q, Vm_h)]_+`` averaged over queries.

    ``q`` is ``(..., d)``, ``Vm`` is ``(..., H, d)`` and ``vbar`` is ``(..., d)``
    already gathered so that row ``t`` belongs to query ``t``'s video.
    """
    q, Vm, vbar = nk.as_tensor(q), nk.as_tensor(Vm), nk.as_tensor(vbar)
    neg = pair_sim(q, vbar, mode)
    q_rows = nk.reshape(q, (*q.shape[:-1], 1, q.shape[-1]))
    best = nk.max(pair_sim(q_rows, Vm, mode), axis=-1)
    hinge = nk.relu(neg - best + beta)
    return nk.mean(hinge) if hinge.ndim else hinge


def total_loss(components, weights: LossWeights) -> Tensor | float:
    """Weighted sum of ``(retrieval, diversity, relevance)``; ``None`` terms are skipped."""
    if isinstance(components, dict):
        components = (components.get("ret"), components.get("div"), components.get("rel"))
    ret, div, rel = components
    out = None
    for value, lam in ((ret, weights.lambda_ret), (div, weights.lambda_div), (rel, weights.lambda_rel)):
        if value is None or lam == 0:
            continue
        term = value * lam
        out = term if out is None else out + term
    return 0.0 if out is None else out
