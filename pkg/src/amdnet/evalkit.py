"""Ranking metrics and the analysis groupings used to read retrieval results."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_KS = (1, 5, 10, 100)
MV_EDGES = (0.0, 0.2, 0.4, 1.0)
MV_LABELS = ("short", "middle", "long")


class DataError(ValueError):
    """Annotation values outside their legal range."""


@dataclass
class RankingResult:
    query_id: str
    ranking: list[tuple[str, float]]  # best first, possibly truncated
    gt_rank: int | None = None  # 1-based rank of the ground-truth video


@dataclass
class QueryAnalysis:
    query_id: str
    mv_ratio: float
    overlap_degree: float = 0.0


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------


def _id_positions(ids: Sequence[str]) -> np.ndarray:
    """pos[i] = position of ids[i] in ascending id order."""
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    pos = np.empty(len(ids), dtype=int)
    pos[order] = np.arange(len(ids))
    return pos


def gt_ranks(scores: np.ndarray, gt: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    """1-based rank of each row's ground-truth column; ties go to the smaller id."""
    scores = np.asarray(scores)
    gt = np.asarray(gt, dtype=int)
    pos = _id_positions(ids)
    s_gt = scores[np.arange(len(gt)), gt][:, None]
    better = (scores > s_gt) | ((scores == s_gt) & (pos[None, :] < pos[gt][:, None]))
    return 1 + better.sum(axis=1)


def order_row(scores: np.ndarray, ids: Sequence[str], top_k: int | None = None) -> np.ndarray:
    """Column indices sorted by descending score, ascending id on ties."""
    pos = _id_positions(ids)
    order = np.lexsort((pos, -np.asarray(scores)))
    return order if top_k is None else order[:top_k]


def rank_matrix(
    scores: np.ndarray,
    video_ids: Sequence[str],
    query_ids: Sequence[str],
    gt: np.ndarray | None = None,
    keep: int | None = 100,
) -> list[RankingResult]:
    scores = np.asarray(scores)
    ranks = gt_ranks(scores, gt, video_ids) if gt is not None else None
    out = []
    for i, qid in enumerate(query_ids):
        order = order_row(scores[i], video_ids, keep)
        out.append(
            RankingResult(
                qid,
                [(video_ids[j], float(scores[i, j])) for j in order],
                None if ranks is None else int(ranks[i]),
            )
        )
    return out


# ---------------------------------------------------------------------------
# recall metrics
# ---------------------------------------------------------------------------


def _ranks_of(results) -> np.ndarray:
    if isinstance(results, np.ndarray):
        ranks = results
    else:
        results = list(results)
        if results and isinstance(results[0], RankingResult):
            if any(r.gt_rank is None for r in results):
                raise ValueError("every result needs a ground-truth rank")
            ranks = np.array([r.gt_rank for r in results])
        else:
            ranks = np.asarray(results)
    if ranks.size == 0:
        raise ValueError("empty result set")
    return ranks


def recall_at_k(results, k: int) -> float:
    """Percentage of queries whose ground truth is ranked within the top ``k``.

    ``results`` is a list of :class:`RankingResult` or an array of 1-based ranks.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ranks = _ranks_of(results)
    # integer count first: 100*hits is exact, so the percentage is rounded once
    return 100.0 * int(np.count_nonzero(ranks <= k)) / ranks.size


def recall_report(results, ks: Sequence[int] = DEFAULT_KS) -> dict[str, float]:
    ranks = _ranks_of(results)
    report = {f"R@{k}": recall_at_k(ranks, k) for k in ks}
    report["SumR"] = float(sum(report.values()))
    return report


def sum_recall(results, ks: Sequence[int] = DEFAULT_KS) -> float:
    return recall_report(results, ks)["SumR"]


def video_to_text_recall(
    scores: np.ndarray,
    query_video: np.ndarray,
    k: int,
    query_ids: Sequence[str] | None = None,
) -> float:
    """Percentage of videos whose best-ranked relevant query falls within the top ``k``.

    ``scores`` is ``videos x queries``; ``query_video[t]`` is the row index of
    query ``t``'s video. Ties are broken by ascending query id (index order
    when ids are not given).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores)
    query_video = np.asarray(query_video, dtype=int)
    n_v, n_q = scores.shape
    counts = np.bincount(query_video, minlength=n_v)
    if (counts == 0).any():
        raise ValueError(f"videos without relevant queries: {np.flatnonzero(counts == 0).tolist()}")
    pos = _id_positions(query_ids) if query_ids is not None else np.arange(n_q)
    hits = 0
    for v in range(n_v):
        row = scores[v]
        rel = np.flatnonzero(query_video == v)
        best = None
        for t in rel:
            r = 1 + int(np.sum((row > row[t]) | ((row == row[t]) & (pos < pos[t]))))
            best = r if best is None else min(best, r)
        hits += best <= k
    return 100.0 * hits / n_v


def v2t_report(scores: np.ndarray, query_video: np.ndarray, ks: Sequence[int] = DEFAULT_KS, query_ids=None) -> dict:
    report = {f"R@{k}": video_to_text_recall(scores, query_video, k, query_ids) for k in ks}
    report["SumR"] = float(sum(report.values()))
    return report


# ---------------------------------------------------------------------------
# groupings
# ---------------------------------------------------------------------------


def mv_bin(r: float, edges: Sequence[float] = MV_EDGES) -> int:
    """Index of the right-closed bin ``(edges[i], edges[i+1]]`` holding ``r``."""
    if not (edges[0] < r <= edges[-1]) or math.isnan(r):
        raise DataError(f"moment-to-video ratio {r} outside ({edges[0]}, {edges[-1]}]")
    return int(np.searchsorted(edges, r, side="left")) - 1


def group_by_mv(
    analyses: Sequence[QueryAnalysis] | Sequence[float],
    results,
    edges: Sequence[float] = MV_EDGES,
    labels: Sequence[str] = MV_LABELS,
) -> dict[str, dict]:
    """SumR (and population) of the queries falling in each M/V bin."""
    ratios = [a.mv_ratio if isinstance(a, QueryAnalysis) else float(a) for a in analyses]
    ranks = _ranks_of(results)
    if len(ratios) != len(ranks):
        raise ValueError("need one analysis per result")
    bins = np.array([mv_bin(r, edges) for r in ratios], dtype=int)
    out = {}
    for i, label in enumerate(labels):
        sel = ranks[bins == i]
        out[label] = {
            "count": int(sel.size),
            "range": [edges[i], edges[i + 1]],
            **(recall_report(sel) if sel.size else {"SumR": float("nan")}),
        }
    return out


def overlap_degree(spans: Sequence[tuple[float, float]]) -> list[float]:
    """For each span, the largest fraction of it covered by another span of the same video."""
    spans = [(float(s), float(e)) for s, e in spans]
    for s, e in spans:
        if not e > s:
            raise DataError(f"zero-length moment {(s, e)}")
    out = []
    for i, (s, e) in enumerate(spans):
        best = 0.0
        for j, (s2, e2) in enumerate(spans):
            if i != j:
                best = max(best, max(0.0, min(e, e2) - max(s, s2)) / (e - s))
        out.append(min(best, 1.0))
    return out


def group_by_overlap(degrees: Sequence[float], results, edges: Sequence[float] = (0.0, 0.1, 0.3, 1.0)) -> dict[str, dict]:
    """SumR per overlap-degree bin; the first bin is closed on the left so U=0 counts."""
    ranks = _ranks_of(results)
    degrees = np.asarray(degrees, dtype=float)
    idx = np.clip(np.searchsorted(edges, degrees, side="left") - 1, 0, len(edges) - 2)
    out = {}
    for i in range(len(edges) - 1):
        sel = ranks[idx == i]
        out[f"[{edges[i]},{edges[i + 1]}]"] = {
            "count": int(sel.size),
            **(recall_report(sel) if sel.size else {"SumR": float("nan")}),
        }
    return out


# ---------------------------------------------------------------------------
# localization
# ---------------------------------------------------------------------------


def interval_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0]) if inter > 0 else (a[1] - a[0]) + (b[1] - b[0])
    return inter / union if union > 0 else 0.0


def span_intervals(c: np.ndarray, w: np.ndarray, sigma: float, support: float = 3.0) -> np.ndarray:
    """(..., H, 2) intervals ``[c - support*sigma*w, c + support*sigma*w]`` clipped to [0, 1]."""
    half = support * sigma * np.asarray(w)
    c = np.asarray(c)
    return np.stack([np.clip(c - half, 0.0, 1.0), np.clip(c + half, 0.0, 1.0)], axis=-1)


def localization_quality(
    predicted: Sequence[np.ndarray],
    planted: Sequence[Sequence[tuple[float, float]]],
) -> dict[str, float]:
    """Mean best-IoU of planted moments against each video's predicted intervals,
    and the mean pairwise IoU among a video's predicted intervals."""
    best, pair = [], []
    for pred, moments in zip(predicted, planted):
        pred = [tuple(map(float, p)) for p in np.asarray(pred)]
        for m in moments:
            best.append(max(interval_iou(p, m) for p in pred))
        for i in range(len(pred)):
            for j in range(i + 1, len(pred)):
                pair.append(interval_iou(pred[i], pred[j]))
    return {
        "mean_best_iou": float(np.mean(best)) if best else float("nan"),
        "mean_pairwise_iou": float(np.mean(pair)) if pair else 0.0,
    }


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def _clean(value):
    if isinstance(value, float):
        return None if math.isnan(value) else round(value, 6)
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.generic):
        return _clean(value.item())
    return value


def write_records(path, records: Iterable[dict]) -> Path:
    """One JSON object per line, keys sorted, floats rounded to 6 places."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(_clean(rec), sort_keys=True) + "\n")
    return path


def write_csv(path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> Path:
    path = Path(path)
    columns = list(columns or (rows[0].keys() if rows else []))
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(_clean(dict(row)))
    return path
