"""Mini-batch training with Adam and SumR-based early stopping."""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import numkit as nk
from .evalkit import gt_ranks, recall_report
from .model import (
    ModelConfig,
    embed_queries,
    embed_videos,
    forward_videos,
    encode_queries,
    init_params,
    score_matrix,
    score_numpy,
)
from .numkit import AdamState, Parameter, Tensor
from .objectives import BatchScores, LossWeights, diversity_loss, relevance_loss, retrieval_loss, total_loss
from .synthdata import Corpus


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr: float = 3e-4
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    eval_every: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    use_moment_module: bool = True
    use_div_loss: bool = True
    use_rel_loss: bool = True
    val_fraction: float = 0.1
    precision: str = "f64"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 so contrastive terms have negatives")
        if self.patience < 1 or self.eval_every < 1 or self.max_epochs < 1:
            raise ValueError("patience, eval_every and max_epochs must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    ret: float
    div: float
    rel: float
    sumr: float | None = None
    seconds: float = field(default=0.0, compare=False)

    def as_dict(self, timing: bool = False) -> dict:
        out = {"epoch": self.epoch, "loss": self.loss, "ret": self.ret, "div": self.div, "rel": self.rel, "sumr": self.sumr}
        if timing:
            out["seconds"] = self.seconds
        return out


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_sumr: float = float("-inf")
    stopped_early: bool = False
    label: str = "full"

    @property
    def evals(self) -> list[tuple[int, float]]:
        return [(e.epoch, e.sumr) for e in self.epochs if e.sumr is not None]

    def summary(self) -> dict:
        return {
            "label": self.label,
            "epochs_run": len(self.epochs),
            "best_epoch": self.best_epoch,
            "best_val_sumr": self.best_sumr,
            "stopped_early": self.stopped_early,
        }


def split_videos(video_ids: list[str], seed: int, fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Hold out ``ceil(fraction * V)`` videos chosen by a seed-stable hash of their ids."""
    keys = [hashlib.sha256(f"{seed}:{v}".encode()).hexdigest() for v in video_ids]
    order = sorted(range(len(video_ids)), key=lambda i: keys[i])
    n_val = min(len(video_ids) - 1, math.ceil(fraction * len(video_ids))) if fraction > 0 else 0
    val = np.sort(np.array(order[:n_val], dtype=int))
    train = np.sort(np.array(order[n_val:], dtype=int))
    return train, val


def batch_loss(params, cfg: TrainConfig, corpus: Corpus, video_idx) -> tuple[Tensor, dict[str, float]]:
    """Total objective on the videos ``video_idx`` and all of their queries."""
    mcfg = cfg.model
    dtype = nk.dtype_for(cfg.precision)
    video_idx = np.asarray(video_idx, dtype=int)
    local = {int(v): i for i, v in enumerate(video_idx)}
    qsel = np.flatnonzero(np.isin(corpus.query_video, video_idx))
    positives = np.array([local[int(v)] for v in corpus.query_video[qsel]], dtype=int)

    out = forward_videos(Tensor(corpus.clips[video_idx].astype(dtype)), params, mcfg)
    q = encode_queries(Tensor(corpus.query_feats[qsel].astype(dtype)), params, mcfg)
    S = score_matrix(q, out.Vg, mcfg.sim_mode)
    ret = retrieval_loss(BatchScores(S, positives), mcfg.temperature)

    div = rel = None
    w = cfg.weights
    if out.mask is not None and cfg.use_div_loss:
        div = diversity_loss(out.mask.M, w.alpha, row_normalize=w.div_row_normalize)
    if out.mask is not None and cfg.use_rel_loss:
        rel = relevance_loss(q, out.Vm[positives], out.vbar[positives], w.beta, mcfg.sim_mode)
    total = total_loss((ret, div, rel), w)
    comps = {
        "ret": float(ret.data),
        "div": float(div.data) if div is not None else 0.0,
        "rel": float(rel.data) if rel is not None else 0.0,
    }
    return total, comps


def evaluate_ranks(params, mcfg: ModelConfig, corpus: Corpus, query_idx=None, video_embeddings=None) -> np.ndarray:
    """Ground-truth ranks of the selected queries against every video of ``corpus``."""
    Vg = embed_videos(corpus.clips, params, mcfg) if video_embeddings is None else video_embeddings
    qi = np.arange(len(corpus.query_ids)) if query_idx is None else np.asarray(query_idx, dtype=int)
    Q = embed_queries(corpus.query_feats[qi], params, mcfg)
    scores = score_numpy(Q, Vg, mcfg.sim_mode)
    return gt_ranks(scores, corpus.query_video[qi], corpus.video_ids)


def _snapshot(params) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def train(corpus: Corpus, cfg: TrainConfig, label: str = "full") -> tuple[dict[str, Parameter], TrainReport]:
    """Optimize the full objective; returns the best-validation-SumR parameters.

    Validation queries (those of the held-out videos) are ranked against the
    whole corpus. Training stops once SumR has not improved for
    ``patience`` consecutive evaluations.
    """
    dtype = nk.dtype_for(cfg.precision)
    train_idx, val_idx = split_videos(corpus.video_ids, cfg.seed, cfg.val_fraction)
    if len(val_idx) == 0:
        val_idx = train_idx
    val_queries = np.flatnonzero(np.isin(corpus.query_video, val_idx))

    params = init_params(cfg.model, cfg.seed, cfg.use_moment_module, dtype=dtype)
    state = AdamState.for_params(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    report = TrainReport(label=label)
    best = _snapshot(params)
    since_best = 0

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(train_idx)
        sums = {"loss": 0.0, "ret": 0.0, "div": 0.0, "rel": 0.0}
        n_batches = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            vids = order[start : start + cfg.batch_size]
            total, comps = batch_loss(params, cfg, corpus, vids)
            value = float(total.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b} (videos {vids[:8].tolist()}...)")
            nk.zero_grad(params)
            total.backward()
            nk.adam_step(params, state)
            sums["loss"] += value
            for k, v in comps.items():
                sums[k] += v
            n_batches += 1

        rec = EpochRecord(epoch, *(sums[k] / n_batches for k in ("loss", "ret", "div", "rel")))
        if epoch % cfg.eval_every == 0:
            rec.sumr = recall_report(evaluate_ranks(params, cfg.model, corpus, val_queries))["SumR"]
            if rec.sumr > report.best_sumr:
                report.best_sumr, report.best_epoch = rec.sumr, epoch
                best = _snapshot(params)
                since_best = 0
            else:
                since_best += 1
        rec.seconds = time.perf_counter() - t0
        report.epochs.append(rec)
        if since_best >= cfg.patience:
            report.stopped_early = True
            break

    if report.best_epoch == 0:
        report.best_epoch = len(report.epochs)
        best = _snapshot(params)
    for k, p in params.items():
        p.data[...] = best[k]
    return params, report


ABLATION_ROWS = (
    ("baseline", dict(use_moment_module=False, use_div_loss=False, use_rel_loss=False)),
    ("+Vg", dict(use_moment_module=True, use_div_loss=False, use_rel_loss=False)),
    ("+Vg+div", dict(use_moment_module=True, use_div_loss=True, use_rel_loss=False)),
    ("+Vg+div+rel", dict(use_moment_module=True, use_div_loss=True, use_rel_loss=True)),
)


def ablate(corpus: Corpus, cfg: TrainConfig, switches=ABLATION_ROWS):
    """Train every switch combination with the same seed; returns ``{label: (params, report)}``."""
    out = {}
    for label, sw in switches:
        out[label] = train(corpus, replace(cfg, **sw), label=label)
    return out
