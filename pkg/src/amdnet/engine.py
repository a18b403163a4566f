"""Persisted retrieval indexes, ranking, the dense multi-scale baseline and the latency bench."""

from __future__ import annotations

import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evalkit import RankingResult
from .model import (
    InputError,
    ModelConfig,
    cast_params,
    embed_base,
    embed_queries,
    embed_videos,
    fingerprint,
    normalize_rows,
)
from .numkit import Parameter
from .synthdata import Corpus, load_feature_file, write_feature_file

INDEX_FILE = "index.prvf"
INDEX_MANIFEST = "index.json"
CHECKPOINT_MANIFEST = "checkpoint.json"


class IndexMismatchError(Exception):
    """Index or checkpoint is malformed or belongs to a different model."""


def dense_clip_count(N: int) -> int:
    return N * (N + 1) // 2


# ---------------------------------------------------------------------------
# indexes
# ---------------------------------------------------------------------------


@dataclass
class VideoIndex:
    """Per-video ``(rows, d)`` float32 embeddings, stored row-normalized in cosine mode."""

    video_ids: list[str]
    embeddings: np.ndarray  # (V, rows, d) float32
    fingerprint: str
    sim_mode: str = "cosine"
    kind: str = "moment"

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 3:
            raise IndexMismatchError(f"index embeddings must be (videos, rows, d), got {self.embeddings.shape}")
        if len(self.video_ids) != self.embeddings.shape[0]:
            raise IndexMismatchError(f"{len(self.video_ids)} ids for {self.embeddings.shape[0]} entries")
        if len(set(self.video_ids)) != len(self.video_ids):
            raise IndexMismatchError("duplicate video ids in index")
        self._flat = self.embeddings.reshape(-1, self.embeddings.shape[-1])
        self._pos = None

    def __len__(self) -> int:
        return len(self.video_ids)

    @property
    def rows_per_video(self) -> int:
        return self.embeddings.shape[1]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[2]

    @property
    def nbytes(self) -> int:
        """Index-resident embedding bytes."""
        return int(self.embeddings.nbytes)

    def scratch_bytes(self, n_queries: int = 1) -> int:
        """Per-query working memory: one similarity per stored row plus one score per video."""
        return n_queries * 4 * (len(self) * self.rows_per_video + len(self))

    def scores(self, q: np.ndarray) -> np.ndarray:
        """Max-over-rows similarity of pre-encoded query rows ``(T, d)`` against every video."""
        q = normalize_rows(np.atleast_2d(np.asarray(q, dtype=np.float32)), self.sim_mode)
        sims = q @ self._flat.T
        return sims.reshape(len(q), len(self), self.rows_per_video).max(axis=-1)

    def rank(self, q: np.ndarray, top_k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Top-``top_k`` video positions and scores for one encoded query; ties by ascending id."""
        if top_k is not None and top_k < 1:
            raise InputError("top_k must be >= 1")
        s = self.scores(q)[0]
        if self._pos is None:
            order = sorted(range(len(self)), key=self.video_ids.__getitem__)
            self._pos = np.empty(len(self), dtype=np.int64)
            self._pos[order] = np.arange(len(self))
        idx = np.lexsort((self._pos, -s))
        if top_k is not None:
            idx = idx[:top_k]
        return idx, s[idx]

    def subset(self, n: int) -> "VideoIndex":
        if n > len(self):
            raise InputError(f"requested {n} videos but the index holds {len(self)}")
        return type(self)(self.video_ids[:n], self.embeddings[:n], self.fingerprint, self.sim_mode, self.kind)

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        write_feature_file(path / INDEX_FILE, self._flat)
        meta = {
            "kind": self.kind,
            "fingerprint": self.fingerprint,
            "sim_mode": self.sim_mode,
            "rows_per_video": self.rows_per_video,
            "dim": self.dim,
            "video_ids": self.video_ids,
        }
        (path / INDEX_MANIFEST).write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path, expected_fingerprint: str | None = None) -> "VideoIndex":
        path = Path(path)
        try:
            meta = json.loads((path / INDEX_MANIFEST).read_text(encoding="utf-8"))
            ids, rows, dim = meta["video_ids"], int(meta["rows_per_video"]), int(meta["dim"])
        except (OSError, KeyError, ValueError) as exc:
            raise IndexMismatchError(f"unreadable index manifest in {path}: {exc}") from exc
        if expected_fingerprint is not None and meta["fingerprint"] != expected_fingerprint:
            raise IndexMismatchError(
                f"index was built by model {meta['fingerprint']}, not {expected_fingerprint}"
            )
        flat = load_feature_file(path / INDEX_FILE)
        if flat.shape != (len(ids) * rows, dim):
            raise IndexMismatchError(f"index payload {flat.shape} does not match {len(ids)} x {rows} x {dim}")
        kind = meta.get("kind", "moment")
        cls_ = DenseClipIndex if kind == "dense" else cls
        return cls_(ids, flat.reshape(len(ids), rows, dim), meta["fingerprint"], meta["sim_mode"], kind)


@dataclass
class DenseClipIndex(VideoIndex):
    """Every contiguous window mean of the base encoding: ``N(N+1)/2`` rows per video."""

    kind: str = "dense"


def window_means(V: np.ndarray) -> np.ndarray:
    """``(..., N, d) -> (..., N(N+1)/2, d)`` means of all contiguous windows, scale-major.

    Scale ``s = 1`` comes first (the rows themselves), then every window of
    two rows in start order, and so on up to the single full-length window.
    """
    V = np.asarray(V, dtype=np.float64)
    N = V.shape[-2]
    csum = np.concatenate([np.zeros_like(V[..., :1, :]), np.cumsum(V, axis=-2)], axis=-2)
    out = []
    for s in range(1, N + 1):
        out.append((csum[..., s:, :] - csum[..., :-s, :]) / s)
    return np.concatenate(out, axis=-2)


def build_index(corpus: Corpus, params: dict[str, Parameter], cfg: ModelConfig) -> VideoIndex:
    """Moment-enhanced embeddings of every corpus video."""
    if len(corpus.video_ids) == 0:
        raise InputError("empty corpus")
    Vg = embed_videos(corpus.clips, params, cfg)
    emb = normalize_rows(Vg, cfg.sim_mode).astype(np.float32)
    return VideoIndex(list(corpus.video_ids), emb, fingerprint(params, cfg), cfg.sim_mode)


def build_dense_baseline(corpus: Corpus, params: dict[str, Parameter], cfg: ModelConfig) -> DenseClipIndex:
    """Window means of the base encoding (moment module bypassed)."""
    if len(corpus.video_ids) == 0:
        raise InputError("empty corpus")
    clips = window_means(embed_base(corpus.clips, params, cfg))
    emb = normalize_rows(clips, cfg.sim_mode).astype(np.float32)
    return DenseClipIndex(list(corpus.video_ids), emb, fingerprint(params, cfg), cfg.sim_mode)


def rank_query(
    q_raw: np.ndarray,
    index: VideoIndex,
    params: dict[str, Parameter],
    cfg: ModelConfig,
    top_k: int = 10,
    query_id: str = "",
) -> RankingResult:
    """Encode one raw query and rank the indexed videos by max-row similarity."""
    if top_k < 1:
        raise InputError("top_k must be >= 1")
    if len(index) == 0:
        raise InputError("empty index")
    q = embed_queries(np.asarray(q_raw).reshape(1, -1), params, cfg)
    idx, scores = index.rank(q, top_k)
    return RankingResult(query_id, [(index.video_ids[i], float(s)) for i, s in zip(idx, scores)])


def full_scan(q: np.ndarray, index: VideoIndex, top_k: int) -> list[tuple[str, float]]:
    """Slow reference ranking: one video at a time, python sort."""
    qn = normalize_rows(np.asarray(q, dtype=np.float32).reshape(-1), index.sim_mode)
    rows = []
    for vid, emb in zip(index.video_ids, index.embeddings):
        rows.append((vid, float(max(float(r @ qn) for r in emb))))
    rows.sort(key=lambda t: (-t[1], t[0]))
    return rows[:top_k]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: dict[str, Parameter], cfg: ModelConfig, extra: dict | None = None) -> Path:
    """One feature file per parameter plus a manifest of names, shapes and config."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, name in enumerate(sorted(params)):
        data = np.asarray(params[name].data)
        fname = f"params/{i:03d}.prvf"
        write_feature_file(path / fname, data.reshape(1, -1) if data.ndim < 2 else data.reshape(-1, data.shape[-1]))
        entries.append({"name": name, "shape": list(data.shape), "file": fname})
    meta = {
        "model": cfg.to_dict(),
        "fingerprint": fingerprint(params, cfg),
        "params": entries,
        "extra": extra or {},
    }
    (path / CHECKPOINT_MANIFEST).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path, dtype=np.float64) -> tuple[dict[str, Parameter], ModelConfig, dict]:
    path = Path(path)
    try:
        meta = json.loads((path / CHECKPOINT_MANIFEST).read_text(encoding="utf-8"))
        cfg = ModelConfig(**meta["model"])
        entries = meta["params"]
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise IndexMismatchError(f"unreadable checkpoint {path}: {exc}") from exc
    params = {}
    for e in entries:
        arr = load_feature_file(path / e["file"])
        if arr.size != int(np.prod(e["shape"])):
            raise IndexMismatchError(f"checkpoint tensor {e['name']} has {arr.size} values, expected shape {e['shape']}")
        params[e["name"]] = Parameter(arr.reshape(e["shape"]), name=e["name"], dtype=np.float32)
    if fingerprint(params, cfg) != meta["fingerprint"]:
        raise IndexMismatchError(f"checkpoint {path} fails its fingerprint check")
    return cast_params(params, dtype), cfg, meta.get("extra", {})


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchPoint:
    size: int
    median_ms: float
    mean_ms: float
    std_ms: float
    index_bytes: int
    scratch_bytes: int


@dataclass
class BenchReport:
    kind: str
    repetitions: int
    points: list[BenchPoint] = field(default_factory=list)
    machine: dict = field(default_factory=dict)

    @property
    def sizes(self) -> list[int]:
        return [p.size for p in self.points]

    def records(self, timing: bool = True) -> list[dict]:
        out = []
        for p in self.points:
            rec = {"kind": self.kind, "size": p.size, "index_bytes": p.index_bytes, "scratch_bytes": p.scratch_bytes}
            if timing:
                rec.update(median_ms=p.median_ms, mean_ms=p.mean_ms, std_ms=p.std_ms)
            out.append(rec)
        return out


def machine_descriptor() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "processor": platform.processor() or platform.machine(),
        "threads": 1,
    }


def synthetic_index(kind: str, size: int, N: int = 32, d: int = 64, seed: int = 0) -> VideoIndex:
    """Random unit-row database standing in for encoded videos of ``kind``."""
    if kind not in ("moment", "dense"):
        raise InputError(f"unknown index kind {kind!r}")
    rng = np.random.default_rng([seed, size])
    rows = N if kind == "moment" else dense_clip_count(N)
    emb = normalize_rows(rng.standard_normal((size, rows, d), dtype=np.float32))
    ids = [f"v{i:06d}" for i in range(size)]
    cls = VideoIndex if kind == "moment" else DenseClipIndex
    return cls(ids, emb, "synthetic", "cosine", kind)


def linear_fit_r2(x, y) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0


def bench(
    index_kind: str,
    sizes,
    repetitions: int = 100,
    database: VideoIndex | None = None,
    N: int = 32,
    d: int = 64,
    warmup: int = 10,
    seed: int = 0,
) -> BenchReport:
    """Single-thread ranking latency and memory of one index kind per database size.

    Queries are pre-encoded unit vectors; only the ranking step is timed. With
    ``database`` the first ``size`` entries are used, otherwise a random
    database of each size is generated.
    """
    from threadpoolctl import threadpool_limits

    sizes = [int(s) for s in sizes]
    if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[0] < 1:
        raise InputError("sizes must be positive and strictly increasing")
    if repetitions < 100:
        raise InputError("latency statistics need at least 100 repetitions")
    if database is not None and sizes[-1] > len(database):
        raise InputError(f"size {sizes[-1]} exceeds the {len(database)} available videos")

    report = BenchReport(index_kind, repetitions, machine=machine_descriptor())
    rng = np.random.default_rng([seed, 99])
    with threadpool_limits(limits=1):
        for size in sizes:
            index = database.subset(size) if database is not None else synthetic_index(index_kind, size, N, d, seed)
            queries = normalize_rows(rng.standard_normal((warmup + repetitions, index.dim), dtype=np.float32))
            for q in queries[:warmup]:
                index.rank(q[None], 100)
            times = np.empty(repetitions)
            for i, q in enumerate(queries[warmup:]):
                t0 = time.perf_counter()
                index.rank(q[None], 100)
                times[i] = time.perf_counter() - t0
            times *= 1e3
            report.points.append(
                BenchPoint(size, float(np.median(times)), float(times.mean()), float(times.std()), index.nbytes, index.scratch_bytes())
            )
            del index
    return report
