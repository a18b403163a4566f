"""Synthetic partially-relevant corpora and the binary feature-file format.

Feature file layout (little-endian)::

    bytes 0-3    magic  b"PRVF"
    bytes 4-5    uint16 version (1)
    bytes 6-9    uint32 rows
    bytes 10-13  uint32 cols
    bytes 14-    float32 payload, row-major

A corpus directory holds ``manifest.jsonl`` (one JSON object per line), one
feature file per video under ``videos/`` and all query features stacked in
``queries.prvf``. Manifest records::

    {"type": "corpus", "spec": {...}}
    {"type": "video", "video_id": ..., "feature_path": ..., "moments": [
        {"moment_id": ..., "span": [start, end], "concept_id": ..., "query_ids": [...]}, ...]}
    {"type": "query", "query_id": ..., "video_id": ..., "feature_path": ..., "row": ...}

Paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import temporal_pool

MAGIC = b"PRVF"
VERSION = 1
HEADER = struct.Struct("<4sHII")
MANIFEST_NAME = "manifest.jsonl"


class FeatureFileError(Exception):
    """Base class for malformed feature files."""


class MagicError(FeatureFileError):
    pass


class VersionError(FeatureFileError):
    pass


class TruncatedError(FeatureFileError):
    pass


class NonFiniteError(FeatureFileError):
    pass


class SpecError(ValueError):
    """The corpus spec cannot be realized."""


class ManifestError(ValueError):
    """The manifest references something that does not exist."""


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------


def encode_features(features) -> bytes:
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise ValueError(f"feature files hold 2-D arrays, got shape {arr.shape}")
    rows, cols = arr.shape
    return HEADER.pack(MAGIC, VERSION, rows, cols) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_features(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < HEADER.size:
        raise TruncatedError(f"{source}: {len(blob)} bytes is shorter than the {HEADER.size}-byte header")
    magic, version, rows, cols = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise MagicError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"{source}: unsupported version {version}")
    expected = HEADER.size + 4 * rows * cols
    if len(blob) != expected:
        raise TruncatedError(f"{source}: header declares {rows}x{cols} ({expected} bytes) but file has {len(blob)}")
    arr = np.frombuffer(blob, dtype="<f4", offset=HEADER.size).reshape(rows, cols)
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{source}: payload contains NaN or infinite values")
    return arr.astype(np.float32)


def write_feature_file(path, features) -> None:
    path = Path(path)
    blob = encode_features(features)
    try:
        path.write_bytes(blob)
    except OSError as exc:
        raise OSError(f"cannot write feature file {path}: {exc}") from exc


def load_feature_file(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read feature file {path}: {exc}") from exc
    return decode_features(blob, str(path))


# ---------------------------------------------------------------------------
# corpus description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    num_videos: int = 200
    moments_per_video: int = 3
    queries_per_moment: int = 2
    N: int = 32
    D_in: int = 128
    num_latent_concepts: int = 24
    latent_dim: int = 16
    noise_std: float = 0.5
    query_noise_std: float = 0.3
    detail_scale: float = 1.0
    # sub-events per moment; a query describes their sum, so no single clip matches it
    events_per_moment: int = 2
    modality_gap: float = 0.5
    frames_per_clip: int = 3
    temporal_smoothing: int = 3
    transition: float = 0.04
    min_width: float = 0.08
    seed: int = 0
    world_seed: int | None = None

    def __post_init__(self):
        if self.moments_per_video < 1:
            raise SpecError("moments_per_video must be >= 1")
        if self.noise_std < 0 or self.query_noise_std < 0:
            raise SpecError("noise levels must be >= 0")
        if self.num_videos < 1 or self.queries_per_moment < 1:
            raise SpecError("need at least one video and one query per moment")
        if self.events_per_moment < 1:
            raise SpecError("events_per_moment must be >= 1")
        if not 0 < self.min_width <= 1:
            raise SpecError("min_width must lie in (0, 1]")
        if self.moments_per_video * self.min_width > 1:
            raise SpecError(
                f"{self.moments_per_video} moments of width >= {self.min_width} cannot fit in one video"
            )
        if self.transition < 0 or self.transition >= self.min_width:
            raise SpecError("transition must be >= 0 and shorter than min_width")

    @property
    def num_frames(self) -> int:
        return self.N * self.frames_per_clip

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PlantedMoment:
    video_id: str
    moment_id: str
    span: tuple[float, float]
    concept_id: int
    query_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        s, e = self.span
        if not 0 <= s < e <= 1:
            raise ValueError(f"moment {self.moment_id}: invalid span {self.span}")

    @property
    def length(self) -> float:
        return self.span[1] - self.span[0]


@dataclass
class VideoRecord:
    video_id: str
    feature_path: str
    moments: list[PlantedMoment]


@dataclass
class QueryRecord:
    query_id: str
    video_id: str
    feature_path: str
    row: int = 0
    moment_id: str | None = None


@dataclass
class CorpusManifest:
    videos: list[VideoRecord]
    queries: list[QueryRecord]
    root: Path = Path(".")
    spec: dict | None = None

    def validate(self) -> None:
        ids = {v.video_id for v in self.videos}
        if len(ids) != len(self.videos):
            raise ManifestError("duplicate video ids")
        for q in self.queries:
            if q.video_id not in ids:
                raise ManifestError(f"query {q.query_id} references unknown video {q.video_id}")
        for path in {v.feature_path for v in self.videos} | {q.feature_path for q in self.queries}:
            if not (self.root / path).exists():
                raise ManifestError(f"missing feature file {self.root / path}")

    @property
    def moments(self) -> list[PlantedMoment]:
        return [m for v in self.videos for m in v.moments]

    def records(self) -> list[dict]:
        out = []
        if self.spec is not None:
            out.append({"type": "corpus", "spec": self.spec})
        for v in self.videos:
            out.append(
                {
                    "type": "video",
                    "video_id": v.video_id,
                    "feature_path": v.feature_path,
                    "moments": [
                        {
                            "moment_id": m.moment_id,
                            "span": [round(m.span[0], 6), round(m.span[1], 6)],
                            "concept_id": m.concept_id,
                            "query_ids": m.query_ids,
                        }
                        for m in v.moments
                    ],
                }
            )
        for q in self.queries:
            out.append(
                {
                    "type": "query",
                    "query_id": q.query_id,
                    "video_id": q.video_id,
                    "feature_path": q.feature_path,
                    "row": q.row,
                    "moment_id": q.moment_id,
                }
            )
        return out

    def write(self, root=None) -> Path:
        root = Path(root) if root is not None else self.root
        path = root / MANIFEST_NAME
        with path.open("w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "CorpusManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        videos, queries, spec = [], [], None
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    kind = rec["type"]
                    if kind == "corpus":
                        spec = rec["spec"]
                    elif kind == "video":
                        moments = [
                            PlantedMoment(
                                rec["video_id"], m["moment_id"], tuple(m["span"]), m["concept_id"], list(m["query_ids"])
                            )
                            for m in rec.get("moments", [])
                        ]
                        videos.append(VideoRecord(rec["video_id"], rec["feature_path"], moments))
                    elif kind == "query":
                        queries.append(
                            QueryRecord(
                                rec["query_id"], rec["video_id"], rec["feature_path"], rec.get("row", 0), rec.get("moment_id")
                            )
                        )
                    else:
                        raise ManifestError(f"unknown record type {kind!r}")
                except (KeyError, TypeError, json.JSONDecodeError) as exc:
                    raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from exc
        manifest = cls(videos, queries, path.parent, spec)
        manifest.validate()
        return manifest


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


@dataclass
class SyntheticWorld:
    """Latent concept bank and the two modality maps shared by related corpora."""

    concepts: np.ndarray  # K x L, unit rows
    visual_map: np.ndarray  # L x D_in
    text_map: np.ndarray  # L x D_in

    @classmethod
    def from_spec(cls, spec: SyntheticCorpusSpec) -> "SyntheticWorld":
        rng = np.random.default_rng([spec.seed if spec.world_seed is None else spec.world_seed, 7919])
        concepts = rng.normal(size=(spec.num_latent_concepts, spec.latent_dim))
        concepts /= np.linalg.norm(concepts, axis=1, keepdims=True)
        # unit-norm latents map to roughly unit-variance feature coordinates
        visual = rng.normal(size=(spec.latent_dim, spec.D_in))
        # text features share the visual map up to a modality-specific perturbation
        gap = spec.modality_gap
        text = (visual + gap * rng.normal(size=(spec.latent_dim, spec.D_in))) / np.sqrt(1.0 + gap * gap)
        return cls(concepts, visual, text)


@dataclass
class GeneratedCorpus:
    """In-memory result of :func:`generate_corpus` (also written to disk when a root is given)."""

    manifest: CorpusManifest
    video_features: dict[str, np.ndarray]
    query_features: np.ndarray
    moment_latents: dict[str, np.ndarray]
    world: SyntheticWorld


MV_BINS = ((0.0, 0.2), (0.2, 0.4), (0.4, 1.0))


def _moment_widths(spec: SyntheticCorpusSpec, rng: np.random.Generator) -> np.ndarray:
    """Segment widths summing to 1; with >= 3 moments one lands in each M/V bin."""
    m, lo, tr = spec.moments_per_video, spec.min_width, spec.transition
    if m == 1:
        return np.array([1.0])
    if m >= 3:
        short_hi = 0.2 - tr
        extra = m - 3
        if lo > short_hi or lo * (extra + 1) + 0.2 + 2 * tr >= 0.6 - tr:
            raise SpecError("moments_per_video too large to stratify widths across M/V bins")
        for _ in range(1000):
            short = rng.uniform(lo, short_hi, size=extra + 1)
            middle = rng.uniform(0.2 + tr, 0.4 - tr)
            long_ = 1.0 - short.sum() - middle
            if long_ > 0.4 + tr:
                widths = np.concatenate([short, [middle, long_]])
                return widths[rng.permutation(m)]
        raise SpecError("could not sample stratified widths")
    for _ in range(1000):
        widths = rng.dirichlet(np.ones(m))
        if widths.min() >= lo:
            return widths
    raise SpecError("could not sample widths above min_width")


def _smooth(x: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return x
    kernel = np.ones(width) / width
    pad = width // 2
    xp = np.pad(x, ((pad, width - 1 - pad), (0, 0)), mode="edge")
    return np.stack([np.convolve(xp[:, j], kernel, mode="valid") for j in range(x.shape[1])], axis=1)


def generate_corpus(spec: SyntheticCorpusSpec, root=None) -> GeneratedCorpus:
    """Generate videos made of consecutive concept segments plus their queries.

    Every moment is a run of ``events_per_moment`` sub-events, each a latent
    ``concept + detail_scale * noise``; the moment latent is their normalized
    sum, so queries identify one specific moment but match no single clip.
    Frame features are the playing sub-event pushed through the visual map
    plus frame noise, then smoothed over time;
    at a boundary the two latents cross-fade over ``transition`` of the video
    and both neighbouring moments' spans include the blend. Queries push the
    same latent through the text map plus independent noise.
    """
    world = SyntheticWorld.from_spec(spec)
    rng = np.random.default_rng([spec.seed, 104729])
    T = spec.num_frames
    t_rel = (np.arange(T) + 0.5) / T
    root = Path(root) if root is not None else None
    if root is not None:
        (root / "videos").mkdir(parents=True, exist_ok=True)

    videos: list[VideoRecord] = []
    queries: list[QueryRecord] = []
    video_features: dict[str, np.ndarray] = {}
    query_rows: list[np.ndarray] = []
    latents: dict[str, np.ndarray] = {}
    width_digits = len(str(spec.num_videos - 1))

    for vi in range(spec.num_videos):
        vid = f"v{vi:0{width_digits}d}"
        widths = _moment_widths(spec, rng)
        bounds = np.concatenate([[0.0], np.cumsum(widths)])
        bounds[-1] = 1.0
        n_mom, n_ev = len(widths), spec.events_per_moment
        # concept_ids[i, 0] is the moment's primary concept
        concept_ids = rng.integers(spec.num_latent_concepts, size=(n_mom, n_ev))
        detail = rng.normal(size=(n_mom, n_ev, spec.latent_dim)) / np.sqrt(spec.latent_dim)
        events = world.concepts[concept_ids] + spec.detail_scale * detail
        events /= np.linalg.norm(events, axis=-1, keepdims=True)
        mlat = events.sum(axis=1)
        mlat /= np.linalg.norm(mlat, axis=-1, keepdims=True)

        # per-frame blend weights over segments (linear cross-fade at each boundary)
        weights = np.zeros((T, n_mom))
        seg = np.searchsorted(bounds[1:-1], t_rel, side="right")
        weights[np.arange(T), seg] = 1.0
        half = spec.transition / 2
        for b in range(1, n_mom):
            near = np.abs(t_rel - bounds[b]) < half
            if half > 0 and near.any():
                a = (t_rel[near] - (bounds[b] - half)) / (2 * half)
                weights[near] = 0.0
                weights[near, b - 1] = 1.0 - a
                weights[near, b] = a
        # inside a moment its sub-events play one after another
        phase = (t_rel[:, None] - bounds[None, :-1]) / widths[None, :]
        ev_idx = np.clip((phase * n_ev).astype(int), 0, n_ev - 1)  # (T, n_mom)
        frame_lat = np.einsum("tm,tml->tl", weights, events[np.arange(n_mom)[None, :], ev_idx])
        clean = frame_lat @ world.visual_map
        frames = clean + spec.noise_std * rng.normal(size=clean.shape)
        frames = _smooth(frames, spec.temporal_smoothing).astype(np.float32)
        fpath = f"videos/{vid}.prvf"
        video_features[vid] = frames
        if root is not None:
            write_feature_file(root / fpath, frames)

        moments = []
        for mi, cid in enumerate(concept_ids):
            mid = f"{vid}_m{mi}"
            start = max(0.0, bounds[mi] - (half if mi > 0 else 0.0))
            end = min(1.0, bounds[mi + 1] + (half if mi < len(widths) - 1 else 0.0))
            moment = PlantedMoment(vid, mid, (float(start), float(end)), int(cid[0]))
            latents[mid] = mlat[mi]
            for qi in range(spec.queries_per_moment):
                qid = f"{mid}_q{qi}"
                raw = mlat[mi] @ world.text_map + spec.query_noise_std * rng.normal(size=spec.D_in)
                queries.append(QueryRecord(qid, vid, "queries.prvf", len(query_rows), mid))
                query_rows.append(raw.astype(np.float32))
                moment.query_ids.append(qid)
            moments.append(moment)
        videos.append(VideoRecord(vid, fpath, moments))

    query_features = np.stack(query_rows).astype(np.float32)
    manifest = CorpusManifest(videos, queries, root or Path("."), spec.to_dict())
    if root is not None:
        write_feature_file(root / "queries.prvf", query_features)
        manifest.write(root)
    return GeneratedCorpus(manifest, video_features, query_features, latents, world)


def test_split_spec(spec: SyntheticCorpusSpec, offset: int = 1000) -> SyntheticCorpusSpec:
    """A fresh corpus drawn from the same concept bank and modality maps."""
    world = spec.seed if spec.world_seed is None else spec.world_seed
    return replace(spec, seed=spec.seed + offset, world_seed=world)


test_split_spec.__test__ = False  # not a pytest test


# ---------------------------------------------------------------------------
# loaded corpus
# ---------------------------------------------------------------------------


@dataclass
class Corpus:
    """Clip-pooled features of a whole corpus, ready for training and evaluation."""

    video_ids: list[str]
    clips: np.ndarray  # (V, N, D_in)
    query_ids: list[str]
    query_feats: np.ndarray  # (Q, D_in)
    query_video: np.ndarray  # (Q,) index into video_ids
    moments: dict[str, list[PlantedMoment]]
    query_moment: dict[str, PlantedMoment]

    @property
    def num_videos(self) -> int:
        return len(self.video_ids)

    def subset(self, video_idx) -> "Corpus":
        video_idx = np.asarray(video_idx, dtype=int)
        remap = {int(old): new for new, old in enumerate(video_idx)}
        qmask = np.isin(self.query_video, video_idx)
        qsel = np.flatnonzero(qmask)
        vids = [self.video_ids[i] for i in video_idx]
        return Corpus(
            vids,
            self.clips[video_idx],
            [self.query_ids[i] for i in qsel],
            self.query_feats[qsel],
            np.array([remap[int(v)] for v in self.query_video[qsel]], dtype=int),
            {v: self.moments[v] for v in vids},
            {self.query_ids[i]: self.query_moment[self.query_ids[i]] for i in qsel if self.query_ids[i] in self.query_moment},
        )


def _assemble(manifest: CorpusManifest, video_feats, query_feats_by_id, N: int) -> Corpus:
    video_ids = [v.video_id for v in manifest.videos]
    index = {v: i for i, v in enumerate(video_ids)}
    clips = np.stack([temporal_pool(video_feats[v], N) for v in video_ids]).astype(np.float32)
    moments = {v.video_id: v.moments for v in manifest.videos}
    by_id = {m.moment_id: m for m in manifest.moments}
    query_moment = {}
    for q in manifest.queries:
        if q.moment_id in by_id:
            query_moment[q.query_id] = by_id[q.moment_id]
    return Corpus(
        video_ids,
        clips,
        [q.query_id for q in manifest.queries],
        np.stack([query_feats_by_id[q.query_id] for q in manifest.queries]).astype(np.float32),
        np.array([index[q.video_id] for q in manifest.queries], dtype=int),
        moments,
        query_moment,
    )


def load_corpus(path, N: int) -> Corpus:
    """Read a manifest plus its feature files and pool every video to ``N`` clips."""
    manifest = CorpusManifest.read(path)
    root = manifest.root
    video_feats = {v.video_id: load_feature_file(root / v.feature_path) for v in manifest.videos}
    files: dict[str, np.ndarray] = {}
    qfeats = {}
    for q in manifest.queries:
        if q.feature_path not in files:
            files[q.feature_path] = load_feature_file(root / q.feature_path)
        arr = files[q.feature_path]
        if not 0 <= q.row < arr.shape[0]:
            raise ManifestError(f"query {q.query_id}: row {q.row} outside {q.feature_path}")
        qfeats[q.query_id] = arr[q.row]
    return _assemble(manifest, video_feats, qfeats, N)


def corpus_from_generated(gen: GeneratedCorpus, N: int) -> Corpus:
    qfeats = {q.query_id: gen.query_features[q.row] for q in gen.manifest.queries}
    return _assemble(gen.manifest, gen.video_features, qfeats, N)
