"""Moment-aware video/text encoders and similarity scoring.

The forward pipeline for a batch of videos is::

    raw frames --pool--> N clips --FC+ReLU+pos+transformer--> V
    V --mean+Linear--> vbar --Linear+sigmoid--> (c, w) --window--> M
    (V, M) --masked multi-moment attention--> V_att --fuse (FFN)--> V_g
    M @ V --> V_m  (moment RoI features)

All batched functions accept tensors with a leading batch axis ``B``.
Parameters live in a flat ``dict[str, Parameter]``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numkit as nk
from .numkit import Parameter, Tensor

WINDOWS = ("gaussian", "rectangular", "triangular")
MASK_MODES = ("peak_normalized", "raw_pdf")
SIM_MODES = ("cosine", "inner")

# half-width of the rectangular/triangular windows, in units of sigma * w
WINDOW_SUPPORT = 3.0
RECT_FLOOR = 1e-6


class InputError(ValueError):
    """Raised when an input's shape or dimension does not match the model config."""


@dataclass(frozen=True)
class ModelConfig:
    N: int = 32
    d: int = 256
    D_in: int = 512
    H: int = 4
    sigma: float = 1.0 / 9.0
    window: str = "gaussian"
    mask_mode: str = "peak_normalized"
    temperature: float = 0.07
    ffn_hidden: int | None = None
    base_layers: int = 1
    sim_mode: str = "cosine"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be >= 2")
        if self.H < 1 or self.d % self.H:
            raise ValueError(f"d={self.d} must be divisible by H={self.H}")
        if self.sigma <= 0 or self.temperature <= 0:
            raise ValueError("sigma and temperature must be positive")
        if self.window not in WINDOWS:
            raise ValueError(f"window must be one of {WINDOWS}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if self.sim_mode not in SIM_MODES:
            raise ValueError(f"sim_mode must be one of {SIM_MODES}")
        if self.base_layers < 0:
            raise ValueError("base_layers must be >= 0")

    @property
    def d_k(self) -> int:
        return self.d // self.H

    @property
    def hidden(self) -> int:
        return self.ffn_hidden or self.d

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RawVideoFeatures:
    video_id: str
    features: np.ndarray  # T x D_in


@dataclass
class VideoFeatures:
    video_id: str
    V: np.ndarray  # N x d


@dataclass
class QueryEmbedding:
    query_id: str
    q: np.ndarray  # d
    video_id: str | None = None


@dataclass
class MomentSpans:
    c: Tensor  # (..., H) centers in (0, 1)
    w: Tensor  # (..., H) widths in (0, 1)


@dataclass
class MomentMask:
    M: Tensor  # (..., H, N)
    mode: str


@dataclass
class MomentEnhancedVideo:
    """Everything the moment branch produces for a batch of videos."""

    V: Tensor
    Vg: Tensor
    vbar: Tensor | None = None
    spans: MomentSpans | None = None
    mask: MomentMask | None = None
    Vatt: Tensor | None = None  # (B, H, N, d_k)
    Vm: Tensor | None = None  # (B, H, d)

    def heads(self, b: int = 0) -> list[np.ndarray]:
        """Per-head attention outputs of video ``b`` as a list of N x d_k arrays."""
        return [h for h in self.Vatt.data[b]]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _glorot(rng, fan_in, fan_out, dtype):
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out)).astype(dtype)


def init_params(cfg: ModelConfig, seed: int = 0, use_moment_module: bool = True, dtype=np.float64) -> dict[str, Parameter]:
    """Deterministically initialize all model weights from ``seed``."""
    rng = np.random.default_rng(seed)
    d, hid = cfg.d, cfg.hidden
    raw: dict[str, np.ndarray] = {}

    def lin(prefix, fan_in, fan_out):
        raw[f"{prefix}.W"] = _glorot(rng, fan_in, fan_out, dtype)
        raw[f"{prefix}.b"] = np.zeros(fan_out, dtype)

    def zero_lin(prefix, fan_in, fan_out):
        # residual branches start switched off so every block begins as the identity
        raw[f"{prefix}.W"] = np.zeros((fan_in, fan_out), dtype)
        raw[f"{prefix}.b"] = np.zeros(fan_out, dtype)

    def norm(prefix):
        raw[f"{prefix}.g"] = np.ones(d, dtype)
        raw[f"{prefix}.b"] = np.zeros(d, dtype)

    lin("video.proj", cfg.D_in, d)
    raw["video.pos"] = rng.normal(0.0, 0.02, size=(cfg.N, d)).astype(dtype)
    for layer in range(cfg.base_layers):
        p = f"video.block{layer}"
        norm(f"{p}.ln1")
        for name in ("q", "k", "v"):
            raw[f"{p}.attn.W{name}"] = _glorot(rng, d, d, dtype)
        zero_lin(f"{p}.attn.out", d, d)
        norm(f"{p}.ln2")
        lin(f"{p}.ffn1", d, hid)
        zero_lin(f"{p}.ffn2", hid, d)
    lin("query.proj", cfg.D_in, d)

    if use_moment_module:
        lin("moment.pool", d, d)
        # spans start spread over the video with a mid-size width and depend
        # only weakly on content until training moves them
        raw["moment.span.W"] = rng.normal(0.0, 0.01, size=(d, 2 * cfg.H)).astype(dtype)
        centers = (np.arange(cfg.H) + 0.5) / cfg.H
        raw["moment.span.b"] = np.concatenate([np.log(centers / (1 - centers)), np.zeros(cfg.H)]).astype(dtype)
        for name in ("q", "k", "v"):
            raw[f"moment.attn.W{name}"] = _glorot(rng, d, d, dtype)
        zero_lin("moment.attn.out", d, d)
        norm("moment.ln1")
        lin("moment.ffn1", d, hid)
        zero_lin("moment.ffn2", hid, d)
        norm("moment.ln2")

    return {name: Parameter(value, name, dtype=dtype) for name, value in raw.items()}


def has_moment_module(params) -> bool:
    return "moment.span.W" in params


def cast_params(params: dict[str, Parameter], dtype) -> dict[str, Parameter]:
    return {k: Parameter(p.data.astype(dtype), k, dtype=dtype) for k, p in params.items()}


def fingerprint(params: dict[str, Parameter], cfg: ModelConfig) -> str:
    """Stable hash of the config and float32-rounded weights."""
    h = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# base encoders
# ---------------------------------------------------------------------------


def temporal_pool(features: np.ndarray, N: int) -> np.ndarray:
    """Mean-pool ``T`` frame rows into ``N`` contiguous buckets.

    When ``T < N`` each output row copies the nearest input row instead.
    """
    features = np.asarray(features)
    T = features.shape[0]
    if T < 1:
        raise InputError("a video needs at least one frame")
    if T < N:
        idx = np.minimum(((np.arange(N) + 0.5) * T / N).astype(int), T - 1)
        return features[idx]
    edges = (np.arange(N + 1) * T) // N
    sums = np.add.reduceat(features, edges[:-1], axis=0)
    return sums / np.diff(edges)[:, None]


def _split_heads(x: Tensor, H: int) -> Tensor:
    *lead, n, d = x.shape
    x = nk.reshape(x, (*lead, n, H, d // H))
    nd = len(lead)
    return nk.transpose(x, (*range(nd), nd + 1, nd, nd + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, H, n, dk = x.shape
    nd = len(lead)
    x = nk.transpose(x, (*range(nd), nd + 1, nd, nd + 2))
    return nk.reshape(x, (*lead, n, H * dk))


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention whose score columns are multiplied by ``mask``.

    ``q, k, v`` are ``(..., N, d_k)``; ``mask`` broadcasts against the
    ``(..., 1, N)`` column layout, i.e. the same mask row is used for every
    query position.
    """
    scores = nk.matmul(q, k.T) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores * mask
    return nk.matmul(nk.softmax_rows(scores), v)


def _attention_block(x: Tensor, params, prefix: str, H: int, mask: Tensor | None = None) -> Tensor:
    q = _split_heads(nk.matmul(x, params[f"{prefix}.Wq"]), H)
    k = _split_heads(nk.matmul(x, params[f"{prefix}.Wk"]), H)
    v = _split_heads(nk.matmul(x, params[f"{prefix}.Wv"]), H)
    return masked_attention(q, k, v, mask)


def _mlp(x: Tensor, params, prefix: str) -> Tensor:
    h = nk.relu(nk.linear(x, params[f"{prefix}.ffn1.W"], params[f"{prefix}.ffn1.b"]))
    return nk.linear(h, params[f"{prefix}.ffn2.W"], params[f"{prefix}.ffn2.b"])


def encode_clips(X: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Pooled clip features ``(B, N, D_in)`` -> base clip embeddings ``(B, N, d)``."""
    X = nk.as_tensor(X)
    if X.shape[-1] != cfg.D_in or X.shape[-2] != cfg.N:
        raise InputError(f"expected (..., {cfg.N}, {cfg.D_in}) clip features, got {X.shape}")
    x = nk.relu(nk.linear(X, params["video.proj.W"], params["video.proj.b"]))
    x = x + params["video.pos"]
    for layer in range(cfg.base_layers):
        p = f"video.block{layer}"
        h = nk.layer_norm_rows(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"], cfg.ln_eps)
        att = _merge_heads(_attention_block(h, params, f"{p}.attn", cfg.H))
        x = x + nk.linear(att, params[f"{p}.attn.out.W"], params[f"{p}.attn.out.b"])
        h = nk.layer_norm_rows(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"], cfg.ln_eps)
        x = x + _mlp(h, params, p)
    return x


def encode_video_base(raw: RawVideoFeatures, params, cfg: ModelConfig) -> VideoFeatures:
    feats = np.asarray(raw.features)
    if feats.ndim != 2 or feats.shape[1] != cfg.D_in:
        raise InputError(f"video {raw.video_id}: expected T x {cfg.D_in} features, got {feats.shape}")
    dtype = params["video.proj.W"].dtype
    X = Tensor(temporal_pool(feats, cfg.N).astype(dtype))
    return VideoFeatures(raw.video_id, encode_clips(X, params, cfg).data)


def encode_queries(Q: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Raw text features ``(..., D_in)`` -> ReLU joint-space embeddings ``(..., d)``."""
    Q = nk.as_tensor(Q)
    if Q.shape[-1] != cfg.D_in:
        raise InputError(f"expected query features of dim {cfg.D_in}, got {Q.shape}")
    return nk.relu(nk.linear(Q, params["query.proj.W"], params["query.proj.b"]))


def encode_query(raw: np.ndarray, params, cfg: ModelConfig, query_id: str = "", video_id: str | None = None) -> QueryEmbedding:
    raw = np.asarray(raw)
    if raw.ndim != 1:
        raise InputError(f"expected a single D_in vector, got shape {raw.shape}")
    q = encode_queries(Tensor(raw.astype(params["query.proj.W"].dtype)), params, cfg)
    return QueryEmbedding(query_id, q.data, video_id)


# ---------------------------------------------------------------------------
# moment discovery
# ---------------------------------------------------------------------------


def pool_global(V: Tensor, params) -> Tensor:
    """Global video semantic: Linear(mean over clips)."""
    return nk.linear(nk.mean(nk.as_tensor(V), axis=-2), params["moment.pool.W"], params["moment.pool.b"])


def predict_spans(vbar: Tensor, params, cfg: ModelConfig) -> MomentSpans:
    cw = nk.sigmoid(nk.linear(nk.as_tensor(vbar), params["moment.span.W"], params["moment.span.b"]))
    H = cfg.H
    return MomentSpans(c=cw[..., :H], w=cw[..., H:])


def clip_grid(N: int) -> np.ndarray:
    """Relative clip positions n/N for n = 1..N."""
    return np.arange(1, N + 1) / N


def span_to_mask(spans: MomentSpans, cfg: ModelConfig) -> MomentMask:
    """Turn (center, width) anchors into an ``(..., H, N)`` soft clip mask."""
    c = nk.as_tensor(spans.c)
    w = nk.as_tensor(spans.w)
    grid = Tensor(clip_grid(cfg.N).astype(c.dtype))
    c = nk.reshape(c, (*c.shape, 1))
    w = nk.reshape(w, (*w.shape, 1))
    scale = w * cfg.sigma
    offset = grid - c

    if cfg.window == "gaussian":
        z = offset / scale
        # log-density keeps tiny widths finite before normalization
        logm = z * z * -0.5 - nk.log(scale * math.sqrt(2.0 * math.pi))
        if cfg.mask_mode == "peak_normalized":
            M = nk.exp(logm - nk.max(logm, axis=-1, keepdims=True))
            # same floor as the other windows; far tails would otherwise underflow to 0
            M = nk.relu(M - RECT_FLOOR) + RECT_FLOOR
        else:
            M = nk.exp(logm)
        return MomentMask(M, cfg.mask_mode)

    half = scale * WINDOW_SUPPORT
    if cfg.window == "rectangular":
        inside = np.abs(offset.data) <= half.data
        M = Tensor(np.where(inside, 1.0, RECT_FLOOR).astype(c.dtype))
    else:
        M = nk.relu(1.0 - nk.absolute(offset) / half) + RECT_FLOOR
    if cfg.mask_mode == "peak_normalized":
        M = M / nk.max(M, axis=-1, keepdims=True)
    return MomentMask(M, cfg.mask_mode)


def masked_multi_moment_attention(V: Tensor, mask: MomentMask | Tensor, params, cfg: ModelConfig) -> Tensor:
    """Per-moment attention over clips; returns ``(..., H, N, d_k)``."""
    M = mask.M if isinstance(mask, MomentMask) else nk.as_tensor(mask)
    if M.shape[-2] != cfg.H or M.shape[-1] != cfg.N:
        raise InputError(f"mask shape {M.shape} does not match H={cfg.H}, N={cfg.N}")
    Mcol = nk.reshape(M, (*M.shape[:-1], 1, M.shape[-1]))
    return _attention_block(nk.as_tensor(V), params, "moment.attn", cfg.H, Mcol)


def fuse_moments(Vatt: Tensor, V: Tensor, M: MomentMask | Tensor, params, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Concatenate heads, project, add V, then a post-norm position-wise MLP.

    Returns ``(Vg, Vm)`` where ``Vm = M @ V`` are the moment RoI features.
    """
    V = nk.as_tensor(V)
    Mt = M.M if isinstance(M, MomentMask) else nk.as_tensor(M)
    att = nk.linear(_merge_heads(Vatt), params["moment.attn.out.W"], params["moment.attn.out.b"])
    x = nk.layer_norm_rows(V + att, params["moment.ln1.g"], params["moment.ln1.b"], cfg.ln_eps)
    x = nk.layer_norm_rows(x + _mlp(x, params, "moment"), params["moment.ln2.g"], params["moment.ln2.b"], cfg.ln_eps)
    return x, nk.matmul(Mt, V)


def forward_videos(X: Tensor, params, cfg: ModelConfig) -> MomentEnhancedVideo:
    """Full video branch for pooled clip features ``(B, N, D_in)``.

    Without moment-module parameters the branch degenerates to ``Vg = V``.
    """
    V = encode_clips(X, params, cfg)
    if not has_moment_module(params):
        return MomentEnhancedVideo(V=V, Vg=V)
    vbar = pool_global(V, params)
    spans = predict_spans(vbar, params, cfg)
    mask = span_to_mask(spans, cfg)
    Vatt = masked_multi_moment_attention(V, mask, params, cfg)
    Vg, Vm = fuse_moments(Vatt, V, mask, params, cfg)
    return MomentEnhancedVideo(V=V, Vg=Vg, vbar=vbar, spans=spans, mask=mask, Vatt=Vatt, Vm=Vm)


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------


def _prep(x: Tensor, mode: str) -> Tensor:
    return nk.l2_normalize(x) if mode == "cosine" else x


def pair_sim(q: Tensor, x: Tensor, mode: str = "cosine") -> Tensor:
    """Row-wise sim between matching rows of ``q (..., d)`` and ``x (..., d)``."""
    return nk.sum(_prep(q, mode) * _prep(x, mode), axis=-1)


def score_matrix(Q: Tensor, Vg: Tensor, mode: str = "cosine") -> Tensor:
    """S[t, v] = max_n sim(q_t, Vg[v, n]) for queries ``(T, d)`` and videos ``(B, N, d)``."""
    Q, Vg = nk.as_tensor(Q), nk.as_tensor(Vg)
    B, N, d = Vg.shape
    rows = nk.reshape(_prep(Vg, mode), (B * N, d))
    sims = nk.matmul(_prep(Q, mode), rows.T)
    return nk.max(nk.reshape(sims, (Q.shape[0], B, N)), axis=-1)


def similarity(q, Vg, cfg: ModelConfig | None = None, mode: str | None = None) -> float:
    """S(t, v) for one query embedding and one ``N x d`` moment-enhanced video."""
    mode = mode or (cfg.sim_mode if cfg else "cosine")
    q = q.q if isinstance(q, QueryEmbedding) else q
    q = nk.as_tensor(np.asarray(q.data if isinstance(q, Tensor) else q))
    Vg = nk.as_tensor(Vg)
    if Vg.shape[-1] != q.shape[-1]:
        raise InputError(f"query dim {q.shape[-1]} != video dim {Vg.shape[-1]}")
    return float(score_matrix(nk.reshape(q, (1, -1)), nk.reshape(Vg, (1, *Vg.shape[-2:])), mode).data[0, 0])


# ---------------------------------------------------------------------------
# inference helpers (no tape)
# ---------------------------------------------------------------------------


def _frozen(params) -> dict[str, Tensor]:
    return {k: Tensor(p.data) for k, p in params.items()}


def embed_videos(clips: np.ndarray, params, cfg: ModelConfig, chunk: int = 64, with_spans: bool = False):
    """Moment-enhanced clip embeddings ``(V, N, d)`` for pooled clips ``(V, N, D_in)``.

    With ``with_spans`` also returns the predicted ``(c, w)`` arrays (``None``
    when the model has no moment module).
    """
    frozen = _frozen(params)
    dtype = params["video.proj.W"].dtype
    outs, cs, ws = [], [], []
    for start in range(0, len(clips), chunk):
        res = forward_videos(Tensor(np.asarray(clips[start : start + chunk], dtype=dtype)), frozen, cfg)
        outs.append(res.Vg.data)
        if res.spans is not None:
            cs.append(res.spans.c.data)
            ws.append(res.spans.w.data)
    Vg = np.concatenate(outs) if outs else np.zeros((0, cfg.N, cfg.d), dtype)
    if not with_spans:
        return Vg
    spans = (np.concatenate(cs), np.concatenate(ws)) if cs else None
    return Vg, spans


def embed_base(clips: np.ndarray, params, cfg: ModelConfig, chunk: int = 64) -> np.ndarray:
    """Base clip embeddings V ``(V, N, d)`` (moment module bypassed)."""
    frozen = _frozen(params)
    dtype = params["video.proj.W"].dtype
    outs = [
        encode_clips(Tensor(np.asarray(clips[s : s + chunk], dtype=dtype)), frozen, cfg).data
        for s in range(0, len(clips), chunk)
    ]
    return np.concatenate(outs)


def embed_queries(feats: np.ndarray, params, cfg: ModelConfig) -> np.ndarray:
    dtype = params["query.proj.W"].dtype
    return encode_queries(Tensor(np.asarray(feats, dtype=dtype)), _frozen(params), cfg).data


def normalize_rows(x: np.ndarray, mode: str = "cosine") -> np.ndarray:
    if mode != "cosine":
        return x
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True) + 1e-12)
    return x / norm


def score_numpy(Q: np.ndarray, Vg: np.ndarray, mode: str = "cosine") -> np.ndarray:
    """Numpy twin of :func:`score_matrix` for inference: ``(T, d) x (V, N, d) -> (T, V)``."""
    V, N, d = Vg.shape
    rows = normalize_rows(Vg, mode).reshape(V * N, d)
    sims = normalize_rows(Q, mode) @ rows.T
    return sims.reshape(len(Q), V, N).max(axis=-1)
