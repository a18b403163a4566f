"""
Searching an index and timing it
================================

Build the moment-enhanced index and the dense multi-scale window index from
one trained model, run a query against both, then time single-query ranking
as the database grows.
"""

# %%
from amdnet import numkit as nk
from amdnet.engine import bench, build_dense_baseline, build_index, rank_query
from amdnet.model import ModelConfig
from amdnet.synthdata import SyntheticCorpusSpec, corpus_from_generated, generate_corpus
from amdnet.trainer import TrainConfig, train

nk.set_default_dtype("f64")

spec = SyntheticCorpusSpec(num_videos=40, N=16, D_in=32, seed=2)
corpus = corpus_from_generated(generate_corpus(spec), spec.N)
mcfg = ModelConfig(N=16, d=32, D_in=32, H=4)
params, _ = train(corpus, TrainConfig(batch_size=40, lr=1e-3, max_epochs=60, patience=10, model=mcfg))

# %%
# The moment index keeps N rows per video; the dense index keeps one row per
# contiguous window, N(N+1)/2 of them.
moment = build_index(corpus, params, mcfg)
dense = build_dense_baseline(corpus, params, mcfg)
print(f"moment index: {moment.rows_per_video} rows/video, {moment.nbytes} bytes")
print(f"dense index:  {dense.rows_per_video} rows/video, {dense.nbytes} bytes")

# %%
t = 0
truth = corpus.video_ids[corpus.query_video[t]]
for name, index in (("moment", moment), ("dense", dense)):
    hits = rank_query(corpus.query_feats[t], index, params, mcfg, top_k=5).ranking
    print(name, "top 5:", ", ".join(f"{v}({s:.2f})" for v, s in hits), "| truth", truth)

# %%
# Timing uses random unit-norm databases at the default sizes (N=32, d=64),
# single-threaded, median of 100 queries after 10 warmup queries.
sizes = [250, 500, 1000]
for kind in ("moment", "dense"):
    rep = bench(kind, sizes, repetitions=100)
    print(kind, "  ".join(f"{p.size}: {p.median_ms:.2f} ms" for p in rep.points))

# %%
# Memory follows from the row counts alone: 528 / 32 at N=32.
m, d = bench("moment", [10]).points[0], bench("dense", [10]).points[0]
print(f"memory ratio at defaults: {d.index_bytes / m.index_bytes}")
