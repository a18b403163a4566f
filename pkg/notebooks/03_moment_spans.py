"""
What the span predictor finds
=============================

After training, each video gets H predicted spans. Here they are drawn
next to the planted moments of a few held-out videos, along with the
localization summary used by the acceptance suite.
"""

# %%
import numpy as np

from amdnet import numkit as nk
from amdnet.evalkit import localization_quality, span_intervals
from amdnet.model import ModelConfig, embed_videos
from amdnet.synthdata import SyntheticCorpusSpec, corpus_from_generated, generate_corpus, test_split_spec
from amdnet.trainer import TrainConfig, train

nk.set_default_dtype("f64")

spec = SyntheticCorpusSpec(num_videos=60, N=16, D_in=32, seed=1)
corpus = corpus_from_generated(generate_corpus(spec), spec.N)
held_out = corpus_from_generated(generate_corpus(test_split_spec(spec)), spec.N)
mcfg = ModelConfig(N=16, d=32, D_in=32, H=4)
params, _ = train(corpus, TrainConfig(batch_size=60, lr=1e-3, max_epochs=200, patience=20, model=mcfg))

# %%
# A span (c, w) is read as the interval c +/- 3 * sigma * w, matching the
# support of the rectangular and triangular windows.
_, (c, w) = embed_videos(held_out.clips, params, mcfg, with_spans=True)
intervals = span_intervals(c, w, mcfg.sigma)

WIDTH = 48


def draw(lo, hi, mark):
    row = [" "] * WIDTH
    for i in range(int(lo * WIDTH), max(int(lo * WIDTH) + 1, int(np.ceil(hi * WIDTH)))):
        row[min(i, WIDTH - 1)] = mark
    return "|" + "".join(row) + "|"


for vid, iv in list(zip(held_out.video_ids, intervals))[:3]:
    print(vid)
    for m in held_out.moments[vid]:
        print("  planted  ", draw(*m.span, "="))
    for lo, hi in iv:
        print("  predicted", draw(lo, hi, "-"))

# %%
# The predictions change little from video to video. At this scale the
# predictor mostly learns a spread of proposals that tiles the timeline,
# which is what the diversity term rewards, rather than tracking each
# video's boundaries.
planted = [[m.span for m in held_out.moments[v]] for v in held_out.video_ids]
quality = localization_quality(intervals, planted)
print(f"mean best IoU {quality['mean_best_iou']:.3f}, mean pairwise IoU {quality['mean_pairwise_iou']:.3f}")
