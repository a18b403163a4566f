"""
Gradients and moment masks
==========================

A tour of the small reverse-mode tape that everything else is built on,
followed by the span-to-mask step that turns a predicted (center, width)
pair into soft clip weights.
"""

# %%
import numpy as np

from amdnet import numkit as nk
from amdnet.model import ModelConfig, MomentSpans, span_to_mask

nk.set_default_dtype("f64")

# %%
# Tensors record the operations applied to them; ``backward`` walks the
# record in reverse and fills ``grad`` on every leaf parameter.
W = nk.Parameter(np.array([[0.5, -1.0], [2.0, 0.25]]), "W")
x = nk.Tensor(np.array([[1.0, 2.0]]))
h = nk.relu(x @ W)
y = nk.sum(h * h)
y.backward()
print("loss", float(y.data))
print("dL/dW\n", W.grad)

# %%
# Every kernel is checked against central differences. The same helper
# drives the full-model check in the test suite.
report = nk.finite_diff_grad_check(lambda: nk.sum(nk.softmax_rows(x @ W) * x), [W], n_coords=4)
print(f"checked {report.n_checked} coordinates, worst relative error {report.max_rel_error:.1e}")

# %%
# A span is a center ``c`` and width ``w`` in (0, 1). The Gaussian window
# has standard deviation ``sigma * w`` and is scaled so its peak is 1.
cfg = ModelConfig(N=32, d=16, D_in=8, H=2)
spans = MomentSpans(nk.Tensor(np.array([0.3, 0.7])), nk.Tensor(np.array([0.4, 0.9])))
M = span_to_mask(spans, cfg).M.data


def bar(row):
    return "".join(" .:-=+*#%@"[min(9, int(v * 10))] for v in row)


for h, row in enumerate(M):
    print(f"moment {h}: |{bar(row)}|  peak {row.max():.2f}")

# %%
# The rectangular and triangular alternatives share the 3-sigma support.
for window in ("rectangular", "triangular"):
    alt = span_to_mask(spans, ModelConfig(N=32, d=16, D_in=8, H=2, window=window)).M.data
    print(f"{window:12s}|{bar(alt[0])}|")
