import numpy as np

from amdnet.numkit import Parameter


def perturbed(params, seed, scale):
    """Copy of ``params`` with Gaussian noise added, so zero-initialized branches carry gradient."""
    rng = np.random.default_rng(seed)
    return {k: Parameter(p.data + scale * rng.normal(size=p.data.shape), k) for k, p in params.items()}
