import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amdnet import numkit as nk
from amdnet.model import ModelConfig, encode_queries, forward_videos, init_params, score_matrix
from amdnet.numkit import Tensor
from amdnet.objectives import BatchScores, LossWeights, diversity_loss, relevance_loss, retrieval_loss, total_loss

from .helpers import perturbed

TWO_LN2 = 1.3862943611198906  # pure-python oracle


def ret(S, pos, tau=0.07):
    return float(retrieval_loss(BatchScores(Tensor(np.asarray(S, dtype=float)), pos), tau).data)


def loop_oracle(S, pos, tau):
    """Direct double loop over the video-to-multiquery and query-to-video terms."""
    S = np.asarray(S, dtype=float)
    E = [[math.exp(s / tau) for s in row] for row in S]
    n_q, n_v = S.shape
    total, active = 0.0, 0
    for v in range(n_v):
        P = [t for t in range(n_q) if pos[t] == v]
        if not P:
            continue
        active += 1
        neg_t = sum(E[t][v] for t in range(n_q) if pos[t] != v)
        v2q = sum(math.log(E[t][v] / (E[t][v] + neg_t)) for t in P) / len(P)
        q2v = sum(math.log(E[t][v] / sum(E[t])) for t in P) / len(P)
        total += v2q + q2v
    return -total / active


class TestRetrieval:
    def test_single_pair_is_zero(self):
        assert ret([[0.3]], [0]) == 0.0

    def test_two_equal_pairs(self):
        assert abs(ret(np.full((2, 2), 0.4), [0, 1], tau=1.0) - TWO_LN2) < 1e-12

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 7))
    def test_matches_loop_oracle(self, seed, n_v, n_q):
        rng = np.random.default_rng(seed)
        S = rng.uniform(-1, 1, size=(n_q, n_v))
        pos = rng.integers(n_v, size=n_q)
        assert abs(ret(S, pos) - loop_oracle(S, pos, 0.07)) < 1e-9

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_in_positive_and_negative_scores(self, seed):
        rng = np.random.default_rng(seed)
        S = rng.uniform(-1, 1, size=(5, 3))
        pos = np.array([0, 0, 1, 2, 2])
        base = ret(S, pos)
        t = rng.integers(5)
        up = S.copy()
        up[t, pos[t]] += 0.05
        assert ret(up, pos) < base
        v = (pos[t] + 1) % 3
        down = S.copy()
        down[t, v] += 0.05
        assert ret(down, pos) > base
        assert math.isfinite(base)

    def test_rejects_empty_and_bad_positives(self):
        with pytest.raises(ValueError):
            BatchScores(Tensor(np.zeros((0, 2))), np.zeros(0, dtype=int))
        with pytest.raises(ValueError):
            BatchScores(Tensor(np.zeros((2, 2))), [0, 2])

    def test_positive_sets(self):
        assert [p.tolist() for p in BatchScores(Tensor(np.zeros((3, 2))), [1, 0, 1]).positive_sets] == [[1], [0, 2]]


class TestDiversity:
    def test_zero_mask(self):
        assert abs(float(diversity_loss(Tensor(np.zeros((4, 10))), 0.15).data) - 0.09) < 1e-15

    def test_orthogonal_rows_at_alpha(self):
        a = math.sqrt(0.15)
        M = np.zeros((3, 6))
        M[0, 0] = M[1, 2] = M[2, 5] = a
        assert abs(float(diversity_loss(Tensor(M), 0.15).data)) < 1e-15

    def test_batch_average(self):
        M = np.random.default_rng(0).uniform(size=(3, 2, 5))
        each = [float(diversity_loss(Tensor(m)).data) for m in M]
        assert abs(float(diversity_loss(Tensor(M)).data) - np.mean(each)) < 1e-12

    def test_row_normalized_variant(self):
        M = np.random.default_rng(1).uniform(0.1, 1, size=(2, 4))
        Mn = M / M.sum(axis=1, keepdims=True)
        G = Mn @ Mn.T - 0.15 * np.eye(2)
        assert abs(float(diversity_loss(Tensor(M), 0.15, row_normalize=True).data) - (G**2).sum()) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 1))
    def test_nonnegative(self, seed, alpha):
        M = np.random.default_rng(seed).uniform(size=(4, 8))
        assert float(diversity_loss(Tensor(M), alpha).data) >= 0


def at_cos(c):
    """A vector whose cosine with [1, 0] is c."""
    return np.array([c, math.sqrt(1 - c * c)])


class TestRelevance:
    q = np.array([1.0, 0.0])

    def test_satisfied_margin(self):
        out = relevance_loss(Tensor(self.q), Tensor(np.stack([at_cos(0.5), at_cos(0.1)])), Tensor(at_cos(0.3)), 0.1)
        assert float(out.data) == 0.0

    def test_hand_hinge(self):
        out = relevance_loss(Tensor(self.q), Tensor(np.stack([at_cos(0.35), at_cos(-0.2)])), Tensor(at_cos(0.3)), 0.1)
        assert abs(float(out.data) - 0.05) < 1e-12

    def test_inner_mode(self):
        out = relevance_loss(Tensor(self.q), Tensor(np.array([[0.35, 7.0]])), Tensor(np.array([0.3, -2.0])), 0.1, "inner")
        assert abs(float(out.data) - 0.05) < 1e-12

    def test_query_average(self):
        rng = np.random.default_rng(0)
        q, Vm, vbar = rng.normal(size=(5, 4)), rng.normal(size=(5, 3, 4)), rng.normal(size=(5, 4))
        each = [float(relevance_loss(Tensor(q[i]), Tensor(Vm[i]), Tensor(vbar[i])).data) for i in range(5)]
        assert abs(float(relevance_loss(Tensor(q), Tensor(Vm), Tensor(vbar)).data) - np.mean(each)) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 0.5))
    def test_range(self, seed, beta):
        rng = np.random.default_rng(seed)
        out = float(relevance_loss(Tensor(rng.normal(size=4)), Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=4)), beta).data)
        assert 0.0 <= out <= beta + 2.0 + 1e-12


class TestTotal:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda_ret, w.lambda_div, w.lambda_rel, w.alpha, w.beta) == (0.02, 1.0, 1.0, 0.15, 0.1)

    def test_hand_combination(self):
        assert abs(total_loss((2.0, 3.0, 5.0), LossWeights()) - 8.04) < 1e-12

    def test_degenerate_weights(self):
        w = LossWeights(lambda_div=0.0, lambda_rel=0.0)
        assert total_loss({"ret": 2.5, "div": 9.0, "rel": 9.0}, w) == 0.02 * 2.5

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(beta=-0.1)


def test_all_losses_gradient_through_full_graph():
    cfg = ModelConfig(N=6, d=8, D_in=5, H=2)
    params = perturbed(init_params(cfg, 2), 3, 0.3)
    rng = np.random.default_rng(5)
    X = Tensor(rng.normal(size=(3, cfg.N, cfg.D_in)))
    Q = Tensor(rng.normal(size=(5, cfg.D_in)))
    pos = np.array([0, 0, 1, 2, 2])
    w = LossWeights(lambda_ret=1.0)

    def f():
        out = forward_videos(X, params, cfg)
        q = encode_queries(Q, params, cfg)
        S = score_matrix(q, out.Vg)
        parts = (
            retrieval_loss(BatchScores(S, pos)),
            diversity_loss(out.mask.M, row_normalize=True),
            relevance_loss(q, out.Vm[pos], out.vbar[pos], beta=1.0),
        )
        assert float(parts[2].data) > 0  # hinge active so its gradient is exercised
        return total_loss(parts, w)

    rep = nk.finite_diff_grad_check(f, list(params.values()), n_coords=300, seed=4)
    assert rep.n_checked >= 200 and rep.max_rel_error <= 1e-4, rep.worst
