#!/usr/bin/env python
#
# Run me as follows:
# cd tests/
# pytest

import numpy as np
import numpy.testing as npt
from numpy.testing import assert_raises
from scipy.special import softmax

# dashattn imports
import dashattn
from dashattn import attend, route
from dashattn.entmax import entmax
from dashattn.exceptions import (DegenerateRowError, DomainError, ShapeError,
                                 TraceError)
from dashattn.numkit import make_rng, row_softmax
from dashattn.route import BlockMask, diagonal_chunks, n_visible_chunks
from dashattn.summarize import AttnConfig


def _straight_line(Q, K, V, q_bar, c):
    """Row by row evaluation of summaries, entmax routing, the prior and
    the prior-weighted softmax, written without the library pipeline."""
    B, d = c.block_size, c.d_h
    T_c = c.n // B
    k_bar = np.zeros((T_c, c.h_kv, d))
    for ch in range(T_c):
        for r in range(c.h_kv):
            Kc = K[ch * B:(ch + 1) * B, r]
            k_bar[ch, r] = softmax(Kc.dot(q_bar[r]) / np.sqrt(d)).dot(Kc)
    O = np.zeros(Q.shape)
    for i in range(c.n):
        n_vis = max(i // B - 1, 0)
        for r in range(c.h_kv):
            heads = range(r * c.g_q, (r + 1) * c.g_q)
            g = np.zeros(i + 1)
            if n_vis == 0:
                g[:] = 1. / (i + 1)
            else:
                w = np.mean([entmax(c.gamma * k_bar[:n_vis, r].dot(Q[i, h]) /
                                    np.sqrt(d), c.alpha).p for h in heads],
                            axis=0)
                routed = np.flatnonzero(w > 0)
                n_R, n_D = B * len(routed), i + 1 - n_vis * B
                ws = w[routed] ** (1. / c.sigma)
                w_prime = ws / ws.sum() / B
                kl = np.mean(np.log((1. / n_R) / np.repeat(w_prime, B)))
                lam = 1. / (1 + np.exp(-(kl + np.log(n_R / float(n_D)))))
                for ch, wp in zip(routed, w_prime):
                    g[ch * B:(ch + 1) * B] = lam * wp
                g[n_vis * B:] = (1 - lam) / n_D
            for h in heads:
                z = K[:i + 1, r].dot(Q[i, h]) / np.sqrt(d)
                p = g * np.exp(z - z.max())
                O[i, h] = (p / p.sum()).dot(V[:i + 1, r])
    return O


def _naive_attention(Q, K, V):
    n, h_q, d = Q.shape
    g_q = h_q // K.shape[1]
    O = np.zeros(Q.shape)
    for i in range(n):
        for h in range(h_q):
            s = np.array([Q[i, h].dot(K[j, h // g_q]) for j in range(i + 1)])
            e = np.exp(s / np.sqrt(d))
            O[i, h] = (e / e.sum()).dot(V[:i + 1, h // g_q])
    return O


def test_dense_attention():
    c = AttnConfig(n=32, d_h=8, h_q=2, h_kv=1, block_size=8)
    Q, K, V, _ = dashattn.utils.random_inputs(c, 0)
    npt.assert_allclose(attend.dense_attention(Q, K, V),
                        _naive_attention(Q, K, V), atol=1e-12)
    npt.assert_allclose(attend.dense_attention(Q, K, V, tile=5),
                        attend.dense_attention(Q, K, V), atol=1e-14)


def test_dense_attention_2d():
    rng = make_rng(1)
    Q, K, V = [rng.standard_normal((6, 4)) for _ in range(3)]
    O = attend.dense_attention(Q, K, V, causal=False)
    assert O.shape == (6, 4)
    npt.assert_allclose(O, softmax(Q.dot(K.T) / 2., axis=1).dot(V))
    npt.assert_allclose(attend.dense_attention(Q, K, V)[0], V[0])
    assert_raises(ShapeError, attend.dense_attention, Q, K[:3], V[:3])


def test_topk_route():
    npt.assert_array_equal(attend.topk_route([0.1, 0.9, 0.5, 0.9], 2), [1, 3])
    npt.assert_array_equal(attend.topk_route([1., 1., 1.], 2), [0, 1])
    npt.assert_array_equal(attend.topk_route([3., 1.], 5), [0, 1])
    assert_raises(DomainError, attend.topk_route, [1.], 0)


def test_dense_reduction():
    """Every visible chunk routed with zero bias is dense attention."""
    c = AttnConfig(n=256, d_h=32, h_q=4, h_kv=2, block_size=16)
    n_vis = n_visible_chunks(np.arange(c.n), c)
    bits = np.arange(c.n_chunks)[None, :] < n_vis[:, None]
    mask = BlockMask.from_dense(np.repeat(bits[:, None], c.h_kv, axis=1))
    n_diag = [len(diagonal_chunks(i, c)) for i in range(c.n)]
    for seed in range(10):
        Q, K, V, _ = dashattn.utils.random_inputs(c, seed)
        stats = {}
        O = attend.sparse_attention(Q, K, V, mask, None, c, stats=stats)
        npt.assert_allclose(O, attend.dense_attention(Q, K, V), atol=1e-10)
        assert stats["blocks_visited"] == c.h_kv * (n_vis.sum() + sum(n_diag))
        assert stats["blocks_routed"] == c.h_kv * n_vis.sum()


def _mask_avoiding(c, skipped, rng, tile_shared):
    """Random routed bits over the visible chunks, never setting the
    chunks in `skipped`."""
    n_vis = n_visible_chunks(np.arange(c.n), c)
    bits = rng.random((c.n, c.h_kv, c.n_chunks)) < 0.5
    if tile_shared:
        bits = np.repeat(bits[::c.block_size], c.block_size, axis=0)[:c.n]
    bits &= np.arange(c.n_chunks)[None, None, :] < n_vis[:, None, None]
    bits[..., skipped] = False
    return BlockMask.from_dense(bits)


def test_unrouted_blocks_are_never_read():
    c = AttnConfig(n=128, d_h=8, h_q=4, h_kv=2, block_size=16)
    Q, K, V, _ = dashattn.utils.random_inputs(c, 12)
    skipped = [1, 4]
    K_bad, V_bad = K.copy(), V.copy()
    for ch in skipped:
        K_bad[ch * 16:(ch + 1) * 16] = np.nan
        V_bad[ch * 16:(ch + 1) * 16] = np.nan
    # rows whose diagonal branch stays clear of the poisoned chunks
    clean = np.array([i for i in range(c.n)
                      if not set(diagonal_chunks(i, c)) & set(skipped)])
    assert n_visible_chunks(clean, c).max() > max(skipped)
    rng = make_rng(13)
    for tile_shared in (True, False):
        mask = _mask_avoiding(c, skipped, rng, tile_shared)
        chunk_bias = np.repeat(rng.standard_normal((c.n // 16, c.h_kv,
                                                    c.n_chunks)), 16, axis=0)
        O = attend.sparse_attention(Q, K, V, mask, chunk_bias, c)
        O_bad = attend.sparse_attention(Q, K_bad, V_bad, mask, chunk_bias, c)
        assert not np.any(np.isnan(O_bad[clean]))
        npt.assert_array_equal(O_bad[clean], O[clean])


def test_pipeline_is_causal():
    c = AttnConfig(n=128, d_h=16, h_q=4, h_kv=2, block_size=16, gamma=2.,
                   sigma=1.)
    Q, K, V, q_bar = dashattn.utils.random_inputs(c, 7)
    t = 70
    Q2, K2, V2 = Q.copy(), K.copy(), V.copy()
    K2[t + 1:] += 5.
    V2[t + 1:] -= 3.
    Q2[t + 1:] *= 2.
    for form in ("bias", "prior"):
        O, _ = attend.pipeline_forward(Q, K, V, q_bar, c, form=form)
        O2, _ = attend.pipeline_forward(Q2, K2, V2, q_bar, c, form=form)
        npt.assert_allclose(O2[:t + 1], O[:t + 1], rtol=0, atol=1e-12)
        assert np.abs(O2[t + 1:] - O[t + 1:]).max() > 1e-3



def test_sparse_attention_shapes():
    c = AttnConfig(n=32, d_h=4, block_size=8)
    Q, K, V, _ = dashattn.utils.random_inputs(c, 0)
    assert_raises(ShapeError, attend.sparse_attention, Q, K, V,
                  BlockMask.empty(32, 1, 3), None, c)
    assert_raises(ShapeError, attend.sparse_attention, Q[:16], K, V,
                  BlockMask.empty(32, 1, 4), None, c)


def test_pipeline_matches_straight_line():
    c = AttnConfig(n=128, d_h=16, h_q=4, h_kv=2, block_size=16, alpha=1.5,
                   gamma=1., sigma=1e8)
    Q, K, V, q_bar = dashattn.utils.random_inputs(c, 7)
    expected = _straight_line(Q, K, V, q_bar, c)
    for form in ("prior", "bias"):
        O, trace = attend.pipeline_forward(Q, K, V, q_bar, c, form=form)
        npt.assert_allclose(O, expected, atol=1e-9)


def test_pipeline_matches_straight_line_strong_prior():
    c = AttnConfig(n=96, d_h=8, h_q=2, h_kv=1, block_size=8, alpha=1.5,
                   gamma=2., sigma=1.)
    Q, K, V, q_bar = dashattn.utils.random_inputs(c, 8)
    O, trace = attend.pipeline_forward(Q, K, V, q_bar, c, form="prior")
    npt.assert_allclose(O, _straight_line(Q, K, V, q_bar, c), atol=1e-9)


def test_bias_prior_forms_agree():
    for sigma in (1., 10., 1e6):
        for seed in range(4):
            c = AttnConfig(n=96, d_h=8, h_q=4, h_kv=2, block_size=8,
                           gamma=2., sigma=sigma)
            Q, K, V, q_bar = dashattn.utils.random_inputs(c, seed)
            O_bias, _ = attend.pipeline_forward(Q, K, V, q_bar, c,
                                                form="bias")
            O_prior, _ = attend.pipeline_forward(Q, K, V, q_bar, c,
                                                 form="prior")
            npt.assert_allclose(O_bias, O_prior, atol=1e-9)


def test_bias_prior_rows_agree():
    """Prior-weighted softmax and the biased softmax give the same row
    output over random weights, chunk sizes and branch sizes."""
    rng = make_rng(14)
    for t in range(1000):
        sigma = (1., 10., 1e6)[t % 3]
        B = int(rng.integers(1, 9))
        n_diag = int(rng.integers(1, 2 * B + 1))
        w = entmax(rng.standard_normal(int(rng.integers(1, 9))) * 3,
                   1.5).p
        g = route.prior_g(w, sigma, B, n_diag)
        d = route.routing_bias(w, sigma, B, n_diag)
        keep = np.isfinite(d)
        npt.assert_array_equal(g > 0, keep)
        z = rng.standard_normal(len(g)) * 2
        V = rng.standard_normal((len(g), 4))
        via_prior = attend.prior_attention_reference(z, g, V)
        Z = np.where(keep, z + np.where(keep, d, 0), 0)
        via_bias = row_softmax(Z[None], keep[None])[0].dot(V)
        scale = max(1., np.abs(via_bias).max())
        assert np.abs(via_prior - via_bias).max() < 1e-9 * scale



def test_bias_form_matches_reference():
    c = AttnConfig(n=64, d_h=8, h_q=2, h_kv=2, block_size=8, gamma=3.,
                   sigma=0.5)
    Q, K, V, q_bar = dashattn.utils.random_inputs(c, 3)
    O, trace = attend.pipeline_forward(Q, K, V, q_bar, c)
    npt.assert_allclose(O, attend.reference_sparse_attention(Q, K, V,
                                                             trace.routes),
                        atol=1e-10)


def test_uniform_form_is_flat_prior_limit():
    c = AttnConfig(n=64, d_h=8, h_q=2, h_kv=1, block_size=8, gamma=2.,
                   sigma=1e12)
    Q, K, V, q_bar = dashattn.utils.random_inputs(c, 4)
    O_uniform, _ = attend.pipeline_forward(Q, K, V, q_bar, c, form="uniform")
    O_bias, _ = attend.pipeline_forward(Q, K, V, q_bar, c, form="bias")
    npt.assert_allclose(O_uniform, O_bias, atol=1e-9)


def test_tiny_gamma_routes_everything():
    c = AttnConfig(n=128, d_h=8, h_q=2, h_kv=1, block_size=16, gamma=1e-9)
    Q, K, V, q_bar = dashattn.utils.random_inputs(c, 5)
    O, trace = attend.pipeline_forward(Q, K, V, q_bar, c)
    routes = trace.routes
    npt.assert_array_equal(routes.mask.popcount()[:, 0], routes.n_visible)
    npt.assert_allclose(O, attend.dense_attention(Q, K, V), atol=1e-9)


def test_short_sequence_is_dense():
    """Without any full chunk only the diagonal branch is attended."""
    c = AttnConfig(n=5, d_h=4, h_q=2, h_kv=1, block_size=8)
    Q, K, V, q_bar = dashattn.utils.random_inputs(c, 6)
    O, trace = attend.pipeline_forward(Q, K, V, q_bar, c)
    assert trace.routes.n_chunks == 0
    npt.assert_allclose(O, attend.dense_attention(Q, K, V), atol=1e-12)


def test_pipeline_parallel():
    c = AttnConfig(n=64, d_h=4, h_q=2, h_kv=2, block_size=8)
    Q, K, V, q_bar = dashattn.utils.random_inputs(c, 9)
    O1, _ = attend.pipeline_forward(Q, K, V, q_bar, c, n_jobs=1)
    O2, _ = attend.pipeline_forward(Q, K, V, q_bar, c, n_jobs=2)
    npt.assert_allclose(O1, O2, atol=1e-14)


def test_topk_attention_full_budget():
    c = AttnConfig(n=64, d_h=4, h_q=2, h_kv=1, block_size=8)
    Q, K, V, q_bar = dashattn.utils.random_inputs(c, 10)
    O, mask = attend.topk_attention(Q, K, V, q_bar, c, k=c.n_chunks)
    npt.assert_allclose(O, attend.dense_attention(Q, K, V), atol=1e-12)
    O, mask = attend.topk_attention(Q, K, V, q_bar, c, k=2)
    n_vis = n_visible_chunks(np.arange(c.n), c)
    npt.assert_array_equal(mask.popcount()[:, 0], np.minimum(n_vis, 2))


def test_prior_attention_reference():
    rng = make_rng(11)
    z = rng.standard_normal(5)
    V = rng.standard_normal((5, 3))
    g = np.array([0.2, 0., 0.3, 0.1, 0.4])
    p = g * np.exp(z)
    npt.assert_allclose(attend.prior_attention_reference(z, g, V),
                        (p / p.sum()).dot(V))
    assert_raises(DomainError, attend.prior_attention_reference, z, -g, V)
    assert_raises(DegenerateRowError, attend.prior_attention_reference, z,
                  np.zeros(5), V)
    assert_raises(ShapeError, attend.prior_attention_reference, z, g[:4], V)


def test_ent_prior_softmax():
    z = np.array([2., 1.5, -3.])
    p = attend.ent_prior_softmax(z, 2., 1e12)
    assert p[2] == 0
    npt.assert_allclose(p[:2], softmax(z[:2]), atol=1e-9)
    npt.assert_allclose(p.sum(), 1)


def test_stage2_offsets_unknown_form():
    c = AttnConfig(n=32, d_h=4, block_size=8)
    Q, K, V, q_bar = dashattn.utils.random_inputs(c, 0)
    _, trace = attend.pipeline_forward(Q, K, V, q_bar, c)
    assert_raises(ValueError, attend.stage2_offsets, trace.routes, "sliding")


def test_trace_freshness():
    c = AttnConfig(n=32, d_h=4, block_size=8)
    Q, K, V, q_bar = dashattn.utils.random_inputs(c, 0)
    _, trace = attend.pipeline_forward(Q, K, V, q_bar, c)
    trace.check_fresh()
    # the trace keeps its own copy of the inputs
    Q[0, 0, 0] += 1.
    trace.check_fresh()
    trace.K[3, 0, 1] += 1.
    assert_raises(TraceError, trace.check_fresh)
