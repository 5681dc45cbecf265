"""
Desk-scale timing of dense versus block-sparse attention on random masks
of exactly controlled sparsity.

.. autosummary::
    :toctree: generated/

    random_block_mask
    masked_dense_attention
    bench_one
    run_bench
"""
import logging

import numpy as np
import pandas as pd

from dashattn import config as global_config
from dashattn import utils
from dashattn.attend import dense_attention, sparse_attention
from dashattn.exceptions import DomainError
from dashattn.numkit import make_rng, row_softmax
from dashattn.route import BlockMask, n_visible_chunks
from dashattn.summarize import AttnConfig

BENCH_COLUMNS = ["n", "B", "alpha", "gamma", "sigma", "mode",
                 "target_sparsity", "measured_sparsity", "blocks_visited",
                 "time_dense_ms", "time_sparse_ms", "max_abs_err"]


def random_block_mask(config, sparsity, rng):
    """Tile-shared random mask with an exact number of routed chunks.

    All queries of one chunk-sized tile share their mask row. For every kv
    head, round((1 - sparsity) * slots) of the routable (tile, chunk) slots
    are set, chosen by shuffling that fixed multiset of bits.

    Parameters
    ----------
    config: `dashattn.summarize.AttnConfig`
    sparsity: float in [0, 1)
        Target fraction of routable slots left out.
    rng: np.random.Generator

    Returns
    -------
    mask: `dashattn.route.BlockMask`
    """
    if not 0 <= sparsity < 1:
        raise DomainError("Sparsity must lie in [0, 1), got %r" % sparsity)
    B, T_c = config.block_size, config.n_chunks
    n_tiles = -(-config.n // B)
    tile_vis = n_visible_chunks(np.arange(n_tiles) * B, config)
    slots = np.arange(T_c)[None, :] < tile_vis[:, None]
    n_slots = int(slots.sum())
    keep = int(round((1 - sparsity) * n_slots))
    tiles = np.zeros((n_tiles, config.h_kv, T_c), dtype=bool)
    for r in range(config.h_kv):
        bits = np.zeros(n_slots, dtype=bool)
        bits[:keep] = True
        head = np.zeros((n_tiles, T_c), dtype=bool)
        head[slots] = rng.permutation(bits)
        tiles[:, r] = head
    return BlockMask.from_dense(np.repeat(tiles, B, axis=0)[:config.n])


def masked_dense_attention(Q, K, V, mask, config):
    """Token-level oracle of `sparse_attention` with zero bias, one query
    tile at a time."""
    B, g_q, d_h = config.block_size, config.g_q, config.d_h
    dense = mask.to_dense()
    O = np.zeros(Q.shape, dtype=np.float64)
    for r in range(config.h_kv):
        heads = slice(r * g_q, (r + 1) * g_q)
        for i0 in range(0, config.n, B):
            i1 = min(i0 + B, config.n)
            rows = np.repeat(np.arange(i0, i1), g_q)
            start = np.repeat(n_visible_chunks(np.arange(i0, i1), config) * B,
                              g_q)
            cols = np.arange(i1)
            keep = (cols[None, :] >= start[:, None]) & \
                (cols[None, :] <= rows[:, None])
            routed = np.repeat(dense[rows, r], B, axis=1)[:, :i1]
            if routed.shape[1] < i1:
                routed = np.pad(routed, ((0, 0), (0, i1 - routed.shape[1])))
            keep |= routed
            S = np.dot(Q[i0:i1, heads].reshape(-1, d_h).astype(np.float64),
                       K[:i1, r].T.astype(np.float64)) / np.sqrt(d_h)
            P = row_softmax(np.where(keep, S, 0.), keep)
            O[i0:i1, heads] = np.dot(P, V[:i1, r]).reshape(i1 - i0, g_q, d_h)
    return O


def bench_one(config, sparsity, seed, dtype=global_config.bench.dtype,
              warmups=global_config.bench.warmups,
              repeats=global_config.bench.repeats,
              n_jobs=global_config.n_jobs):
    """Times dense and block-sparse attention at one (n, sparsity) point.

    Returns
    -------
    row: dict
        Keyed by `BENCH_COLUMNS`.
    """
    rng = make_rng(seed)
    Q, K, V, _ = utils.random_inputs(config, seed, dtype=np.dtype(dtype))
    mask = random_block_mask(config, sparsity, rng)
    visible = n_visible_chunks(np.arange(config.n), config)
    routable = int(visible.sum()) * config.h_kv
    routed = int(mask.popcount().sum())
    stats = {}

    time_dense, _ = utils.time_call(lambda: dense_attention(Q, K, V),
                                    warmups, repeats)
    time_sparse, O = utils.time_call(
        lambda: sparse_attention(Q, K, V, mask, None, config, n_jobs=n_jobs,
                                 stats=stats), warmups, repeats)
    err = utils.max_abs_diff(O, masked_dense_attention(Q, K, V, mask, config))
    logging.info("n=%d s=%.4f: dense %.2f ms, sparse %.2f ms" %
                 (config.n, sparsity, time_dense, time_sparse))
    return {"n": config.n, "B": config.block_size, "alpha": config.alpha,
            "gamma": config.gamma, "sigma": config.sigma, "mode": "dash",
            "target_sparsity": sparsity,
            "measured_sparsity": 1 - routed / float(routable)
            if routable else 0.,
            "blocks_visited": stats["blocks_visited"],
            "time_dense_ms": time_dense, "time_sparse_ms": time_sparse,
            "max_abs_err": err}


def run_bench(ns, sparsities=global_config.bench.sparsities, d_h=64, h_q=1,
              h_kv=1, block_size=global_config.attention.block_size,
              seed=0, **kwargs):
    """Benchmark grid over lengths and sparsities.

    Masks are random (not routed), so the diagonal branch is the query's
    own chunk only and the sparsity counts every earlier chunk.

    Parameters
    ----------
    ns: list of int
        Sequence lengths.
    sparsities: list of float
        Target sparsities in [0, 1).
    d_h, h_q, h_kv, block_size: int
        Shapes.
    seed: int
        Seed of inputs and masks.
    kwargs: dict
        Passed to `bench_one` (dtype, warmups, repeats, n_jobs) or to the
        `AttnConfig` (alpha, gamma, sigma).

    Returns
    -------
    table: pd.DataFrame
        Columns in `BENCH_COLUMNS` order.
    """
    attn_keys = ("alpha", "gamma", "sigma")
    attn_args = dict((k, kwargs.pop(k)) for k in attn_keys if k in kwargs)
    rows = []
    for n in ns:
        config = AttnConfig(n, d_h, h_q, h_kv, block_size,
                            include_prev_chunk=False, **attn_args)
        for s in sparsities:
            rows.append(bench_one(config, s, seed, **kwargs))
    return pd.DataFrame(rows, columns=BENCH_COLUMNS)
