"""
Stage 2: block-sparse softmax attention over routed chunks and the diagonal
branch, streamed through an online softmax, plus the dense and top-k
baselines and the oracles used to check them.

Tensors follow the (position, head, feature) layout: Q is (n, h_q, d_h),
K and V are (n, h_kv, d_h) and query head h reads kv head h // g_q.

.. autosummary::
    :toctree: generated/

    dense_attention
    topk_route
    sparse_attention
    reference_sparse_attention
    prior_attention_reference
    ent_prior_softmax
    pipeline_forward
    Trace
"""
import hashlib
import logging

import numpy as np
from joblib import Parallel, delayed
from scipy.special import logsumexp

from dashattn import config as global_config
from dashattn.entmax import entmax
from dashattn.exceptions import (DegenerateRowError, DomainError, ShapeError,
                                 TraceError)
from dashattn.numkit import OnlineAccumulator, row_softmax
from dashattn.route import (LOG_FLOOR, BlockMask, chunk_logit_table,
                            diagonal_chunks, n_visible_chunks, route_all)
from dashattn.summarize import summarize_all

STAGE2_FORMS = ("bias", "prior", "uniform")


def _as_heads(X, name):
    X = np.asarray(X)
    if not np.issubdtype(X.dtype, np.floating):
        X = X.astype(np.float64)
    if X.ndim == 2:
        return X[:, None, :], True
    if X.ndim != 3:
        raise ShapeError("%s must be (n, heads, d_h), got %s" %
                         (name, X.shape))
    return X, False


def dense_attention(Q, K, V, causal=True, tile=global_config.attention.tile):
    """Exact (causal) scaled dot-product attention.

    Parameters
    ----------
    Q: np.array(n, h_q, d_h) or np.array(n, d_h)
        Queries.
    K, V: np.array(m, h_kv, d_h) or np.array(m, d_h)
        Keys and values.
    causal: bool
        Whether query i only sees keys 0..i.
    tile: int
        Query rows processed at once.

    Returns
    -------
    O: np.array, same shape as Q
    """
    Q, squeeze = _as_heads(Q, "Q")
    K, _ = _as_heads(K, "K")
    V, _ = _as_heads(V, "V")
    n, h_q, d_h = Q.shape
    m, h_kv, _ = K.shape
    if K.shape != V.shape or K.shape[2] != d_h or h_q % h_kv != 0:
        raise ShapeError("Inconsistent shapes Q %s, K %s, V %s" %
                         (Q.shape, K.shape, V.shape))
    if causal and m < n:
        raise ShapeError("Causal attention needs at least n keys")
    g_q = h_q // h_kv
    O = np.zeros(Q.shape, dtype=Q.dtype)
    scale = 1. / np.sqrt(d_h)
    for r in range(h_kv):
        heads = slice(r * g_q, (r + 1) * g_q)
        for i0 in range(0, n, tile):
            i1 = min(i0 + tile, n)
            stop = i1 if causal else m
            Qt = Q[i0:i1, heads].reshape(-1, d_h) * scale
            S = np.dot(Qt, K[:stop, r].T)
            if causal:
                rows = np.repeat(np.arange(i0, i1), g_q)
                S = np.where(np.arange(stop)[None, :] <= rows[:, None], S,
                             -np.inf)
            P = np.exp(S - S.max(axis=1, keepdims=True))
            P /= P.sum(axis=1, keepdims=True)
            O[i0:i1, heads] = np.dot(P, V[:stop, r]).reshape(i1 - i0, g_q,
                                                             d_h)
    return O[:, 0] if squeeze else O


def topk_route(logits, k):
    """Indices of the k largest logits, ascending; ties go to the lower
    index."""
    if k < 1:
        raise DomainError("k must be >= 1")
    order = np.argsort(-np.asarray(logits, dtype=np.float64), kind="stable")
    return np.sort(order[:k])


def _attend_tile(Q, K, V, words, chunk_bias, diag_bias, r, i0, i1, config,
                 mask):
    """Attention rows i0..i1-1 of kv head r. Returns (O_block, visits)."""
    B, g_q, d_h = config.block_size, config.g_q, config.d_h
    heads = slice(r * g_q, (r + 1) * g_q)
    scale = 1. / np.sqrt(d_h)
    start = int(n_visible_chunks(i0, config)) * B
    n_diag_chunks = len(diagonal_chunks(i0, config))
    T = i1 - i0
    out = np.zeros((T, g_q, d_h), dtype=Q.dtype)
    shared = np.all(words[i0:i1, r] == words[i0, r]) and \
        np.all(chunk_bias[i0:i1, r] == chunk_bias[i0, r]) and \
        np.all(diag_bias[i0:i1, r] == diag_bias[i0, r])
    if shared:
        Qt = Q[i0:i1, heads].reshape(-1, d_h) * scale
        acc = OnlineAccumulator(T * g_q, d_h, dtype=Q.dtype)
        active = list(mask.iterate_active(i0, r))
        for c in active:
            acc.update(np.dot(Qt, K[c * B:(c + 1) * B, r].T) +
                       chunk_bias[i0, r, c], V[c * B:(c + 1) * B, r])
        S = np.dot(Qt, K[start:i1, r].T) + diag_bias[i0, r]
        rows = np.repeat(np.arange(i0, i1), g_q)
        S = np.where(np.arange(start, i1)[None, :] <= rows[:, None], S,
                     -np.inf)
        acc.update(S, V[start:i1, r])
        out[:] = acc.result().reshape(T, g_q, d_h)
        return out, T * (len(active) + n_diag_chunks)

    visits = 0
    for t, i in enumerate(range(i0, i1)):
        Qi = Q[i, heads] * scale
        acc = OnlineAccumulator(g_q, d_h, dtype=Q.dtype)
        for c in mask.iterate_active(i, r):
            acc.update(np.dot(Qi, K[c * B:(c + 1) * B, r].T) +
                       chunk_bias[i, r, c], V[c * B:(c + 1) * B, r])
            visits += 1
        acc.update(np.dot(Qi, K[start:i + 1, r].T) + diag_bias[i, r],
                   V[start:i + 1, r])
        visits += n_diag_chunks
        out[t] = acc.result()
    return out, visits


def sparse_attention(Q, K, V, mask, chunk_bias, config, diag_bias=None,
                     n_jobs=global_config.n_jobs, stats=None):
    """Block-sparse attention walking the bit-packed mask.

    Every active chunk of row (i, r) is visited in ascending order with its
    bias added to the logits, then the diagonal branch is visited with
    causal masking. Chunks whose bit is clear are never read.

    Parameters
    ----------
    Q: np.array(n, h_q, d_h)
    K, V: np.array(n, h_kv, d_h)
    mask: `dashattn.route.BlockMask`
        Routed chunks per (query, kv head).
    chunk_bias: np.array(n, h_kv, T_c) or None
        Logit offset of every routed chunk (None means zero).
    config: `dashattn.summarize.AttnConfig`
    diag_bias: np.array(n, h_kv) or None
        Logit offset of the diagonal branch (None means zero).
    n_jobs: int
        joblib workers over (kv head, query chunk) tiles.
    stats: dict or None
        If given, receives "blocks_visited" and "blocks_routed".

    Returns
    -------
    O: np.array(n, h_q, d_h)
    """
    Q, _ = _as_heads(Q, "Q")
    K, _ = _as_heads(K, "K")
    V, _ = _as_heads(V, "V")
    n, B = config.n, config.block_size
    if Q.shape != (n, config.h_q, config.d_h) or \
            K.shape != (n, config.h_kv, config.d_h) or K.shape != V.shape:
        raise ShapeError("Inputs do not match %r" % config)
    if mask.n_chunks != config.n_chunks or mask.shape != (n, config.h_kv):
        raise ShapeError("Mask of %d chunks x %s rows does not match "
                         "T_c = %d, (n, h_kv) = %s" %
                         (mask.n_chunks, mask.shape, config.n_chunks,
                          (n, config.h_kv)))
    if chunk_bias is None:
        chunk_bias = np.zeros((n, config.h_kv, config.n_chunks))
    if diag_bias is None:
        diag_bias = np.zeros((n, config.h_kv))
    tiles = [(r, i0, min(i0 + B, n)) for r in range(config.h_kv)
             for i0 in range(0, n, B)]
    if n_jobs == 1:
        blocks = [_attend_tile(Q, K, V, mask.words, chunk_bias, diag_bias,
                               r, i0, i1, config, mask)
                  for r, i0, i1 in tiles]
    else:
        blocks = Parallel(n_jobs=n_jobs)(delayed(_attend_tile)(
            Q, K, V, mask.words, chunk_bias, diag_bias, r, i0, i1, config,
            mask) for r, i0, i1 in tiles)
    O = np.zeros(Q.shape, dtype=Q.dtype)
    g_q = config.g_q
    for (r, i0, i1), (out, _) in zip(tiles, blocks):
        O[i0:i1, r * g_q:(r + 1) * g_q] = out
    if stats is not None:
        stats["blocks_visited"] = int(sum(v for _, v in blocks))
        stats["blocks_routed"] = int(mask.popcount().sum())
    return O


def topk_mask(Q, summaries, config, k):
    """Top-k chunk selection shared by each GQA group.

    Every head scores the visible chunks with softmax(gamma z_bar); the
    group keeps the k chunks with the highest mean score.

    Returns
    -------
    mask: `dashattn.route.BlockMask`
    """
    logits, n_vis = chunk_logit_table(Q, summaries, config)
    n, h_q, T_c = logits.shape
    bits = np.zeros((n, config.h_kv, T_c), dtype=bool)
    for i in np.flatnonzero(n_vis > 0):
        m = int(n_vis[i])
        z = logits[i, :, :m]
        scores = np.exp(z - z.max(axis=1, keepdims=True))
        scores /= scores.sum(axis=1, keepdims=True)
        scores = scores.reshape(config.h_kv, config.g_q, m).mean(axis=1)
        for r in range(config.h_kv):
            bits[i, r, topk_route(scores[r], k)] = True
    return BlockMask.from_dense(bits)


def topk_attention(Q, K, V, q_bar, config, k, n_jobs=global_config.n_jobs,
                   stats=None):
    """Top-k baseline: unbiased softmax over the k selected chunks and the
    diagonal branch.

    Returns
    -------
    O: np.array(n, h_q, d_h)
    mask: `dashattn.route.BlockMask`
    """
    summaries = summarize_all(K, q_bar, config)
    mask = topk_mask(Q, summaries, config, k)
    O = sparse_attention(Q, K, V, mask, None, config, n_jobs=n_jobs,
                         stats=stats)
    return O, mask


def masked_attention_row(q, K, V, bias):
    """o = softmax(K q / sqrt(d_h) + bias) V over the finite entries of
    `bias` (-inf excludes a key)."""
    z = np.dot(K, q) / np.sqrt(len(q))
    keep = np.isfinite(bias)
    Z = np.where(keep, z + np.where(keep, bias, 0), 0)
    return np.dot(row_softmax(Z[None], keep[None])[0], V)


def reference_sparse_attention(Q, K, V, table):
    """Token-level oracle of the bias form: a dense masked softmax per
    (query, head) built from the routing of `table`."""
    config = table.config
    O = np.zeros(Q.shape)
    for i in range(config.n):
        for r in range(config.h_kv):
            bias = table.result(i, r).token_bias()
            for h in range(r * config.g_q, (r + 1) * config.g_q):
                O[i, h] = masked_attention_row(Q[i, h], K[:i + 1, r],
                                               V[:i + 1, r], bias)
    return O


def prior_attention_reference(z_row, g_row, V):
    """Direct evaluation of sum_j g_j exp(z_j) v_j / sum_t g_t exp(z_t).

    Parameters
    ----------
    z_row: np.array(m)
        Logits.
    g_row: np.array(m)
        Prior, nonnegative.
    V: np.array(m, d_h)
        Values.

    Returns
    -------
    o: np.array(d_h)
    """
    g_row = np.asarray(g_row, dtype=np.float64)
    z_row = np.asarray(z_row, dtype=np.float64)
    if g_row.shape != z_row.shape or len(V) != len(z_row):
        raise ShapeError("Logits, prior and values disagree in length")
    if np.any(g_row < 0):
        raise DomainError("The prior must be nonnegative")
    keep = g_row > 0
    if not np.any(keep):
        raise DegenerateRowError("The prior is identically zero")
    Z = np.where(keep, z_row + np.log(np.where(keep, g_row, 1)), 0)
    return np.dot(row_softmax(Z[None], keep[None])[0], V)


def ent_prior_softmax(z, alpha, sigma):
    """Softmax of `z` reweighted by the entmax prior of `z` itself.

    On the support of w = entmax(z, alpha) the result is
    softmax(z + (log w - mean log w) / sigma); it is 0 elsewhere.
    """
    z = np.asarray(z, dtype=np.float64)
    w = entmax(z, alpha).p
    keep = w > 0
    logw = np.log(np.where(keep, w, 1))
    d = (logw - logw[keep].mean()) / sigma
    return row_softmax(np.where(keep, z + d, 0)[None], keep[None])[0]


def stage2_offsets(table, form):
    """Logit offsets of routed chunks and of the diagonal branch.

    Parameters
    ----------
    table: `dashattn.route.RouteTable`
    form: str
        "bias" (zero-centered routing bias), "prior" (log of the prior g) or
        "uniform" (the sigma -> inf limit, no offsets).

    Returns
    -------
    chunk_offsets: np.array(n, h_kv, T_c)
    diag_offsets: np.array(n, h_kv)
    """
    if form not in STAGE2_FORMS:
        raise ValueError("Unknown Stage-2 form %r" % form)
    config = table.config
    shape = table.weights.shape
    if form == "bias":
        return table.chunk_bias, np.zeros(shape[:2])
    if form == "uniform":
        return np.zeros(shape), np.zeros(shape[:2])
    support = table.weights > 0
    lam = table.lam
    n_diag = table.n_diag[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(support, np.log(np.maximum(table.weights,
                                                     LOG_FLOOR)) /
                          config.sigma, -np.inf)
        lse = logsumexp(scaled, axis=-1) if shape[-1] else \
            np.zeros(shape[:2])
        log_w_prime = scaled - lse[..., None] - np.log(config.block_size)
        chunk = np.where(support, np.log(np.where(lam > 0, lam, 1))[..., None]
                         + log_w_prime, 0.)
        diag = np.log((1 - lam) / n_diag)
    return chunk, diag


def _digest(*arrays):
    h = hashlib.blake2b(digest_size=16)
    for X in arrays:
        X = np.ascontiguousarray(X)
        h.update(str(X.shape).encode())
        h.update(X.tobytes())
    return h.hexdigest()


class Trace(object):
    """Intermediates of `pipeline_forward` kept for the backward pass and
    the diagnostics.

    Attributes
    ----------
    Q, K, V, q_bar: np.array
        Inputs.
    config: `dashattn.summarize.AttnConfig`
    form: str
        Stage-2 form.
    summaries: `dashattn.summarize.ChunkSummaries`
    routes: `dashattn.route.RouteTable`
    chunk_offsets, diag_offsets: np.array
        Stage-2 logit offsets.
    O: np.array(n, h_q, d_h)
        Output.
    stats: dict
        Work counters of Stage 2.
    """
    def __init__(self, Q, K, V, q_bar, config, form, summaries, routes,
                 chunk_offsets, diag_offsets, O, stats):
        self.Q, self.K, self.V, self.q_bar = Q, K, V, q_bar
        self.config = config
        self.form = form
        self.summaries = summaries
        self.routes = routes
        self.chunk_offsets = chunk_offsets
        self.diag_offsets = diag_offsets
        self.O = O
        self.stats = stats
        self.digest = _digest(Q, K, V, q_bar)

    def check_fresh(self):
        """Raises `TraceError` if the inputs changed after the forward."""
        if self.routes is None or self.summaries is None:
            raise TraceError("The trace holds no routing")
        if _digest(self.Q, self.K, self.V, self.q_bar) != self.digest:
            raise TraceError("The inputs changed after the forward pass")


def pipeline_forward(Q, K, V, q_bar, config, form="bias",
                     n_jobs=global_config.n_jobs):
    """Summarize, route and attend every query.

    Parameters
    ----------
    Q: np.array(n, h_q, d_h)
    K, V: np.array(n, h_kv, d_h)
    q_bar: np.array(h_kv, d_h)
        Summary queries.
    config: `dashattn.summarize.AttnConfig`
    form: str
        "bias" (default), "prior" or "uniform"; see `stage2_offsets`.
    n_jobs: int
        joblib workers for Stage 2.

    Returns
    -------
    O: np.array(n, h_q, d_h)
    trace: `Trace`
    """
    Q = np.array(Q, dtype=np.float64)
    K = np.array(K, dtype=np.float64)
    V = np.array(V, dtype=np.float64)
    q_bar = np.array(q_bar, dtype=np.float64)
    if V.shape != K.shape:
        raise ShapeError("K %s and V %s differ" % (K.shape, V.shape))
    summaries = summarize_all(K, q_bar, config)
    routes = route_all(Q, summaries, config)
    chunk_offsets, diag_offsets = stage2_offsets(routes, form)
    stats = {}
    O = sparse_attention(Q, K, V, routes.mask, chunk_offsets, config,
                         diag_bias=diag_offsets, n_jobs=n_jobs, stats=stats)
    logging.debug("Attended %d queries (%s form): %d blocks visited" %
                 (config.n, form, stats["blocks_visited"]))
    return O, Trace(Q, K, V, q_bar, config, form, summaries, routes,
                    chunk_offsets, diag_offsets, O, stats)
