"""
Stage 1: score every visible chunk summary, route with entmax, merge the
query heads of a GQA group, pack the routed chunks into bit masks and build
the Stage-2 prior (or its equivalent additive bias).

Token layout for query i: positions 0..i split into the visible chunks
[0, n_visible * B), which may be routed, and the diagonal branch
[n_visible * B, i], which is always attended. The diagonal branch is the
query's own chunk plus, optionally, the chunk right before it.

.. autosummary::
    :toctree: generated/

    BlockMask
    RouteResult
    RouteTable
    chunk_logits
    route_entmax
    gqa_merge
    pack_mask
    unpack_mask
    prior_weights
    prior_lambda
    prior_g
    routing_bias
    route_query
    route_all
"""
import collections
import logging

import numpy as np
from scipy.special import expit, logsumexp

from dashattn.entmax import EntmaxResult, entmax, entmax_rows
from dashattn.exceptions import DiagonalOnly, RangeError, ShapeError

LOG_FLOOR = 1e-300

M1 = np.uint32(0x55555555)
M2 = np.uint32(0x33333333)
M4 = np.uint32(0x0F0F0F0F)
H01 = np.uint32(0x01010101)


def popcount32(words):
    """Number of set bits of every 32-bit word (SWAR reduction)."""
    x = np.asarray(words, dtype=np.uint32)
    x = x - ((x >> np.uint32(1)) & M1)
    x = (x & M2) + ((x >> np.uint32(2)) & M2)
    x = (x + (x >> np.uint32(4))) & M4
    return ((x * H01) >> np.uint32(24)).astype(np.int64)


def n_words(n_chunks):
    """32-bit words needed for `n_chunks` bits."""
    return -(-n_chunks // 32)


class BlockMask(object):
    """Bit-packed active-chunk mask, one row of words per (query, kv head).

    Bit c of word c // 32 is set iff chunk c is routed.
    """
    def __init__(self, words, n_chunks):
        self.words = np.ascontiguousarray(words, dtype=np.uint32)
        self.n_chunks = int(n_chunks)
        if self.words.ndim != 3 or \
                self.words.shape[2] != n_words(self.n_chunks):
            raise ShapeError("Mask words %s do not fit %d chunks" %
                             (self.words.shape, self.n_chunks))

    @classmethod
    def empty(cls, n, h_kv, n_chunks):
        return cls(np.zeros((n, h_kv, n_words(n_chunks)), dtype=np.uint32),
                   n_chunks)

    @classmethod
    def from_dense(cls, bits):
        """Packs a boolean (n, h_kv, T_c) array."""
        bits = np.asarray(bits, dtype=bool)
        n, h, n_chunks = bits.shape
        padded = np.zeros((n, h, 32 * n_words(n_chunks)), dtype=np.uint64)
        padded[..., :n_chunks] = bits
        padded = padded.reshape(n, h, -1, 32)
        shifts = np.arange(32, dtype=np.uint64)
        words = (padded << shifts).sum(axis=-1).astype(np.uint32)
        return cls(words, n_chunks)

    @property
    def shape(self):
        return self.words.shape[:2]

    def to_dense(self):
        """Unpacks into a boolean (n, h_kv, T_c) array."""
        shifts = np.arange(32, dtype=np.uint32)
        bits = (self.words[..., None] >> shifts) & np.uint32(1)
        return bits.reshape(self.words.shape[:2] + (-1,))[
            ..., :self.n_chunks].astype(bool)

    def row(self, i, r):
        return self.words[i, r]

    def set_row(self, i, r, support):
        self.words[i, r] = pack_mask(support, self.n_chunks)

    def popcount(self):
        """Active chunks per (query, kv head)."""
        return popcount32(self.words).sum(axis=-1)

    def iterate_active(self, i, r):
        """Yields the active chunks of row (i, r) in ascending order."""
        for k, word in enumerate(self.words[i, r].tolist()):
            while word:
                low = word & -word
                yield 32 * k + low.bit_length() - 1
                word ^= low

    def density(self):
        """Fraction of set bits over all (query, head, chunk) slots."""
        slots = self.words.shape[0] * self.words.shape[1] * self.n_chunks
        return self.popcount().sum() / float(slots) if slots else 0.

    def __eq__(self, other):
        return isinstance(other, BlockMask) and \
            self.n_chunks == other.n_chunks and \
            np.array_equal(self.words, other.words)


def pack_mask(support, n_chunks):
    """Packs a set of chunk indices into 32-bit words.

    Parameters
    ----------
    support: iterable of int
        Active chunk indices.
    n_chunks: int
        Number of chunks T_c.

    Returns
    -------
    words: np.array(ceil(T_c / 32)) of uint32
    """
    words = np.zeros(n_words(n_chunks), dtype=np.uint32)
    for c in support:
        c = int(c)
        if c < 0 or c >= n_chunks:
            raise RangeError("Chunk %d out of range [0, %d)" % (c, n_chunks))
        words[c // 32] |= np.uint32(1 << (c % 32))
    return words


def unpack_mask(words, n_chunks):
    """Sorted chunk indices whose bit is set."""
    mask = BlockMask(np.asarray(words, dtype=np.uint32)[None, None, :],
                     n_chunks)
    return np.fromiter(mask.iterate_active(0, 0), dtype=np.int64)


def n_visible_chunks(i, config):
    """Chunks query `i` may route to (all full and before its diagonal
    branch). Works elementwise on arrays of positions."""
    own = np.asarray(i) // config.block_size
    if config.include_prev_chunk:
        return np.maximum(own - 1, 0)
    return own


def diagonal_chunks(i, config):
    """Chunks (own and possibly previous) forming the diagonal branch."""
    own = i // config.block_size
    if config.include_prev_chunk and own >= 1:
        return [own - 1, own]
    return [own]


def diagonal_tokens(i, config):
    """Positions of the diagonal branch of query `i`."""
    return range(int(n_visible_chunks(i, config)) * config.block_size, i + 1)


def chunk_logits(q_i, summaries, head, gamma, n_visible, g_q=1):
    """Scaled chunk logits gamma <q_i, k_bar_c> / sqrt(d_h).

    Parameters
    ----------
    q_i: np.array(d_h)
        Query vector of head `head`.
    summaries: `dashattn.summarize.ChunkSummaries`
    head: int
        Query head; it reads kv head head // g_q.
    gamma: float
        Routing scale.
    n_visible: int
        Leading chunks visible to the query.
    g_q: int
        Query heads per kv head.

    Returns
    -------
    z: np.array(n_visible)
    """
    q_i = np.asarray(q_i, dtype=np.float64)
    k_bar = summaries.summaries[:n_visible, head // g_q]
    if k_bar.shape[0] != n_visible or k_bar.shape[1:] != q_i.shape:
        raise ShapeError("Query %s does not match %d summaries of %s" %
                         (q_i.shape, n_visible, k_bar.shape[1:]))
    return gamma * np.dot(k_bar, q_i) / np.sqrt(q_i.shape[0])


def route_entmax(logits, alpha):
    """Entmax routing distribution over the visible chunks."""
    if len(logits) == 0:
        raise DiagonalOnly("No visible chunk to route to")
    return entmax(logits, alpha)


RoutingWeights = collections.namedtuple("RoutingWeights", ["w", "support"])


def gqa_merge(head_results):
    """Averages the routing distributions of the heads of one group.

    Parameters
    ----------
    head_results: list of `EntmaxResult` or np.array
        One distribution per query head, all over the same chunks.

    Returns
    -------
    merged: `RoutingWeights`
        Mean distribution `w` and its support (union of head supports).
    """
    probs = [r.p if isinstance(r, EntmaxResult) else np.asarray(r)
             for r in head_results]
    if len(probs) == 0 or len(set(p.shape for p in probs)) != 1:
        raise ShapeError("Head distributions must share one chunk axis")
    w = np.mean(probs, axis=0)
    return RoutingWeights(w, np.flatnonzero(w > 0))


def _log_weights(w):
    w = np.asarray(w, dtype=np.float64)
    support = w > 0
    if not np.any(support):
        raise DiagonalOnly("Empty routing support")
    return np.log(np.maximum(w, LOG_FLOOR)), support


def prior_weights(w, sigma, B):
    """Strength-reduced token prior w'.

    Parameters
    ----------
    w: np.array(n_visible)
        Merged chunk weights.
    sigma: float > 0
        Prior strength.
    B: int
        Chunk size.

    Returns
    -------
    w_prime: np.array(n_visible * B)
        (1 / B) w_c^(1 / sigma) / sum_c w_c^(1 / sigma) for tokens of routed
        chunks, 0 elsewhere.
    """
    logw, support = _log_weights(w)
    scaled = np.where(support, logw / sigma, -np.inf)
    chunk = np.exp(scaled - logsumexp(scaled)) / B
    return np.repeat(chunk, B)


def prior_lambda(w_prime_routed, n_routed, n_diag):
    """Mass of the routed branch.

    lambda = sigmoid(KL(u || w') + log(|R| / |D|)), where the KL is taken
    against the w' entries of the routed tokens as they are.

    Parameters
    ----------
    w_prime_routed: np.array(|R|)
        w' restricted to routed tokens.
    n_routed: int
        |R|.
    n_diag: int
        |D|.

    Returns
    -------
    lam: float in (0, 1)
    """
    w_prime_routed = np.asarray(w_prime_routed, dtype=np.float64)
    if len(w_prime_routed) != n_routed or n_routed < 1 or n_diag < 1:
        raise ShapeError("Need |R| = len(w') >= 1 and |D| >= 1")
    kl = -np.log(n_routed) - \
        np.mean(np.log(np.maximum(w_prime_routed, LOG_FLOOR)))
    return float(expit(kl + np.log(n_routed / float(n_diag))))


def prior_g(w, sigma, B, n_diag):
    """Stage-2 prior over positions 0..i.

    Parameters
    ----------
    w: np.array(n_visible)
        Merged chunk weights.
    sigma: float > 0
    B: int
        Chunk size.
    n_diag: int
        Size of the diagonal branch.

    Returns
    -------
    g: np.array(n_visible * B + n_diag)
        lambda w' on routed tokens, (1 - lambda) / |D| on the diagonal
        branch, 0 on unrouted chunks.
    """
    w_prime = prior_weights(w, sigma, B)
    routed = w_prime > 0
    lam = prior_lambda(w_prime[routed], int(routed.sum()), n_diag)
    return np.concatenate((lam * w_prime,
                           np.full(n_diag, (1 - lam) / n_diag)))


def routing_bias(w, sigma, B, n_diag):
    """Additive bias equivalent to the prior of `prior_g`.

    Parameters
    ----------
    w: np.array(n_visible)
        Merged chunk weights.
    sigma: float > 0
    B: int
        Chunk size.
    n_diag: int
        Size of the diagonal branch.

    Returns
    -------
    d: np.array(n_visible * B + n_diag)
        (log w_c - mu) / sigma on routed tokens, with mu the mean log
        weight over routed tokens; 0 on the diagonal branch; -inf on tokens
        of unrouted chunks.
    """
    logw, support = _log_weights(w)
    mu = logw[support].mean()
    chunk = np.where(support, (logw - mu) / sigma, -np.inf)
    return np.concatenate((np.repeat(chunk, B), np.zeros(n_diag)))


class RouteResult(object):
    """Routing outcome for one (query position, kv head).

    Attributes
    ----------
    position: int
    kv_head: int
    head_results: list of `EntmaxResult`
        Per query head routing (empty when diagonal only).
    w: np.array(n_visible)
        Merged chunk weights.
    support: np.array
        Routed chunk indices.
    diag: range
        Diagonal-branch positions.
    lam: float
        Routed mass (0 when diagonal only).
    chunk_bias: np.array(n_visible)
        Bias of every routed chunk (0 on unrouted ones).
    mask_row: np.array of uint32
    block_size: int
    sigma: float
    """
    def __init__(self, position, kv_head, head_results, w, diag, lam,
                 chunk_bias, n_chunks, block_size, sigma):
        self.position = position
        self.kv_head = kv_head
        self.head_results = head_results
        self.w = w
        self.support = np.flatnonzero(w > 0)
        self.diag = diag
        self.lam = lam
        self.chunk_bias = chunk_bias
        self.block_size = block_size
        self.sigma = sigma
        self.mask_row = pack_mask(self.support, n_chunks)

    @property
    def n_visible(self):
        return len(self.w)

    @property
    def diagonal_only(self):
        return len(self.support) == 0

    @property
    def routed_tokens(self):
        B = self.block_size
        return np.concatenate(
            [np.arange(c * B, (c + 1) * B) for c in self.support] +
            [np.zeros(0, dtype=np.int64)]).astype(np.int64)

    def token_bias(self):
        """Bias over positions 0..i (-inf outside R and D)."""
        if self.diagonal_only:
            return np.concatenate((np.full(self.n_visible * self.block_size,
                                           -np.inf),
                                   np.zeros(len(self.diag))))
        return routing_bias(self.w, self.sigma, self.block_size,
                            len(self.diag))

    def token_prior(self):
        """Prior g over positions 0..i."""
        if self.diagonal_only:
            return np.concatenate((np.zeros(self.n_visible *
                                            self.block_size),
                                   np.full(len(self.diag),
                                           1. / len(self.diag))))
        return prior_g(self.w, self.sigma, self.block_size, len(self.diag))


def route_query(i, Q_i, summaries, config):
    """Routes one query position, head by head and group by group.

    Parameters
    ----------
    i: int
        Query position.
    Q_i: np.array(h_q, d_h)
        Queries of all heads at position i.
    summaries: `dashattn.summarize.ChunkSummaries`
    config: `dashattn.summarize.AttnConfig`

    Returns
    -------
    results: list of `RouteResult`
        One per kv head.
    """
    n_vis = int(n_visible_chunks(i, config))
    diag = diagonal_tokens(i, config)
    B, g_q = config.block_size, config.g_q
    results = []
    for r in range(config.h_kv):
        heads = range(r * g_q, (r + 1) * g_q)
        try:
            head_results = [
                route_entmax(chunk_logits(Q_i[h], summaries, h, config.gamma,
                                          n_vis, g_q), config.alpha)
                for h in heads]
        except DiagonalOnly:
            results.append(RouteResult(i, r, [], np.zeros(0), diag, 0.,
                                       np.zeros(0), summaries.n_chunks, B,
                                       config.sigma))
            continue
        w = gqa_merge(head_results).w
        d = routing_bias(w, config.sigma, B, len(diag))[:n_vis * B:B]
        w_prime = prior_weights(w, config.sigma, B)
        lam = prior_lambda(w_prime[w_prime > 0], int(np.sum(w_prime > 0)),
                           len(diag))
        results.append(RouteResult(i, r, head_results, w, diag, lam,
                                   np.where(w > 0, d, 0.),
                                   summaries.n_chunks, B, config.sigma))
    return results


class RouteTable(object):
    """Routing of every (query, kv head) of a sequence, stored densely.

    Attributes
    ----------
    logits: np.array(n, h_q, T_c)
        gamma <q, k_bar> / sqrt(d_h), 0 on invisible chunks.
    probs: np.array(n, h_q, T_c)
        Per-head entmax distributions.
    tau: np.array(n, h_q)
        Thresholds of the scaled logits.
    weights: np.array(n, h_kv, T_c)
        Merged group distributions w.
    lam: np.array(n, h_kv)
        Routed-branch mass (0 for diagonal-only rows).
    chunk_bias: np.array(n, h_kv, T_c)
        Zero-centered routing bias of routed chunks, 0 elsewhere.
    mask: `BlockMask`
    n_visible: np.array(n)
    n_diag: np.array(n)
    """
    def __init__(self, config, logits, probs, tau, weights, lam, chunk_bias,
                 mask, n_visible):
        self.config = config
        self.logits = logits
        self.probs = probs
        self.tau = tau
        self.weights = weights
        self.lam = lam
        self.chunk_bias = chunk_bias
        self.mask = mask
        self.n_visible = n_visible
        self.n_diag = np.arange(config.n) + 1 - n_visible * config.block_size

    @property
    def n_chunks(self):
        return self.mask.n_chunks

    def result(self, i, r):
        """`RouteResult` view of row (i, r)."""
        c = self.config
        n_vis = int(self.n_visible[i])
        diag = diagonal_tokens(i, c)
        heads = range(r * c.g_q, (r + 1) * c.g_q)
        if n_vis == 0:
            head_results = []
        else:
            head_results = [
                EntmaxResult(self.probs[i, h, :n_vis],
                             self.tau[i, h],
                             np.flatnonzero(self.probs[i, h, :n_vis] > 0),
                             c.alpha) for h in heads]
        return RouteResult(i, r, head_results, self.weights[i, r, :n_vis],
                           diag, float(self.lam[i, r]),
                           self.chunk_bias[i, r, :n_vis], self.n_chunks,
                           c.block_size, c.sigma)

    def margin(self):
        """Smallest |(alpha - 1) z_c - tau| over visible chunks, i.e. the
        distance of the routing to a support change."""
        c = self.config
        visible = np.arange(self.n_chunks)[None, :] < self.n_visible[:, None]
        if not np.any(visible):
            return np.inf
        gap = np.abs((c.alpha - 1) * self.logits - self.tau[..., None])
        return float(gap[np.broadcast_to(visible[:, None, :],
                                         gap.shape)].min())


def chunk_logit_table(Q, summaries, config):
    """`chunk_logits` of every query position and head at once.

    Returns
    -------
    logits: np.array(n, h_q, T_c)
        0 on chunks a query cannot see.
    n_vis: np.array(n)
        Visible chunks per position.
    """
    Q = np.asarray(Q, dtype=np.float64)
    n, h_q, d_h = Q.shape
    if (n, h_q, d_h) != (config.n, config.h_q, config.d_h):
        raise ShapeError("Queries have shape %s, expected %s" %
                         (Q.shape, (config.n, config.h_q, config.d_h)))
    T_c = summaries.n_chunks
    n_vis = n_visible_chunks(np.arange(n), config)
    visible = np.arange(T_c)[None, :] < n_vis[:, None]
    k_bar = np.repeat(summaries.summaries, config.g_q, axis=1)
    logits = config.gamma * np.einsum("ihd,chd->ihc", Q, k_bar) / \
        np.sqrt(d_h)
    return np.where(visible[:, None, :], logits, 0.), n_vis


def route_all(Q, summaries, config):
    """Routes every query position of a sequence.

    Parameters
    ----------
    Q: np.array(n, h_q, d_h)
        Queries.
    summaries: `dashattn.summarize.ChunkSummaries`
    config: `dashattn.summarize.AttnConfig`

    Returns
    -------
    table: `RouteTable`
    """
    logits, n_vis = chunk_logit_table(Q, summaries, config)
    n, h_q, T_c = logits.shape
    g_q, B = config.g_q, config.block_size
    visible = np.arange(T_c)[None, :] < n_vis[:, None]

    probs = np.zeros((n, h_q, T_c))
    tau = np.zeros((n, h_q))
    rows = n_vis > 0
    if np.any(rows):
        X = np.where(visible[rows, None, :],
                     (config.alpha - 1) * logits[rows], -np.inf)
        P, t = entmax_rows(X.reshape(-1, T_c), config.alpha)
        probs[rows] = P.reshape(-1, h_q, T_c)
        tau[rows] = t.reshape(-1, h_q)

    weights = probs.reshape(n, config.h_kv, g_q, T_c).mean(axis=2)
    support = weights > 0
    n_sup = support.sum(axis=-1)
    logw = np.log(np.maximum(weights, LOG_FLOOR))
    with np.errstate(invalid="ignore", divide="ignore"):
        mu = np.where(support, logw, 0.).sum(axis=-1) / np.maximum(n_sup, 1)
        chunk_bias = np.where(support, (logw - mu[..., None]) /
                              config.sigma, 0.)

        # lambda from the chunk-level log prior, B tokens per chunk
        scaled = np.where(support, logw / config.sigma, -np.inf)
        # no full chunk yet: every row is diagonal only
        lse = logsumexp(scaled, axis=-1) if T_c else np.zeros(n_sup.shape)
        log_w_prime = np.where(support, scaled - lse[..., None], 0.) - \
            np.log(B)
        n_routed = B * n_sup
        n_diag = (np.arange(n) + 1 - n_vis * B)[:, None]
        kl = -np.log(np.maximum(n_routed, 1)) - \
            log_w_prime.sum(axis=-1) / np.maximum(n_sup, 1)
        lam = np.where(n_sup > 0,
                       expit(kl + np.log(np.maximum(n_routed, 1) / n_diag)),
                       0.)

    mask = BlockMask.from_dense(support)
    logging.debug("Routed %d queries, %.3f of chunk slots active" %
                  (n, mask.density()))
    return RouteTable(config, logits, probs, tau, weights, lam, chunk_bias,
                      mask, n_vis)
