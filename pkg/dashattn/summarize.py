"""
Stage 0: split the keys into chunks of B tokens and summarize every
(chunk, kv-head) pair with a small attention read driven by a learned
summary query.

.. autosummary::
    :toctree: generated/

    AttnConfig
    ChunkSummaries
    chunk_partition
    summarize_chunk
    summarize_all
"""
import logging

import numpy as np

from dashattn import config as global_config
from dashattn.configparser import parse_bool
from dashattn.exceptions import ConfigError, ShapeError
from dashattn.numkit import OnlineAccumulator

SUMMARY_MODES = ("local", "mean")


class AttnConfig(object):
    """Hyperparameters of the whole attention pipeline.

    Defaults are read from `dashattn.config.attention`.
    """
    _fields = ["n", "d_h", "h_q", "h_kv", "block_size", "alpha", "gamma",
               "sigma", "include_prev_chunk", "summary_mode"]

    def __init__(self, n, d_h, h_q=1, h_kv=1,
                 block_size=global_config.attention.block_size,
                 alpha=global_config.attention.alpha,
                 gamma=global_config.attention.gamma,
                 sigma=global_config.attention.sigma,
                 include_prev_chunk=global_config.attention.include_prev_chunk,
                 summary_mode=global_config.attention.summary_mode):
        self.n = int(n)
        self.d_h = int(d_h)
        self.h_q = int(h_q)
        self.h_kv = int(h_kv)
        self.block_size = int(block_size)
        self.alpha = float(alpha)
        self.gamma = float(gamma)
        self.sigma = float(sigma)
        try:
            self.include_prev_chunk = parse_bool(include_prev_chunk)
        except ValueError as e:
            raise ConfigError("include_prev_chunk: %s" % e)
        self.summary_mode = summary_mode
        self.validate()

    def validate(self):
        if self.n < 1 or self.d_h < 1 or self.block_size < 1:
            raise ConfigError("n, d_h and block_size must be >= 1")
        if self.h_kv < 1 or self.h_q < 1 or self.h_q % self.h_kv != 0:
            raise ConfigError("h_q (%d) must be a positive multiple of "
                              "h_kv (%d)" % (self.h_q, self.h_kv))
        if not self.alpha > 1:
            raise ConfigError("alpha must be > 1, got %r" % self.alpha)
        if not (self.gamma > 0 and self.sigma > 0):
            raise ConfigError("gamma and sigma must be > 0")
        if self.summary_mode not in SUMMARY_MODES:
            raise ConfigError("Unknown summary mode %r" % self.summary_mode)

    @property
    def g_q(self):
        """Query heads per kv head."""
        return self.h_q // self.h_kv

    @property
    def n_chunks(self):
        """Number of full chunks T_c."""
        return self.n // self.block_size

    def replace(self, **kwargs):
        """Copy of this configuration with some fields changed."""
        params = self.to_dict()
        params.update(kwargs)
        return AttnConfig(**params)

    def to_dict(self):
        return dict((k, getattr(self, k)) for k in self._fields)

    @classmethod
    def from_dict(cls, params):
        unknown = set(params) - set(cls._fields)
        if unknown:
            raise ConfigError("Unknown attention parameters: %s" %
                              sorted(unknown))
        return cls(**params)

    def __eq__(self, other):
        return isinstance(other, AttnConfig) and \
            self.to_dict() == other.to_dict()

    def __repr__(self):
        return "AttnConfig(%s)" % ", ".join(
            "%s=%r" % (k, getattr(self, k)) for k in self._fields)


def chunk_partition(n, B):
    """Splits positions 0..n-1 into full chunks and a residual.

    Parameters
    ----------
    n: int >= 1
        Sequence length.
    B: int >= 1
        Chunk size.

    Returns
    -------
    ranges: list of range
        The floor(n / B) full chunks [cB, (c + 1)B).
    residual: range
        The trailing n mod B positions, possibly empty.
    """
    n_chunks = n // B
    ranges = [range(c * B, (c + 1) * B) for c in range(n_chunks)]
    return ranges, range(n_chunks * B, n)


def summarize_chunk(K_chunk, q_bar_r):
    """Summary key of one chunk: softmax(K q_bar / sqrt(d_h))^T K.

    Parameters
    ----------
    K_chunk: np.array(B, d_h)
        Keys of the chunk; they also act as values.
    q_bar_r: np.array(d_h)
        Summary query of the kv head.

    Returns
    -------
    k_bar: np.array(d_h)
    """
    K_chunk = np.asarray(K_chunk, dtype=np.float64)
    q_bar_r = np.asarray(q_bar_r, dtype=np.float64)
    if K_chunk.ndim != 2 or q_bar_r.shape != (K_chunk.shape[1],):
        raise ShapeError("Chunk %s and summary query %s do not match" %
                         (K_chunk.shape, q_bar_r.shape))
    acc = OnlineAccumulator(1, K_chunk.shape[1])
    scores = np.dot(K_chunk, q_bar_r) / np.sqrt(K_chunk.shape[1])
    acc.update(scores[None, :], K_chunk)
    return acc.result()[0]


class ChunkSummaries(object):
    """Append-only cache of chunk summaries.

    Attributes
    ----------
    summaries: np.array(T_c, h_kv, d_h)
        Summary keys, one per (chunk, kv head).
    q_bar: np.array(h_kv, d_h)
        Summary queries used to build them.
    block_size: int
        Chunk size B.
    summary_mode: str
        "local" (learned attention read) or "mean" (mean pooling).
    """
    def __init__(self, q_bar, block_size, summary_mode="local"):
        self.q_bar = np.array(q_bar, dtype=np.float64)
        if self.q_bar.ndim != 2:
            raise ShapeError("q_bar must be (h_kv, d_h)")
        self.block_size = block_size
        self.summary_mode = summary_mode
        self.summaries = np.zeros((0,) + self.q_bar.shape)

    @property
    def n_chunks(self):
        return self.summaries.shape[0]

    def _query(self, r):
        if self.summary_mode == "mean":
            return np.zeros(self.q_bar.shape[1])
        return self.q_bar[r]

    def extend(self, K):
        """Summarizes the chunks of `K` completed since the last call.

        Parameters
        ----------
        K: np.array(n, h_kv, d_h)
            Every key seen so far (earlier positions unchanged).

        Returns
        -------
        added: int
            Number of new summaries.
        """
        K = np.asarray(K, dtype=np.float64)
        if K.ndim != 3 or K.shape[1:] != self.q_bar.shape:
            raise ShapeError("Keys %s do not match summary queries %s" %
                             (K.shape, self.q_bar.shape))
        B = self.block_size
        ranges, _ = chunk_partition(K.shape[0], B)
        new = []
        for chunk in ranges[self.n_chunks:]:
            new.append([summarize_chunk(K[chunk.start:chunk.stop, r],
                                        self._query(r))
                        for r in range(K.shape[1])])
        if new:
            self.summaries = np.concatenate(
                (self.summaries, np.asarray(new)), axis=0)
        return len(new)

    def __getitem__(self, c):
        return self.summaries[c]


def summarize_all(K, q_bar, config):
    """Summarizes every full chunk of every kv head.

    Parameters
    ----------
    K: np.array(n, h_kv, d_h)
        Keys.
    q_bar: np.array(h_kv, d_h)
        Summary queries.
    config: `AttnConfig`

    Returns
    -------
    summaries: `ChunkSummaries`
    """
    K = np.asarray(K, dtype=np.float64)
    if K.shape != (config.n, config.h_kv, config.d_h):
        raise ShapeError("Keys have shape %s, expected %s" %
                         (K.shape, (config.n, config.h_kv, config.d_h)))
    if np.shape(q_bar) != (config.h_kv, config.d_h):
        raise ShapeError("q_bar has shape %s, expected %s" %
                         (np.shape(q_bar), (config.h_kv, config.d_h)))
    cache = ChunkSummaries(q_bar, config.block_size, config.summary_mode)
    cache.extend(K)
    logging.debug("Summarized %d chunks x %d heads" %
                  (cache.n_chunks, config.h_kv))
    return cache
