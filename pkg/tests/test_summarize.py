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
from dashattn.exceptions import ConfigError, ShapeError
from dashattn.numkit import make_rng
from dashattn.summarize import (AttnConfig, ChunkSummaries, chunk_partition,
                                summarize_all, summarize_chunk)


def test_attn_config():
    c = AttnConfig(n=130, d_h=8, h_q=4, h_kv=2, block_size=16)
    assert c.g_q == 2
    assert c.n_chunks == 8
    assert c.alpha == dashattn.config.attention.alpha
    c2 = c.replace(alpha=2.)
    assert c2.alpha == 2. and c.alpha != 2.
    assert c2 != c
    assert AttnConfig.from_dict(c.to_dict()) == c
    assert "block_size=16" in repr(c)


def test_attn_config_errors():
    assert_raises(ConfigError, AttnConfig, 64, 8, 3, 2)
    assert_raises(ConfigError, AttnConfig, 0, 8)
    assert_raises(ConfigError, AttnConfig, 64, 8, alpha=1.)
    assert_raises(ConfigError, AttnConfig, 64, 8, sigma=0.)
    assert_raises(ConfigError, AttnConfig, 64, 8, gamma=-1.)
    assert_raises(ConfigError, AttnConfig, 64, 8, summary_mode="max")
    assert_raises(ConfigError, AttnConfig.from_dict,
                  {"n": 64, "d_h": 8, "heads": 2})


def test_include_prev_chunk_strings():
    assert AttnConfig(64, 8, include_prev_chunk="false").include_prev_chunk \
        is False
    assert AttnConfig(64, 8, include_prev_chunk="0").include_prev_chunk \
        is False
    assert AttnConfig(64, 8, include_prev_chunk="true").include_prev_chunk
    c = AttnConfig.from_dict({"n": 64, "d_h": 8,
                              "include_prev_chunk": "False"})
    assert c.include_prev_chunk is False
    assert_raises(ConfigError, AttnConfig, 64, 8, include_prev_chunk="no")


def test_chunk_partition():
    ranges, residual = chunk_partition(10, 4)
    assert ranges == [range(0, 4), range(4, 8)]
    assert residual == range(8, 10)
    ranges, residual = chunk_partition(3, 4)
    assert ranges == [] and len(residual) == 3
    ranges, residual = chunk_partition(8, 4)
    assert len(ranges) == 2 and len(residual) == 0


def test_zero_query_is_mean():
    K = make_rng(0).standard_normal((16, 5))
    npt.assert_allclose(summarize_chunk(K, np.zeros(5)), K.mean(axis=0))


def test_local_summary():
    rng = make_rng(1)
    K = rng.standard_normal((8, 4))
    q = rng.standard_normal(4) * 3
    a = softmax(K.dot(q) / 2.)
    npt.assert_allclose(summarize_chunk(K, q), a.dot(K))
    assert_raises(ShapeError, summarize_chunk, K, np.zeros(3))


def test_summarize_all():
    c = AttnConfig(n=70, d_h=4, h_q=2, h_kv=2, block_size=16)
    Q, K, V, q_bar = dashattn.utils.random_inputs(c, 2)
    cache = summarize_all(K, q_bar, c)
    assert cache.summaries.shape == (4, 2, 4)
    npt.assert_allclose(cache[3][1], summarize_chunk(K[48:64, 1], q_bar[1]))
    assert_raises(ShapeError, summarize_all, K[:60], q_bar, c)
    assert_raises(ShapeError, summarize_all, K, q_bar[:1], c)


def test_mean_mode():
    c = AttnConfig(n=32, d_h=4, h_q=1, h_kv=1, block_size=8,
                   summary_mode="mean")
    Q, K, V, q_bar = dashattn.utils.random_inputs(c, 3)
    cache = summarize_all(K, q_bar, c)
    npt.assert_allclose(cache.summaries[:, 0],
                        K[:, 0].reshape(4, 8, 4).mean(axis=1))


def test_append_stability():
    """Growing the sequence only appends summaries."""
    c = AttnConfig(n=64, d_h=4, h_q=2, h_kv=1, block_size=8)
    Q, K, V, q_bar = dashattn.utils.random_inputs(c, 4)
    cache = ChunkSummaries(q_bar, 8)
    assert cache.extend(K[:21]) == 2
    first = cache.summaries.copy()
    assert cache.extend(K[:21]) == 0
    assert cache.extend(K) == 6
    npt.assert_array_equal(cache.summaries[:2], first)
    npt.assert_allclose(cache.summaries, summarize_all(K, q_bar, c).summaries)
    assert_raises(ShapeError, cache.extend, np.zeros((8, 2, 4)))
