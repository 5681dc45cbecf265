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
from dashattn.exceptions import DegenerateRowError, DomainError, ShapeError
from dashattn.numkit import (OnlineAccumulator, as_matrix, make_rng, matmul,
                             row_softmax)


def test_as_matrix():
    M = as_matrix([[1, 2], [3, 4]])
    assert M.dtype == np.float64
    assert M.flags["C_CONTIGUOUS"]
    assert_raises(ShapeError, as_matrix, np.zeros(3))
    assert_raises(DomainError, as_matrix, [[np.nan, 1.]])
    assert_raises(DomainError, as_matrix, [[np.inf, 1.]])


def test_matmul():
    rng = make_rng(0)
    A = rng.standard_normal((3, 5))
    B = rng.standard_normal((5, 2))
    npt.assert_allclose(matmul(A, B), A.dot(B))
    assert_raises(ShapeError, matmul, A, A)


def test_row_softmax():
    Z = np.array([[1., 2., 3.], [1000., 1000., -1000.]])
    P = row_softmax(Z)
    npt.assert_allclose(P.sum(axis=1), 1)
    npt.assert_allclose(P[0], softmax(Z[0]))
    npt.assert_allclose(P[1], [0.5, 0.5, 0.], atol=1e-300)


def test_row_softmax_mask():
    Z = np.array([[1., 2., 3.]])
    P = row_softmax(Z, np.array([[True, False, True]]))
    assert P[0, 1] == 0
    npt.assert_allclose(P[0, [0, 2]], softmax([1., 3.]))
    assert_raises(DegenerateRowError, row_softmax, Z,
                  np.zeros((1, 3), dtype=bool))
    assert_raises(ShapeError, row_softmax, Z, np.ones((1, 2), dtype=bool))


def test_make_rng():
    a = make_rng(42).standard_normal(5)
    b = make_rng(42).standard_normal(5)
    npt.assert_array_equal(a, b)
    assert not np.array_equal(a, make_rng(43).standard_normal(5))
    make_rng(2 ** 64 - 1)
    assert_raises(DomainError, make_rng, -1)
    assert_raises(DomainError, make_rng, 2 ** 64)


def test_online_accumulator():
    """Pushing blocks in any order equals the two pass softmax average."""
    rng = make_rng(3)
    S = rng.standard_normal((4, 12)) * 5
    V = rng.standard_normal((12, 3))
    expected = softmax(S, axis=1).dot(V)
    for order in ([0, 1, 2], [2, 0, 1]):
        acc = OnlineAccumulator(4, 3)
        for b in order:
            acc.update(S[:, 4 * b:4 * (b + 1)], V[4 * b:4 * (b + 1)])
        npt.assert_allclose(acc.result(), expected, rtol=1e-12)
        npt.assert_allclose(acc.lse, np.log(np.exp(S).sum(axis=1)))


def test_online_accumulator_masked():
    """-inf scores are excluded; empty blocks are ignored."""
    acc = OnlineAccumulator(1, 1)
    acc.update(np.full((1, 2), -np.inf), np.ones((2, 1)))
    acc.update(np.zeros((1, 0)), np.zeros((0, 1)))
    acc.update(np.array([[0., 0.]]), np.array([[1.], [3.]]))
    npt.assert_allclose(acc.result(), [[2.]])


def test_online_accumulator_empty():
    acc = OnlineAccumulator(2, 1)
    assert_raises(DegenerateRowError, acc.result)
