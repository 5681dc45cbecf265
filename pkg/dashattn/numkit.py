"""
Numeric foundation shared by every stage: validated dense matrices,
row-wise softmax, seeded generators and the streaming softmax accumulator.

.. autosummary::
    :toctree: generated/

    as_matrix
    matmul
    row_softmax
    make_rng
    OnlineAccumulator
"""
import numpy as np

from dashattn.exceptions import ShapeError, DegenerateRowError, DomainError


def as_matrix(A, dtype=np.float64, name="matrix"):
    """Validates and returns a row-major dense matrix.

    Parameters
    ----------
    A: array_like
        Two dimensional input.
    dtype: np.dtype
        Floating point type of the result (64-bit unless benchmarking).
    name: str
        Name used in error messages.

    Returns
    -------
    M: np.array(rows, cols)
        C-contiguous copy (or view) of `A` with finite entries.
    """
    M = np.ascontiguousarray(A, dtype=dtype)
    if M.ndim != 2:
        raise ShapeError("%s must be two dimensional, got shape %s" %
                         (name, M.shape))
    if not np.all(np.isfinite(M)):
        raise DomainError("%s contains non-finite entries" % name)
    return M


def matmul(A, B):
    """Matrix product of two dense matrices.

    Parameters
    ----------
    A: np.array(m, k)
    B: np.array(k, n)

    Returns
    -------
    C: np.array(m, n)
        The product `A B`.
    """
    A = as_matrix(A, name="A")
    B = as_matrix(B, name="B")
    if A.shape[1] != B.shape[0]:
        raise ShapeError("Cannot multiply %s by %s" % (A.shape, B.shape))
    return np.dot(A, B)


def row_softmax(Z, mask=None):
    """Row-wise softmax with optional boolean mask.

    Parameters
    ----------
    Z: np.array(rows, cols)
        Logits.
    mask: np.array(rows, cols) of bool
        True where the entry participates. Masked entries get exactly 0.

    Returns
    -------
    P: np.array(rows, cols)
        Row-stochastic matrix.
    """
    Z = as_matrix(Z, name="Z")
    if mask is None:
        mask = np.ones(Z.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != Z.shape:
        raise ShapeError("Mask shape %s does not match logits shape %s" %
                         (mask.shape, Z.shape))
    empty = ~mask.any(axis=1)
    if np.any(empty):
        raise DegenerateRowError("Rows %s are fully masked" %
                                 np.flatnonzero(empty).tolist())
    Zm = np.where(mask, Z, -np.inf)
    E = np.exp(Zm - Zm.max(axis=1, keepdims=True))
    return E / E.sum(axis=1, keepdims=True)


def make_rng(seed):
    """Counter-based (Philox) generator, reproducible across platforms.

    Parameters
    ----------
    seed: int >= 0
        64-bit seed.

    Returns
    -------
    rng: np.random.Generator
    """
    if seed < 0 or seed >= 2 ** 64:
        raise DomainError("Seed must fit in an unsigned 64-bit integer")
    return np.random.Generator(np.random.Philox(int(seed)))


class OnlineAccumulator(object):
    """Streaming softmax-weighted sum over blocks of keys.

    Each row keeps a running max `m`, normalizer `ell` and output
    accumulator `acc`; blocks may be pushed in any order and `result()`
    equals the two-pass softmax average.
    """
    def __init__(self, rows, dim, dtype=np.float64):
        self.m = np.full(rows, -np.inf, dtype=dtype)
        self.ell = np.zeros(rows, dtype=dtype)
        self.acc = np.zeros((rows, dim), dtype=dtype)

    def update(self, S, Vb):
        """Folds one block into the running state.

        Parameters
        ----------
        S: np.array(rows, b)
            Scores of the block; -inf marks excluded entries.
        Vb: np.array(b, dim)
            Values of the block.
        """
        if S.shape[1] == 0:
            return
        m_new = np.maximum(self.m, S.max(axis=1))
        # rows that have seen nothing finite yet keep m = -inf
        m_safe = np.where(np.isfinite(m_new), m_new, 0.0)
        scale = np.exp(self.m - m_safe)
        P = np.exp(S - m_safe[:, None])
        self.ell = self.ell * scale + P.sum(axis=1)
        self.acc = self.acc * scale[:, None] + np.dot(P, Vb)
        self.m = m_new

    @property
    def lse(self):
        """Log-normalizer of every row."""
        return self.m + np.log(self.ell)

    def result(self):
        """Normalized output rows."""
        if np.any(self.ell <= 0):
            raise DegenerateRowError("A row received no admissible key")
        return self.acc / self.ell[:, None]
