"""
The alpha-entmax family of sparse probability mappings.

entmax(z, alpha)_i = [(alpha - 1) z_i - tau]_+ ^ (1 / (alpha - 1)), with tau
chosen so the output sums to one. alpha = 2 is sparsemax and has an exact
sort-based threshold; any other alpha > 1 is solved by bisection.

.. autosummary::
    :toctree: generated/

    entmax_threshold
    entmax
    entmax_scaled
    entmax_rows
    sparsemax_exact
    entmax_vjp
    tsallis_entropy
"""
import collections

import numpy as np
from scipy.special import entr

from dashattn import config
from dashattn.exceptions import DomainError, ShapeError

EntmaxResult = collections.namedtuple("EntmaxResult",
                                      ["p", "tau", "support", "alpha"])
EntmaxResult.__doc__ = """Output of `entmax`: probabilities `p`, threshold
`tau`, sorted `support` indices (p > 0) and the exponent `alpha`."""


def _check_alpha(alpha):
    if not alpha > 1:
        raise DomainError("alpha must be > 1, got %r" % alpha)


def _check_vector(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ShapeError("Expected a nonempty vector, got shape %s" %
                         (z.shape,))
    if not np.all(np.isfinite(z)):
        raise DomainError("Logits must be finite")
    return z


def _sparsemax_thresholds(X):
    """Sort-based thresholds of the rows of X (-inf entries excluded)."""
    Xs = -np.sort(-X, axis=1)
    valid = np.isfinite(Xs)
    Xs = np.where(valid, Xs, 0.0)
    cs = np.cumsum(Xs, axis=1)
    k = np.arange(1, X.shape[1] + 1)
    rho = np.sum((1 + k * Xs > cs) & valid, axis=1)
    return (cs[np.arange(X.shape[0]), rho - 1] - 1) / rho


def _bisect_thresholds(X, alpha, max_iter, tol):
    """Bracketed bisection for the thresholds of the rows of X."""
    inv = 1. / (alpha - 1)
    hi = X.max(axis=1)
    lo = hi - 1
    tau = (lo + hi) / 2
    active = np.ones(X.shape[0], dtype=bool)
    for _ in range(max_iter):
        tau = np.where(active, (lo + hi) / 2, tau)
        f = np.sum(np.clip(X - tau[:, None], 0, None) ** inv, axis=1) - 1
        active &= np.abs(f) >= tol
        if not np.any(active):
            break
        lo = np.where(active & (f > 0), tau, lo)
        hi = np.where(active & (f < 0), tau, hi)
    # one Newton step on the frozen support, kept inside the bracket
    gap = np.clip(X - tau[:, None], 0, None)
    f = np.sum(gap ** inv, axis=1) - 1
    slope = np.zeros_like(gap)
    slope[gap > 0] = gap[gap > 0] ** (inv - 1)
    fprime = inv * slope.sum(axis=1)
    step = np.where(fprime > 0, f / np.where(fprime > 0, fprime, 1), 0)
    polished = tau + step
    return np.where((polished >= lo) & (polished <= hi), polished, tau)


def entmax_rows(X, alpha, max_iter=config.entmax.max_bisect_iter,
                tol=config.entmax.tol):
    """Row-wise entmax of already scaled scores.

    Parameters
    ----------
    X: np.array(rows, m)
        Scaled scores (alpha - 1) z. Entries set to -inf are excluded and
        get probability 0; every row needs one finite entry.
    alpha: float > 1
        Entmax exponent.
    max_iter: int
        Maximum number of bisection halvings.
    tol: float
        Stop once |sum(p) - 1| falls below this value.

    Returns
    -------
    P: np.array(rows, m)
        Row-stochastic, sparse.
    tau: np.array(rows)
        Thresholds.
    """
    _check_alpha(alpha)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("Expected a matrix, got shape %s" % (X.shape,))
    if X.shape[0] == 0:
        return np.zeros(X.shape), np.zeros(0)
    if np.any(np.isnan(X)) or np.any(X == np.inf) or \
            not np.all(np.isfinite(X).any(axis=1)):
        raise DomainError("Every row needs finite scores and no NaN")
    if alpha == 2:
        tau = _sparsemax_thresholds(X)
        P = np.clip(X - tau[:, None], 0, None)
    else:
        tau = _bisect_thresholds(X, alpha, max_iter, tol)
        P = np.clip(X - tau[:, None], 0, None) ** (1. / (alpha - 1))
    P /= P.sum(axis=1, keepdims=True)
    return P, tau


def entmax_scaled(x, alpha):
    """Entmax of a vector that already carries the (alpha - 1) factor (and
    any routing scale), i.e. the folded form used by the router.

    Parameters
    ----------
    x: np.array(m)
        Scaled scores.
    alpha: float > 1

    Returns
    -------
    result: `EntmaxResult`
    """
    x = _check_vector(x)
    P, tau = entmax_rows(x[None, :], alpha)
    p = P[0]
    return EntmaxResult(p, tau[0], np.flatnonzero(p > 0), alpha)


def entmax(z, alpha):
    """alpha-entmax of a logit vector.

    Parameters
    ----------
    z: np.array(m)
        Finite logits.
    alpha: float > 1
        Exponent; 2 is sparsemax and values close to 1 approach softmax.

    Returns
    -------
    result: `EntmaxResult`
    """
    _check_alpha(alpha)
    return entmax_scaled((alpha - 1) * _check_vector(z), alpha)


def entmax_threshold(z, alpha):
    """Threshold tau of `entmax(z, alpha)`."""
    return entmax(z, alpha).tau


def sparsemax_exact(z):
    """Euclidean projection of `z` onto the probability simplex.

    Scans the sorted coordinates for the first one that falls under the
    running threshold. Independent of `entmax` so it can serve as its
    alpha = 2 oracle.
    """
    z = _check_vector(z)
    s = np.sort(z)[::-1]
    m = len(s)
    tmpsum = 0.
    tmax = None
    for j in range(m - 1):
        tmpsum += s[j]
        t = (tmpsum - 1) / (j + 1)
        if t >= s[j + 1]:
            tmax = t
            break
    if tmax is None:
        tmax = (tmpsum + s[m - 1] - 1) / m
    return np.maximum(z - tmax, 0)


def entmax_vjp(z, alpha, result, upstream):
    """Vector-Jacobian product of entmax w.r.t. its logits `z`.

    On the support S, with s_i = p_i^(2 - alpha), the Jacobian is
    diag(s) - s s^T / sum(s); it is zero elsewhere. The support is frozen,
    so at boundary points this is the one-sided derivative.

    Parameters
    ----------
    z: np.array(m)
        Logits passed to `entmax`.
    alpha: float > 1
    result: `EntmaxResult`
        Output of `entmax(z, alpha)`.
    upstream: np.array(m)
        Cotangent of the probabilities.

    Returns
    -------
    grad: np.array(m)
        Cotangent of the logits.
    """
    z = np.asarray(z, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if not (z.shape == upstream.shape == result.p.shape):
        raise ShapeError("Shapes %s, %s and %s do not match" %
                         (z.shape, upstream.shape, result.p.shape))
    s = np.zeros_like(result.p)
    s[result.support] = result.p[result.support] ** (2 - alpha)
    return s * upstream - s * (np.dot(s, upstream) / s.sum())


def tsallis_entropy(p, alpha):
    """Tsallis alpha-entropy, Shannon's entropy when alpha = 1.

    Parameters
    ----------
    p: np.array(m)
        Probability vector.
    alpha: float >= 1

    Returns
    -------
    H: float
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise DomainError("Probabilities must be nonnegative")
    if alpha == 1:
        return float(np.sum(entr(p)))
    return float(np.sum(p - p ** alpha) / (alpha * (alpha - 1)))
