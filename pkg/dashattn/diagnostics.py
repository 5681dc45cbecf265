"""
Dispersion and sparsity analytics: entropy ratios of attention
distributions as the context grows, head aggregation, and per-layer
sparsity of the routed masks.

.. autosummary::
    :toctree: generated/

    shannon_entropy
    dispersion_ratio
    AggregationSpec
    head_aggregate
    apply_mapping
    draw_logits
    dispersion_sweep
    sparsity_stats
    density_sweep
"""
import logging

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import entr, softmax

from dashattn import config as global_config
from dashattn.attend import Trace, ent_prior_softmax, topk_route
from dashattn.entmax import entmax
from dashattn.exceptions import DomainError, ShapeError, TraceError
from dashattn.numkit import make_rng
from dashattn.route import route_all
from dashattn.summarize import summarize_all

FAMILIES = ("uniform", "gaussian", "spike")
MAPPINGS = ("softmax", "entmax", "topk", "entprior")
SWEEP_COLUMNS = ["n", "family", "mapping", "alpha", "k", "mean_ratio",
                 "std_ratio", "seeds"]
SPIKE_HEIGHT = 3.


def shannon_entropy(p):
    """Shannon entropy in nats, with 0 log 0 = 0.

    Parameters
    ----------
    p: np.array
        Probability vector.

    Returns
    -------
    H: float
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise DomainError("Probabilities must be nonnegative")
    return float(np.sum(entr(p)))


def dispersion_ratio(p, n):
    """Entropy of `p` relative to the maximum log(n)."""
    if n < 2:
        raise DomainError("The ratio needs n >= 2, got %d" % n)
    return shannon_entropy(p) / np.log(n)


def head_aggregate(dists, theta=None):
    """Mixture of per-head distributions.

    Parameters
    ----------
    dists: np.array(H, m)
        One probability vector per head.
    theta: np.array(H) or None
        Mixture weights on the simplex (uniform if None).

    Returns
    -------
    p: np.array(m)
    """
    dists = np.asarray(dists, dtype=np.float64)
    if dists.ndim != 2 or dists.shape[0] < 1:
        raise ShapeError("Expected (H, m) head distributions, got %s" %
                         (dists.shape,))
    H = dists.shape[0]
    if theta is None:
        theta = np.full(H, 1. / H)
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (H,):
        raise ShapeError("theta has shape %s for %d heads" %
                         (theta.shape, H))
    if np.any(theta < 0) or abs(theta.sum() - 1) > 1e-12:
        raise DomainError("theta must lie on the simplex")
    return np.dot(theta, dists)


def apply_mapping(z, mapping="softmax", alpha=global_config.attention.alpha,
                  k=8, sigma=1.):
    """Maps logits to a probability vector.

    Parameters
    ----------
    z: np.array(m)
        Logits.
    mapping: str
        "softmax", "entmax", "topk" (softmax over the k largest logits) or
        "entprior" (softmax reweighted by its own entmax prior).
    alpha: float
        Entmax exponent ("entmax" and "entprior").
    k: int
        Budget of "topk".
    sigma: float
        Prior strength of "entprior".

    Returns
    -------
    p: np.array(m)
    """
    z = np.asarray(z, dtype=np.float64)
    if mapping == "softmax":
        return softmax(z)
    if mapping == "entmax":
        return entmax(z, alpha).p
    if mapping == "topk":
        p = np.zeros_like(z)
        idx = topk_route(z, k)
        p[idx] = softmax(z[idx])
        return p
    if mapping == "entprior":
        return ent_prior_softmax(z, alpha, sigma)
    raise ValueError("Unknown mapping %r, expected one of %s" %
                     (mapping, MAPPINGS))


class AggregationSpec(object):
    """Heads, their mixture weights and the mapping each head applies.

    Attributes
    ----------
    H: int
        Number of heads.
    theta: np.array(H)
        Mixture weights (uniform by default).
    mapping: str
        See `apply_mapping`.
    alpha, k, sigma: float, int, float
        Mapping parameters.
    """
    def __init__(self, H=1, theta=None, mapping="softmax",
                 alpha=global_config.attention.alpha, k=8, sigma=1.):
        if H < 1:
            raise DomainError("H must be >= 1")
        if mapping not in MAPPINGS:
            raise ValueError("Unknown mapping %r" % mapping)
        self.H = int(H)
        self.theta = np.full(self.H, 1. / self.H) if theta is None \
            else np.asarray(theta, dtype=np.float64)
        self.mapping = mapping
        self.alpha = alpha
        self.k = k
        self.sigma = sigma
        # Validates theta
        head_aggregate(np.eye(self.H), self.theta)

    def apply(self, Z):
        """Aggregated distribution of the (H, m) logits `Z`."""
        Z = np.atleast_2d(Z)
        if Z.shape[0] != self.H:
            raise ShapeError("Got %d logit rows for %d heads" %
                             (Z.shape[0], self.H))
        dists = [apply_mapping(z, self.mapping, self.alpha, self.k,
                               self.sigma) for z in Z]
        return head_aggregate(dists, self.theta)


def draw_logits(family, size, rng):
    """Bounded iid logits.

    Parameters
    ----------
    family: str
        "uniform" (U[0, 1]), "gaussian" (standard normal clipped at +-3) or
        "spike" (U[0, 1] with one entry raised to `SPIKE_HEIGHT`).
    size: int or tuple
        Output shape; the spike is placed along the last axis.
    rng: np.random.Generator

    Returns
    -------
    Z: np.array
    """
    if family == "uniform":
        return rng.uniform(0, 1, size)
    if family == "gaussian":
        return np.clip(rng.standard_normal(size), -3, 3)
    if family == "spike":
        Z = rng.uniform(0, 1, size)
        Z = np.atleast_1d(Z)
        idx = rng.integers(Z.shape[-1], size=Z.shape[:-1])
        np.put_along_axis(Z, np.asarray(idx)[..., None], SPIKE_HEIGHT,
                          axis=-1)
        return Z
    raise ValueError("Unknown logit family %r, expected one of %s" %
                     (family, FAMILIES))


def _sweep_cell(family, n, spec, seed):
    rng = make_rng(seed)
    Z = draw_logits(family, (spec.H, n), rng)
    return dispersion_ratio(spec.apply(Z), n)


def dispersion_sweep(family="uniform", ns=global_config.dispersion.ns,
                     mapping="softmax", seeds=global_config.dispersion.seeds,
                     alpha=global_config.attention.alpha, k=8, sigma=1.,
                     heads=1, theta=None, seed=0,
                     n_jobs=global_config.n_jobs):
    """Entropy ratio H(p) / log(n) of a mapping as the length grows.

    Parameters
    ----------
    family: str
        Logit family (see `draw_logits`).
    ns: list of int
        Lengths, each >= 2.
    mapping: str
        See `apply_mapping`.
    seeds: int
        Draws per length.
    alpha, k, sigma: float, int, float
        Mapping parameters.
    heads: int
        Heads aggregated per draw.
    theta: np.array(heads) or None
        Aggregation weights (uniform if None).
    seed: int
        First seed; draw s of every length uses seed + s.
    n_jobs: int
        joblib workers over (length, seed) cells.

    Returns
    -------
    curve: pd.DataFrame
        Columns n, family, mapping, alpha, k, mean_ratio, std_ratio, seeds.
    """
    spec = AggregationSpec(heads, theta, mapping, alpha, k, sigma)
    ns = [int(n) for n in ns]
    for n in ns:
        if n < 2:
            raise DomainError("Every length must be >= 2, got %d" % n)
    cells = [(n, seed + s) for n in ns for s in range(seeds)]
    logging.info("Dispersion sweep: %s logits, %s mapping, %d cells" %
                 (family, mapping, len(cells)))
    ratios = Parallel(n_jobs=n_jobs)(delayed(_sweep_cell)(
        family, n, spec, cell_seed) for n, cell_seed in cells)
    ratios = np.asarray(ratios).reshape(len(ns), seeds)
    rows = []
    for n, r in zip(ns, ratios):
        rows.append({
            "n": n,
            "family": family,
            "mapping": mapping,
            "alpha": alpha if mapping in ("entmax", "entprior") else np.nan,
            "k": k if mapping == "topk" else np.nan,
            "mean_ratio": r.mean(),
            "std_ratio": r.std(),
            "seeds": seeds})
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def mask_token_counts(mask, n_visible, config, skip_prefix=0):
    """Attended and causally visible tokens per kv head.

    Attended tokens of row (i, r) are B per routed visible chunk plus the
    diagonal branch; visible tokens are i + 1.

    Returns
    -------
    attended: np.array(h_kv)
    visible: int
    support: np.array(h_kv)
        Mean routed chunks per row.
    """
    n = mask.shape[0]
    rows = np.arange(skip_prefix, n)
    if len(rows) == 0:
        raise TraceError("No query position left after skipping %d" %
                         skip_prefix)
    B = config.block_size
    in_view = np.arange(mask.n_chunks)[None, :] < n_visible[rows, None]
    routed = (mask.to_dense()[rows] & in_view[:, None, :]).sum(axis=-1)
    n_diag = rows + 1 - n_visible[rows] * B
    attended = (routed * B + n_diag[:, None]).sum(axis=0)
    return attended, int((rows + 1).sum()), routed.mean(axis=0)


def sparsity_stats(traces, skip_prefix=0):
    """Per-layer sparsity of routed attention.

    Sparsity is 1 - attended tokens / causally visible tokens, summed over
    the query positions of every kv head.

    Parameters
    ----------
    traces: `dashattn.attend.Trace` or list of them
        One trace per simulated layer.
    skip_prefix: int
        Leading query positions left out (short rows are dense anyway).

    Returns
    -------
    table: pd.DataFrame
        Columns layer, kv_head, attended, visible, sparsity, mean_support;
        one row per (layer, kv head) and a kv_head = "mean" row per layer.
    """
    if isinstance(traces, Trace):
        traces = [traces]
    if traces is None or len(traces) == 0:
        raise TraceError("No trace to measure")
    rows = []
    for layer, trace in enumerate(traces):
        if not isinstance(trace, Trace) or trace.routes is None:
            raise TraceError("Layer %d holds no routing" % layer)
        attended, visible, support = mask_token_counts(
            trace.routes.mask, trace.routes.n_visible, trace.config,
            skip_prefix)
        for r in range(len(attended)):
            rows.append({"layer": layer, "kv_head": r,
                         "attended": int(attended[r]), "visible": visible,
                         "sparsity": 1 - attended[r] / float(visible),
                         "mean_support": support[r]})
        rows.append({"layer": layer, "kv_head": "mean",
                     "attended": int(attended.sum()),
                     "visible": visible * len(attended),
                     "sparsity": 1 - attended.sum() /
                     float(visible * len(attended)),
                     "mean_support": support.mean()})
        logging.info("Layer %d: sparsity %.4f" % (layer, rows[-1]["sparsity"]))
    return pd.DataFrame(rows, columns=["layer", "kv_head", "attended",
                                       "visible", "sparsity",
                                       "mean_support"])


def density_sweep(Q, K, q_bar, gammas, config, skip_prefix=0):
    """Measured sparsity of the routing as a function of the routing scale.

    Returns
    -------
    curve: pd.DataFrame
        Columns gamma, sparsity, mean_support.
    """
    summaries = summarize_all(K, q_bar, config)
    rows = []
    for gamma in gammas:
        c = config.replace(gamma=gamma)
        table = route_all(Q, summaries, c)
        attended, visible, support = mask_token_counts(
            table.mask, table.n_visible, c, skip_prefix)
        rows.append({"gamma": gamma,
                     "sparsity": 1 - attended.sum() /
                     float(visible * len(attended)),
                     "mean_support": support.mean()})
    return pd.DataFrame(rows, columns=["gamma", "sparsity", "mean_support"])
