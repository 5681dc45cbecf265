"""
Reverse-mode gradients of the attention pipeline and the finite-difference
harness that checks them.

The backward pass is written by hand, stage by stage, with the routing
support frozen (the pipeline is only piecewise smooth). Operators available
to `gradcheck` register themselves by subclassing `GradOp`.

.. autosummary::
    :toctree: generated/

    GradBundle
    pipeline_backward
    summarize_chunk_backward
    finite_diff_grad
    gradcheck
    gradcheck_trace
    gradcheck_suite
    qbar_sensitivity
"""
import logging

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from dashattn import config as global_config
from dashattn.attend import Trace, pipeline_forward, topk_attention
from dashattn.entmax import entmax, entmax_vjp
from dashattn.exceptions import DomainError, ShapeError, TraceError
from dashattn.numkit import make_rng
from dashattn.summarize import AttnConfig, summarize_chunk

STATUS_PASS = "pass"
STATUS_FAIL = "fail"
STATUS_SKIPPED = "skipped_boundary"
REPORT_COLUMNS = ["op", "seed", "param", "max_rel_err", "status"]


class GradBundle(object):
    """Cotangents of the pipeline inputs.

    Attributes
    ----------
    dQ, dK, dV: np.array
        Same shapes as Q, K, V.
    dq_bar: np.array(h_kv, d_h)
    extras: dict
        Intermediate cotangents: "weights" (n, h_kv, T_c) for the merged
        routing weights, "logits" (n, h_q, T_c) and "summaries"
        (T_c, h_kv, d_h).
    """
    def __init__(self, dQ, dK, dV, dq_bar, extras=None):
        self.dQ = dQ
        self.dK = dK
        self.dV = dV
        self.dq_bar = dq_bar
        self.extras = extras or {}

    def as_dict(self):
        return {"Q": self.dQ, "K": self.dK, "V": self.dV,
                "q_bar": self.dq_bar}


def summarize_chunk_backward(K_chunk, q_bar_r, dk_bar, summary_mode="local"):
    """Cotangents of `summarize_chunk` inputs.

    Parameters
    ----------
    K_chunk: np.array(B, d_h)
    q_bar_r: np.array(d_h)
    dk_bar: np.array(d_h)
        Cotangent of the summary.
    summary_mode: str
        "mean" ignores the summary query.

    Returns
    -------
    dK_chunk: np.array(B, d_h)
    dq_bar_r: np.array(d_h)
    """
    B, d_h = K_chunk.shape
    if summary_mode == "mean":
        return np.tile(dk_bar / B, (B, 1)), np.zeros(d_h)
    scale = 1. / np.sqrt(d_h)
    u = np.dot(K_chunk, q_bar_r) * scale
    a = np.exp(u - u.max())
    a /= a.sum()
    da = np.dot(K_chunk, dk_bar)
    du = a * (da - np.dot(a, da))
    dK_chunk = np.outer(a, dk_bar) + np.outer(du, q_bar_r) * scale
    return dK_chunk, np.dot(du, K_chunk) * scale


def _entmax_vjp_rows(P, alpha, U):
    """`entmax_vjp` applied along the last axis of stacked distributions."""
    support = P > 0
    s = np.zeros_like(P)
    s[support] = P[support] ** (2 - alpha)
    total = s.sum(axis=-1, keepdims=True)
    proj = np.sum(s * U, axis=-1, keepdims=True) / np.where(total > 0,
                                                            total, 1)
    return s * U - s * proj


def _stage2_row_backward(trace, i, r, dO, dQ, dK, dV):
    """Backward of one (query, kv head) row of Stage 2.

    Returns the cotangent of the merged chunk weights on the routed chunks
    (None when nothing upstream depends on them).
    """
    c = trace.config
    B, g_q = c.block_size, c.g_q
    scale = 1. / np.sqrt(c.d_h)
    heads = slice(r * g_q, (r + 1) * g_q)
    routes = trace.routes
    active = np.fromiter(routes.mask.iterate_active(i, r), dtype=np.int64)
    start = int(routes.n_visible[i]) * B
    routed = (active[:, None] * B + np.arange(B)[None, :]).ravel()
    idx = np.concatenate((routed, np.arange(start, i + 1)))
    offsets = np.concatenate(
        (np.repeat(trace.chunk_offsets[i, r, active], B),
         np.full(i + 1 - start, trace.diag_offsets[i, r])))

    Qi = trace.Q[i, heads]
    Kt, Vt = trace.K[idx, r], trace.V[idx, r]
    S = np.dot(Qi, Kt.T) * scale + offsets
    P = np.exp(S - S.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)

    dOi = dO[i, heads]
    dP = np.dot(dOi, Vt.T)
    ds = P * (dP - np.sum(P * dP, axis=1, keepdims=True))
    dV[idx, r] += np.dot(P.T, dOi)
    dQ[i, heads] += np.dot(ds, Kt) * scale
    dK[idx, r] += np.dot(ds.T, Qi) * scale

    if trace.form == "uniform" or len(active) == 0:
        return None
    token = ds.sum(axis=0)
    per_chunk = token[:len(routed)].reshape(len(active), B).sum(axis=1)
    w = routes.weights[i, r, active]
    logw = np.log(w)
    if trace.form == "bias":
        dlogw = (per_chunk - per_chunk.mean()) / c.sigma
    else:
        lam = routes.lam[i, r]
        dy = per_chunk.sum() * (1 - lam) - token[len(routed):].sum() * lam
        a = per_chunk - dy / len(active)
        e = np.exp(logw / c.sigma - (logw / c.sigma).max())
        e /= e.sum()
        dlogw = (a - e * a.sum()) / c.sigma
    return active, dlogw / w


def pipeline_backward(trace, dO):
    """Gradients of the pipeline inputs given the output cotangent.

    Parameters
    ----------
    trace: `dashattn.attend.Trace`
        Trace of the forward pass (bias, prior or uniform form).
    dO: np.array(n, h_q, d_h)
        Cotangent of the output.

    Returns
    -------
    grads: `GradBundle`
    """
    if not isinstance(trace, Trace):
        raise TraceError("Expected a forward trace, got %s" %
                         type(trace).__name__)
    trace.check_fresh()
    dO = np.asarray(dO, dtype=np.float64)
    if dO.shape != trace.O.shape:
        raise ShapeError("dO has shape %s, expected %s" %
                         (dO.shape, trace.O.shape))
    c = trace.config
    routes = trace.routes
    dQ = np.zeros_like(trace.Q)
    dK = np.zeros_like(trace.K)
    dV = np.zeros_like(trace.V)
    dW = np.zeros_like(routes.weights)

    # Stage 2
    for r in range(c.h_kv):
        for i in range(c.n):
            res = _stage2_row_backward(trace, i, r, dO, dQ, dK, dV)
            if res is not None:
                active, dw = res
                dW[i, r, active] = dw

    # Stage 1: group mean, entmax, chunk logits
    scale = 1. / np.sqrt(c.d_h)
    dP = np.repeat(dW / c.g_q, c.g_q, axis=1)
    dZ = _entmax_vjp_rows(routes.probs, c.alpha, dP)
    k_bar = np.repeat(trace.summaries.summaries, c.g_q, axis=1)
    dQ += c.gamma * scale * np.einsum("ihc,chd->ihd", dZ, k_bar)
    dk_bar = c.gamma * scale * np.einsum("ihc,ihd->chd", dZ, trace.Q)
    dk_bar = dk_bar.reshape(routes.n_chunks, c.h_kv, c.g_q,
                            c.d_h).sum(axis=2)

    # Stage 0
    dq_bar = np.zeros_like(trace.q_bar)
    B = c.block_size
    for ch in range(routes.n_chunks):
        rows = slice(ch * B, (ch + 1) * B)
        for r in range(c.h_kv):
            dKc, dqb = summarize_chunk_backward(trace.K[rows, r],
                                                trace.q_bar[r],
                                                dk_bar[ch, r],
                                                c.summary_mode)
            dK[rows, r] += dKc
            dq_bar[r] += dqb
    return GradBundle(dQ, dK, dV, dq_bar,
                      {"weights": dW, "logits": dZ, "summaries": dk_bar})


def finite_diff_grad(f, x, h=global_config.grad.fd_step, indices=None):
    """Central finite differences of a scalar map.

    Parameters
    ----------
    f: callable
        Maps a flat vector to a float.
    x: np.array
        Point of evaluation (flattened).
    h: float > 0
        Step.
    indices: array_like or None
        Coordinates to differentiate (all if None).

    Returns
    -------
    g: np.array
        One entry per requested coordinate.
    """
    if not h > 0:
        raise DomainError("The step must be positive")
    x = np.array(x, dtype=np.float64).ravel()
    if indices is None:
        indices = np.arange(x.size)
    g = np.zeros(len(indices))
    for k, j in enumerate(indices):
        orig = x[j]
        x[j] = orig + h
        f_plus = f(x.copy())
        x[j] = orig - h
        f_minus = f(x.copy())
        x[j] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise DomainError("Non-finite evaluation at coordinate %d" % j)
        g[k] = (f_plus - f_minus) / (2 * h)
    return g


def relative_error(analytic, numeric, scale=None):
    """Largest entrywise relative error.

    Entries far below the gradient's own magnitude are compared against
    1% of that magnitude instead of their own size.
    """
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    if scale is None:
        scale = max(np.abs(analytic).max(initial=0),
                    np.abs(numeric).max(initial=0))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)),
                       max(1e-2 * scale, 1e-12))
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0))


# All available gradient-checked operators
gradops_registry = {}


class MetaGradOp(type):
    """Meta-class to register the available gradient operators."""
    def __new__(meta, name, bases, class_dict):
        cls = type.__new__(meta, name, bases, class_dict)
        if name != "GradOp":
            gradops_registry[cls.get_id()] = cls
        return cls


class GradOp(object, metaclass=MetaGradOp):
    """Base class of every operator known to `gradcheck`.

    Subclasses draw their inputs in `make_inputs`, evaluate in `forward`
    and return analytic cotangents in `backward`. `margin` reports how far
    the inputs sit from a support change of any entmax involved.
    """
    in_default_suite = True

    def __init__(self, seed, inputs=None):
        self.seed = seed
        self.rng = make_rng(seed)
        self.inputs = self.make_inputs() if inputs is None else inputs

    @classmethod
    def get_id(cls):
        raise NotImplementedError("This method must return a string "
                                  "identifier of the operator")

    def make_inputs(self):
        raise NotImplementedError()

    def forward(self, **inputs):
        raise NotImplementedError()

    def backward(self, dout):
        raise NotImplementedError()

    def margin(self):
        return np.inf

    def check(self, fd_step=global_config.grad.fd_step,
              rel_tol=global_config.grad.rel_tol,
              delta=global_config.grad.boundary_delta,
              max_coords=global_config.grad.max_coords):
        """Compares `backward` with central finite differences.

        Returns
        -------
        rows: list of dict
            One report entry per parameter.
        """
        op_id = self.get_id()
        if self.margin() < delta:
            logging.warning("%s (seed %d) sits within %g of a support "
                            "boundary, skipping" % (op_id, self.seed, delta))
            return [dict(op=op_id, seed=self.seed, param=name,
                         max_rel_err=None, status=STATUS_SKIPPED)
                    for name in self.inputs]
        U = self.rng.standard_normal(np.shape(self.forward(**self.inputs)))
        analytic = self.backward(U)
        rows = []
        for name, value in self.inputs.items():
            value = np.asarray(value, dtype=np.float64)

            def f(flat, name=name, shape=value.shape):
                params = dict(self.inputs)
                params[name] = flat.reshape(shape)
                return float(np.sum(U * self.forward(**params)))

            if value.size > max_coords:
                idx = np.sort(self.rng.choice(value.size, max_coords,
                                              replace=False))
            else:
                idx = np.arange(value.size)
            numeric = finite_diff_grad(f, value, fd_step, idx)
            full = np.asarray(analytic[name]).ravel()
            err = relative_error(full[idx], numeric,
                                 scale=max(np.abs(full).max(initial=0),
                                           np.abs(numeric).max(initial=0)))
            rows.append(dict(op=op_id, seed=self.seed, param=name,
                             max_rel_err=err,
                             status=STATUS_PASS if err < rel_tol
                             else STATUS_FAIL))
        return rows


class EntmaxOp(GradOp):
    """alpha = 1.5 entmax of a random 6-vector."""
    alpha = 1.5
    dim = 6

    @classmethod
    def get_id(cls):
        return "entmax"

    def make_inputs(self):
        return {"z": self.rng.standard_normal(self.dim)}

    def forward(self, z):
        return entmax(z, self.alpha).p

    def backward(self, dout):
        z = self.inputs["z"]
        return {"z": entmax_vjp(z, self.alpha, entmax(z, self.alpha), dout)}

    def margin(self):
        res = entmax(self.inputs["z"], self.alpha)
        return float(np.min(np.abs((self.alpha - 1) * self.inputs["z"] -
                                   res.tau)))


class SparsemaxOp(EntmaxOp):
    """Sparsemax (alpha = 2) of a random 6-vector."""
    alpha = 2.

    @classmethod
    def get_id(cls):
        return "sparsemax"


class EntmaxBoundaryOp(EntmaxOp):
    """Entmax at a point where one coordinate sits exactly on the
    threshold; always reported as skipped."""
    in_default_suite = False

    @classmethod
    def get_id(cls):
        return "entmax_boundary"

    def make_inputs(self):
        return {"z": np.array([2., 0., -1.]) +
                1e-6 * self.rng.standard_normal(3)}


class SummarizeOp(GradOp):
    """Local chunk summary of a random 8 x 4 chunk."""

    @classmethod
    def get_id(cls):
        return "summarize"

    def make_inputs(self):
        return {"K_chunk": self.rng.standard_normal((8, 4)),
                "q_bar": self.rng.standard_normal(4)}

    def forward(self, K_chunk, q_bar):
        return summarize_chunk(K_chunk, q_bar)

    def backward(self, dout):
        dK, dq = summarize_chunk_backward(self.inputs["K_chunk"],
                                          self.inputs["q_bar"], dout)
        return {"K_chunk": dK, "q_bar": dq}


class PipelineOp(GradOp):
    """Full pipeline at n = 64, B = 8, h_q = 2, h_kv = 1, d_h = 4,
    alpha = 1.5, sigma = 10, drawn away from routing boundaries."""
    form = "bias"
    max_draws = 200

    @classmethod
    def get_id(cls):
        return "pipeline"

    def __init__(self, seed, inputs=None, config=None, form=None):
        if config is None:
            config = AttnConfig(n=64, d_h=4, h_q=2, h_kv=1, block_size=8,
                                alpha=1.5, gamma=1.0, sigma=10.,
                                include_prev_chunk=True,
                                summary_mode="local")
        self.config = config
        if form is not None:
            self.form = form
        super(PipelineOp, self).__init__(seed, inputs)

    def make_inputs(self):
        c = self.config
        delta = global_config.grad.boundary_delta
        for _ in range(self.max_draws):
            inputs = {"Q": self.rng.standard_normal((c.n, c.h_q, c.d_h)),
                      "K": self.rng.standard_normal((c.n, c.h_kv, c.d_h)),
                      "V": self.rng.standard_normal((c.n, c.h_kv, c.d_h)),
                      "q_bar": self.rng.standard_normal((c.h_kv, c.d_h))}
            _, trace = pipeline_forward(config=c, form=self.form, n_jobs=1,
                                        **inputs)
            if trace.routes.margin() >= delta:
                return inputs
        logging.warning("No draw of %s cleared the boundary band" %
                        self.get_id())
        return inputs

    def forward(self, Q, K, V, q_bar):
        return pipeline_forward(Q, K, V, q_bar, self.config, form=self.form,
                                n_jobs=1)[0]

    def backward(self, dout):
        _, trace = pipeline_forward(config=self.config, form=self.form,
                                    n_jobs=1, **self.inputs)
        return pipeline_backward(trace, dout).as_dict()

    def margin(self):
        _, trace = pipeline_forward(config=self.config, form=self.form,
                                    n_jobs=1, **self.inputs)
        return trace.routes.margin()


class PriorPipelineOp(PipelineOp):
    """Same as `PipelineOp` with Stage 2 evaluated through the prior g."""
    form = "prior"

    @classmethod
    def get_id(cls):
        return "pipeline_prior"


def default_ops():
    """Identifiers checked when no operator list is given."""
    return sorted(k for k, v in gradops_registry.items()
                  if v.in_default_suite)


def gradcheck(op_id, seed, fd_step=global_config.grad.fd_step,
              rel_tol=global_config.grad.rel_tol,
              delta=global_config.grad.boundary_delta,
              max_coords=global_config.grad.max_coords):
    """Checks the analytic gradient of a registered operator.

    Parameters
    ----------
    op_id: str
        Key of `gradops_registry`.
    seed: int
        Seed of the inputs.
    fd_step: float
        Finite-difference step.
    rel_tol: float
        Largest relative error that passes.
    delta: float
        Boundary band; inputs closer to a support change are skipped.
    max_coords: int
        Coordinates sampled per parameter.

    Returns
    -------
    report: list of dict
        Entries {op, seed, param, max_rel_err, status}, status being
        "pass", "fail" or "skipped_boundary".
    """
    try:
        op_class = gradops_registry[op_id]
    except KeyError:
        raise RuntimeError("Operator %s can not be found in dashattn!" %
                           op_id)
    report = op_class(seed).check(fd_step, rel_tol, delta, max_coords)
    for row in report:
        logging.info("gradcheck %s seed=%d %s: %s (%s)" %
                     (row["op"], row["seed"], row["param"], row["status"],
                      row["max_rel_err"]))
    return report


def gradcheck_trace(trace, seed=0, fd_step=global_config.grad.fd_step,
                    rel_tol=global_config.grad.rel_tol,
                    delta=global_config.grad.boundary_delta,
                    max_coords=global_config.grad.max_coords):
    """`gradcheck` of the pipeline at the inputs stored in a trace.

    Parameters
    ----------
    trace: `dashattn.attend.Trace`
        E.g. from `dashattn.io.load_trace`.
    seed: int
        Seed of the output projection and of the sampled coordinates.

    Returns
    -------
    report: pd.DataFrame
        Columns in `REPORT_COLUMNS` order.
    """
    if not isinstance(trace, Trace):
        raise TraceError("Expected a forward trace, got %s" %
                         type(trace).__name__)
    trace.check_fresh()
    inputs = {"Q": trace.Q, "K": trace.K, "V": trace.V, "q_bar": trace.q_bar}
    op = PipelineOp(seed, inputs=inputs, config=trace.config, form=trace.form)
    return pd.DataFrame(op.check(fd_step, rel_tol, delta, max_coords),
                        columns=REPORT_COLUMNS)


def gradcheck_suite(ops=None, seeds=(0,), n_jobs=global_config.n_jobs,
                    **kwargs):
    """Runs `gradcheck` over every (operator, seed) pair.

    Parameters
    ----------
    ops: list of str or None
        Operator identifiers (`default_ops()` if None).
    seeds: iterable of int
    n_jobs: int
        joblib workers over the pairs.
    kwargs: dict
        Tolerances passed to `gradcheck`.

    Returns
    -------
    report: pd.DataFrame
        One row per (operator, seed, parameter), columns in
        `REPORT_COLUMNS` order.
    """
    if ops is None:
        ops = default_ops()
    for op_id in ops:
        if op_id not in gradops_registry:
            raise RuntimeError("Operator %s can not be found in dashattn!" %
                               op_id)
    pairs = [(op_id, seed) for op_id in ops for seed in seeds]
    reports = Parallel(n_jobs=n_jobs)(delayed(gradcheck)(
        op_id, seed, **kwargs) for op_id, seed in pairs)
    return pd.DataFrame([row for report in reports for row in report],
                        columns=REPORT_COLUMNS)


def qbar_sensitivity(Q, K, V, q_bar, config, mode="dash", k=None, U=None,
                     h=global_config.grad.fd_step):
    """Finite-difference gradient of sum(U * O) w.r.t. the summary queries.

    Under entmax routing the output reacts smoothly to q_bar; under top-k
    routing the selection is piecewise constant and the gradient vanishes.

    Parameters
    ----------
    Q, K, V, q_bar: np.array
        Pipeline inputs.
    config: `dashattn.summarize.AttnConfig`
    mode: str
        "dash" or "topk".
    k: int
        Chunk budget of the top-k path.
    U: np.array or None
        Output projection (all ones if None).
    h: float
        Finite-difference step.

    Returns
    -------
    grad: np.array(h_kv, d_h)
    """
    if U is None:
        U = np.ones(Q.shape)

    def f(flat):
        qb = flat.reshape(np.shape(q_bar))
        if mode == "topk":
            O = topk_attention(Q, K, V, qb, config, k, n_jobs=1)[0]
        else:
            O = pipeline_forward(Q, K, V, qb, config, n_jobs=1)[0]
        return float(np.sum(U * O))

    return finite_diff_grad(f, q_bar, h).reshape(np.shape(q_bar))
