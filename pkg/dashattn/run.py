"""
This module contains the functions that run one attention mode end to end:
run configuration, mode lookup, optional verification against the
row-by-row oracle and result persistence.
"""
import logging
import time

import numpy as np

import dashattn
from dashattn import input_output as io
from dashattn import utils
from dashattn.attend import STAGE2_FORMS
from dashattn.exceptions import ConfigError, VerificationError
from dashattn.summarize import AttnConfig
import dashattn.algorithms as algorithms

MODES = ("dense", "dash", "topk")


class RunConfig(object):
    """Flat run configuration: every `AttnConfig` field plus the run knobs.

    Attributes
    ----------
    attn: `dashattn.summarize.AttnConfig`
    seed: int
        Seed of the random inputs.
    mode: str
        "dense", "dash" or "topk".
    k: int
        Chunk budget of the top-k mode.
    form: str
        Stage-2 form of the dash mode.
    verify: bool
        Whether to compare against the row-by-row oracle.
    n_jobs: int
    out: str or None
        Output tensor path.
    """
    _run_fields = {"seed": 0,
                   "mode": dashattn.config.default_mode,
                   "k": dashattn.config.attention.topk,
                   "form": "bias",
                   "verify": False,
                   "n_jobs": dashattn.config.n_jobs,
                   "out": None}

    def __init__(self, attn, **kwargs):
        unknown = set(kwargs) - set(self._run_fields)
        if unknown:
            raise ConfigError("Unknown run parameters: %s" % sorted(unknown))
        self.attn = attn
        for key, default in self._run_fields.items():
            setattr(self, key, kwargs.get(key, default))
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError("Unknown mode %r, expected one of %s" %
                              (self.mode, MODES))
        if self.mode == "topk" and not int(self.k) >= 1:
            raise ConfigError("The top-k mode needs k >= 1")
        if self.form not in STAGE2_FORMS:
            raise ConfigError("Unknown Stage-2 form %r" % self.form)
        if int(self.seed) < 0 or int(self.seed) >= 2 ** 64:
            raise ConfigError("The seed must fit in 64 unsigned bits")

    @classmethod
    def from_dict(cls, params):
        """Splits a flat dictionary into attention and run fields; unknown
        keys raise `ConfigError`."""
        params = dict(params)
        run = dict((k, params.pop(k)) for k in list(params)
                   if k in cls._run_fields)
        try:
            attn = AttnConfig.from_dict(params)
        except (TypeError, ValueError) as e:
            raise ConfigError("Bad attention parameters: %s" % e)
        return cls(attn, **run)

    @classmethod
    def from_json(cls, path):
        try:
            params = io.read_json(path)
        except (OSError, ValueError) as e:
            raise ConfigError("Can't read run configuration %s: %s" %
                              (path, e))
        if not isinstance(params, dict):
            raise ConfigError("The run configuration must be a JSON object")
        return cls.from_dict(params)

    def replace(self, **kwargs):
        """Copy with some attention or run fields changed."""
        params = self.to_dict()
        params.update(kwargs)
        return RunConfig.from_dict(params)

    def to_dict(self):
        params = self.attn.to_dict()
        for key in self._run_fields:
            params[key] = getattr(self, key)
        return params


def get_attention_module(mode):
    """Obtains the attention module given a mode identificator.

    Parameters
    ----------
    mode: str
        Mode identificator (e.g., dense, dash, topk).

    Returns
    -------
    module: object
        Object containing the selected attention module.
    """
    module = getattr(algorithms, str(mode), None)
    if not hasattr(module, "algo_id"):
        raise RuntimeError("Attention mode %s can not be found in dashattn!" %
                           mode)
    return module


def get_mode_config(run_config):
    """Per-mode configuration, the defaults of the mode's config.py updated
    with the run configuration."""
    module = get_attention_module(run_config.mode)
    config = dict(module.config)
    if run_config.mode == "topk":
        config["k"] = int(run_config.k)
    elif run_config.mode == "dash":
        config["form"] = run_config.form
    return config


def process(run_config, Q=None, K=None, V=None, q_bar=None):
    """Main process to run one attention mode on one sequence.

    Parameters
    ----------
    run_config: `RunConfig`
        Mode, shapes, hyperparameters and seed.
    Q, K, V, q_bar: np.array or None
        Inputs; random standard normal tensors drawn from the seed when
        missing.

    Returns
    -------
    O: np.array(n, h_q, d_h)
        Attention output.
    stats: dict
        Work statistics, wall time and, when verifying, `max_abs_err`.
    """
    attn = run_config.attn
    if Q is None or K is None or V is None or q_bar is None:
        rQ, rK, rV, rq = utils.random_inputs(attn, int(run_config.seed))
        Q = rQ if Q is None else Q
        K = rK if K is None else K
        V = rV if V is None else V
        q_bar = rq if q_bar is None else q_bar
    module = get_attention_module(run_config.mode)
    A = module.Attender(np.asarray(Q, dtype=np.float64),
                        np.asarray(K, dtype=np.float64),
                        np.asarray(V, dtype=np.float64),
                        np.asarray(q_bar, dtype=np.float64), attn,
                        n_jobs=int(run_config.n_jobs),
                        **get_mode_config(run_config))

    logging.info("Running %s attention on n=%d (B=%d)" %
                 (run_config.mode, attn.n, attn.block_size))
    start = time.perf_counter()
    O, stats = A.process()
    stats["mode"] = run_config.mode
    stats["wall_ms"] = (time.perf_counter() - start) * 1000.0

    if run_config.verify:
        err = utils.max_abs_diff(O, A.oracle())
        stats["max_abs_err"] = err
        logging.info("Max abs error against the oracle: %g" % err)
        if not err <= dashattn.config.verify_tol:
            if run_config.out is not None:
                io.write_json(run_config.out + ".stats.json", stats)
            raise VerificationError("Max abs error %g exceeds %g" %
                                    (err, dashattn.config.verify_tol))

    if run_config.out is not None:
        logging.info("Writing results in: %s" % run_config.out)
        io.write_tensor(run_config.out, O)
        io.write_json(run_config.out + ".stats.json", stats)
    return O, stats
