#!/usr/bin/env python
#
# Run me as follows:
# cd tests/
# pytest

from types import ModuleType
import os

import numpy as np
import numpy.testing as npt
from numpy.testing import assert_raises

# dashattn imports
import dashattn
from dashattn import input_output as io
from dashattn.exceptions import ConfigError, ShapeError, VerificationError
from dashattn.route import n_visible_chunks
from dashattn.run import RunConfig

# Global vars
fake_module_name = "fake_name_module"


def _run_config(**kwargs):
    params = dict(n=128, d_h=8, h_q=4, h_kv=2, block_size=16, seed=11)
    params.update(kwargs)
    return RunConfig.from_dict(params)


def test_get_attention_module():
    # Check that it returns modules for all the existing attention modes
    for mode in dashattn.run.MODES:
        module = dashattn.run.get_attention_module(mode)
        assert isinstance(module, ModuleType)
        assert module.algo_id == mode

    # Check that a RuntimeError is raised when calling it with non-existent
    # mode id
    assert_raises(RuntimeError,
                  dashattn.run.get_attention_module, fake_module_name)

    # The interface is not a mode
    assert_raises(RuntimeError,
                  dashattn.run.get_attention_module, "interface")


def test_run_config():
    rc = _run_config(mode="topk", k=3)
    assert rc.attn.n == 128 and rc.attn.g_q == 2
    assert rc.mode == "topk" and rc.k == 3
    assert rc.form == "bias" and not rc.verify and rc.out is None
    assert rc.replace(seed=12).seed == 12
    assert RunConfig.from_dict(rc.to_dict()).to_dict() == rc.to_dict()


def test_run_config_errors():
    assert_raises(ConfigError, _run_config, heads=3)
    assert_raises(ConfigError, _run_config, mode="sliding")
    assert_raises(ConfigError, _run_config, mode="topk", k=0)
    assert_raises(ConfigError, _run_config, form="additive")
    assert_raises(ConfigError, _run_config, seed=-1)
    assert_raises(ConfigError, _run_config, n="many")
    assert_raises(ConfigError, _run_config, h_q=3)


def test_run_config_json(tmpdir):
    path = str(tmpdir.join("run.json"))
    io.write_json(path, _run_config(mode="dense").to_dict())
    assert RunConfig.from_json(path).mode == "dense"
    io.write_json(path, [1, 2])
    assert_raises(ConfigError, RunConfig.from_json, path)
    assert_raises(ConfigError, RunConfig.from_json,
                  str(tmpdir.join("none.json")))


def test_dense_is_deterministic(tmpdir):
    paths = [str(tmpdir.join("o%d.tnsr" % k)) for k in range(2)]
    for path in paths:
        dashattn.process(_run_config(mode="dense", out=path))
    with open(paths[0], "rb") as f0, open(paths[1], "rb") as f1:
        assert f0.read() == f1.read()
    stats = io.read_json(paths[0] + ".stats.json")
    assert stats["mode"] == "dense"
    assert stats["measured_sparsity"] == 0
    assert stats["blocks_visited"] == stats["blocks_visible"]


def test_run_modes_verify():
    for mode in dashattn.run.MODES:
        O, stats = dashattn.process(_run_config(mode=mode, k=2, verify=True,
                                                gamma=4.))
        assert O.shape == (128, 4, 8)
        assert stats["max_abs_err"] < 1e-9
        for key in ("n", "B", "blocks_visible", "blocks_visited",
                    "measured_sparsity", "mean_support", "wall_ms"):
            assert key in stats
        assert 0 <= stats["measured_sparsity"] < 1


def test_run_forms_verify():
    for form in ("prior", "uniform"):
        O, stats = dashattn.process(_run_config(form=form, sigma=2.,
                                                verify=True))
        assert stats["max_abs_err"] < 1e-9


def test_near_dense_routing():
    O, stats = dashattn.process(_run_config(gamma=1e-9, verify=True))
    assert stats["measured_sparsity"] == 0
    dense, _ = dashattn.process(_run_config(mode="dense"))
    npt.assert_allclose(O, dense, atol=1e-9)


def test_topk_support():
    rc = _run_config(mode="topk", k=3)
    O, stats = dashattn.process(rc)
    n_vis = n_visible_chunks(np.arange(128), rc.attn)
    npt.assert_allclose(stats["mean_support"], np.minimum(n_vis, 3).mean())


def test_given_inputs():
    rc = _run_config(mode="dense")
    Q, K, V, q_bar = dashattn.utils.random_inputs(rc.attn, 0)
    O, _ = dashattn.process(rc, Q, K, V, q_bar)
    npt.assert_allclose(O, dashattn.attend.dense_attention(Q, K, V))
    assert_raises(ShapeError, dashattn.process, rc, Q[:, :2], K, V, q_bar)


def test_verification_failure(tmpdir):
    out = str(tmpdir.join("o.tnsr"))
    tol = dashattn.config.verify_tol
    dashattn.config.verify_tol = 1e-300
    try:
        assert_raises(VerificationError, dashattn.process,
                      _run_config(n=64, verify=True, out=out))
    finally:
        dashattn.config.verify_tol = tol
    assert os.path.isfile(out + ".stats.json")
    assert not os.path.isfile(out)
