#!/usr/bin/env python
#
# Run me as follows:
# cd tests/
# pytest

import os
import struct

import numpy as np
import numpy.testing as npt
import pandas as pd
from numpy.testing import assert_raises

# dashattn imports
import dashattn
from dashattn import input_output as io
from dashattn.exceptions import FormatError, TraceError
from dashattn.route import BlockMask
from dashattn.summarize import AttnConfig


def test_tensor_header():
    X = np.arange(6, dtype=np.float64).reshape(2, 3)
    blob = io.encode_tensor(X)
    assert blob[:8] == b"DASHTNSR"
    version, code, rank = struct.unpack_from("<IBB", blob, 8)
    assert (version, code, rank) == (1, 0, 2)
    assert struct.unpack_from("<2Q", blob, 14) == (2, 3)
    assert len(blob) == 14 + 16 + 6 * 8


def test_tensor_dtypes(tmpdir):
    for X in (np.linspace(0, 1, 12).reshape(3, 4),
              np.ones((2, 2, 2), dtype=np.float32),
              np.arange(5, dtype=np.uint32),
              np.zeros((0, 3))):
        path = str(tmpdir.join("x.tnsr"))
        io.write_tensor(path, X)
        Y = io.read_tensor(path)
        assert Y.dtype == X.dtype
        npt.assert_array_equal(X, Y)


def test_tensor_unsupported_dtype():
    assert_raises(FormatError, io.encode_tensor, np.arange(3))


def test_decode_malformed():
    blob = io.encode_tensor(np.ones(4))
    assert_raises(FormatError, io.decode_tensor, blob[:10])
    assert_raises(FormatError, io.decode_tensor, b"NOTMAGIC" + blob[8:])
    assert_raises(FormatError, io.decode_tensor, blob[:-1])
    assert_raises(FormatError, io.decode_tensor, blob + b"\x00")
    bad_version = blob[:8] + struct.pack("<I", 2) + blob[12:]
    assert_raises(FormatError, io.decode_tensor, bad_version)
    bad_code = blob[:12] + struct.pack("<B", 7) + blob[13:]
    assert_raises(FormatError, io.decode_tensor, bad_code)


def test_mask_file(tmpdir):
    bits = np.zeros((3, 2, 40), dtype=bool)
    bits[0, 0, [0, 33, 39]] = True
    bits[2, 1, 5] = True
    mask = BlockMask.from_dense(bits)
    path = str(tmpdir.join("mask.tnsr"))
    io.write_mask(path, mask)
    assert io.read_mask(path, 40) == mask
    assert_raises(FormatError, io.read_mask, path, 80)
    # bits set beyond the last chunk
    assert_raises(FormatError, io.read_mask, path, 36)


def test_mask_file_wrong_type(tmpdir):
    path = str(tmpdir.join("mask.tnsr"))
    io.write_tensor(path, np.zeros((2, 2, 1)))
    assert_raises(FormatError, io.read_mask, path)


def test_json_and_csv(tmpdir):
    path = str(tmpdir.join("sub", "report.json"))
    io.write_json(path, {"err": np.float64(0.5), "rows": np.arange(2)})
    assert io.read_json(path) == {"err": 0.5, "rows": [0, 1]}
    csv = str(tmpdir.join("other", "table.csv"))
    io.write_csv(csv, pd.DataFrame({"a": [1, 2]}))
    assert os.path.isfile(csv)
    assert list(pd.read_csv(csv)["a"]) == [1, 2]


def test_trace_file(tmpdir):
    config = AttnConfig(n=32, d_h=4, h_q=2, h_kv=1, block_size=8)
    Q, K, V, q_bar = dashattn.utils.random_inputs(config, 5)
    path = str(tmpdir.join("trace.npz"))
    io.save_trace(path, Q, K, V, q_bar, config, form="prior")
    O, trace = io.load_trace(path)
    O2, _ = dashattn.attend.pipeline_forward(Q, K, V, q_bar, config,
                                             form="prior")
    npt.assert_array_equal(O, O2)
    assert trace.config == config
    assert trace.form == "prior"


def test_trace_file_missing(tmpdir):
    assert_raises(TraceError, io.load_trace, str(tmpdir.join("none.npz")))
