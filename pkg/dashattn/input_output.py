"""
These set of functions read and write the files produced and consumed by
dashattn: binary tensors, bit-packed block masks, traces, JSON reports and
CSV tables.

Tensor file layout (little-endian): the 8 magic bytes ``DASHTNSR``, a u32
version (1), a u8 dtype code (0 = f64, 1 = f32, 2 = u32), a u8 rank, rank
u64 dimensions and finally the row-major payload.
"""
import json
import logging
import os
import struct
import zipfile

import numpy as np

from dashattn import utils
from dashattn.exceptions import FormatError, TraceError

MAGIC = b"DASHTNSR"
FORMAT_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<u4")}
_HEADER = struct.Struct("<8sIBB")


def _dtype_code(dtype):
    for code, dt in DTYPE_CODES.items():
        if np.dtype(dtype) == dt.newbyteorder("="):
            return code
    raise FormatError("Unsupported tensor dtype %s" % dtype)


def encode_tensor(X):
    """Serializes an array into the tensor file format.

    Parameters
    ----------
    X: np.array
        float64, float32 or uint32 array of any rank up to 255.

    Returns
    -------
    blob: bytes
        Header followed by the little-endian payload.
    """
    X = np.asarray(X)
    code = _dtype_code(X.dtype)
    if X.ndim > 255:
        raise FormatError("Rank %d does not fit the header" % X.ndim)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, code, X.ndim) + \
        struct.pack("<%dQ" % X.ndim, *X.shape)
    payload = np.ascontiguousarray(X, dtype=DTYPE_CODES[code]).tobytes()
    return header + payload


def decode_tensor(blob):
    """Parses bytes in the tensor file format.

    Parameters
    ----------
    blob: bytes
        Contents of a tensor file.

    Returns
    -------
    X: np.array
        Writable array in native byte order.
    """
    if len(blob) < _HEADER.size:
        raise FormatError("Truncated tensor header")
    magic, version, code, ndim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError("Bad magic %r" % magic)
    if version != FORMAT_VERSION:
        raise FormatError("Unsupported tensor format version %d" % version)
    if code not in DTYPE_CODES:
        raise FormatError("Unknown dtype code %d" % code)
    offset = _HEADER.size
    if len(blob) < offset + 8 * ndim:
        raise FormatError("Truncated tensor dimensions")
    shape = struct.unpack_from("<%dQ" % ndim, blob, offset)
    offset += 8 * ndim
    dt = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.uint64)) * dt.itemsize
    if len(blob) - offset != expected:
        raise FormatError("Payload holds %d bytes, expected %d" %
                          (len(blob) - offset, expected))
    if expected == 0:
        return np.zeros(shape, dtype=dt.newbyteorder("="))
    X = np.frombuffer(blob, dtype=dt, offset=offset,
                      count=expected // dt.itemsize)
    return X.reshape(shape).astype(dt.newbyteorder("="))


def write_tensor(path, X):
    """Writes an array to `path` in the tensor file format."""
    with open(path, "wb") as f:
        f.write(encode_tensor(X))


def read_tensor(path):
    """Reads an array stored in the tensor file format."""
    with open(path, "rb") as f:
        return decode_tensor(f.read())


def write_mask(path, mask):
    """Writes the words of a `dashattn.route.BlockMask` as a u32 tensor of
    shape (n, h_kv, ceil(T_c / 32))."""
    write_tensor(path, mask.words)


def read_mask(path, n_chunks=None):
    """Reads a block mask written by `write_mask`.

    Parameters
    ----------
    path: str
        Path to the mask file.
    n_chunks: int
        Number of chunks T_c. If None, every bit of every word counts.

    Returns
    -------
    mask: `dashattn.route.BlockMask`
    """
    from dashattn.route import BlockMask
    words = read_tensor(path)
    if words.dtype != np.uint32 or words.ndim != 3:
        raise FormatError("A mask file holds a rank-3 u32 tensor")
    if n_chunks is None:
        n_chunks = 32 * words.shape[2]
    if words.shape[2] != -(-n_chunks // 32):
        raise FormatError("Mask width %d does not match %d chunks" %
                          (words.shape[2], n_chunks))
    mask = BlockMask(words, n_chunks)
    if n_chunks % 32 and np.any(words[..., -1] >> np.uint32(n_chunks % 32)):
        raise FormatError("Mask has bits set beyond chunk %d" % n_chunks)
    return mask


def write_json(path, obj):
    """Writes a JSON report."""
    utils.ensure_dir(os.path.dirname(os.path.abspath(path)))
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError("Object of type %s is not JSON serializable" %
                    type(obj).__name__)


def read_json(path):
    """Reads a JSON file."""
    with open(path, "r") as f:
        return json.load(f)


def write_csv(path, df):
    """Writes a results table without the pandas index."""
    utils.ensure_dir(os.path.dirname(os.path.abspath(path)))
    df.to_csv(path, index=False)
    logging.info("Results written in: %s" % path)


def save_trace(path, Q, K, V, q_bar, config, form="bias"):
    """Stores the inputs of a forward pass so its trace can be rebuilt.

    Parameters
    ----------
    path: str
        Output .npz file.
    Q, K, V: np.array
        Pipeline inputs.
    q_bar: np.array(h_kv, d_h)
        Summary queries.
    config: `dashattn.summarize.AttnConfig`
        Attention configuration.
    form: str
        Stage-2 form of the trace ("bias", "prior" or "uniform").
    """
    np.savez(path, Q=Q, K=K, V=V, q_bar=q_bar,
             config=json.dumps(config.to_dict()), form=form)


def load_trace(path):
    """Rebuilds a forward trace from a file written by `save_trace`.

    Returns
    -------
    O: np.array(n, h_q, d_h)
        Output of the rebuilt forward pass.
    trace: `dashattn.attend.Trace`
    """
    from dashattn.attend import pipeline_forward
    from dashattn.summarize import AttnConfig
    try:
        with np.load(path, allow_pickle=False) as data:
            Q, K, V = data["Q"], data["K"], data["V"]
            q_bar = data["q_bar"]
            config = AttnConfig.from_dict(json.loads(str(data["config"])))
            form = str(data["form"])
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as e:
        raise TraceError("Can't read trace %s: %s" % (path, e))
    return pipeline_forward(Q, K, V, q_bar, config, form=form)
