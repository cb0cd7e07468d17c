"""Binary tensor (MTEN) and model (MMDL) containers, plus key=value configs.

MTEN layout (little-endian)::

    b"MTEN" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 ndim | u32 dims[ndim] | data

MMDL layout::

    b"MMDL" | u8 version=1 | u32 config_len | config (utf-8 key=value lines)
    | u32 count | count x (u16 name_len | name | u64 offset | u64 length)
    | payload: concatenated MTEN blobs (offsets relative to payload start)

Tensor shapes live in each MTEN header, so the manifest is name -> byte range.
"""

import struct
from dataclasses import asdict, fields

import numpy as np

from .exceptions import ConfigurationError, FormatError
from .model import CouplingConfig, ModelState, NetworkConfig, param_shapes

MTEN_MAGIC = b"MTEN"
MMDL_MAGIC = b"MMDL"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode_tensor(arr):
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise ConfigurationError(f"MTEN supports float32/float64 only, got {arr.dtype}")
    code = _CODES[arr.dtype]
    header = MTEN_MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf, offset=0):
    """Decode one MTEN blob starting at ``offset``; returns ``(array, end_offset)``."""
    if buf[offset:offset + 4] != MTEN_MAGIC:
        raise FormatError("bad MTEN magic", offset)
    if len(buf) < offset + 7:
        raise FormatError("truncated MTEN header", len(buf))
    version, code, ndim = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported MTEN version {version}", offset + 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown MTEN dtype code {code}", offset + 5)
    pos = offset + 7
    if len(buf) < pos + 4 * ndim:
        raise FormatError("truncated MTEN dims", len(buf))
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated MTEN data: need {nbytes} bytes", len(buf))
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def save_tensor(path, arr):
    with open(path, "wb") as fh:
        fh.write(encode_tensor(arr))


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after MTEN tensor", end)
    return arr


# ---------------------------------------------------------------------------
# key=value configuration


def format_config(values):
    return "".join(f"{k}={_fmt(v)}\n" for k, v in values.items())


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if hasattr(v, "value"):
        return v.value
    return str(v)


def parse_config(text):
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_config_file(path):
    with open(path) as fh:
        return parse_config(fh.read())


def coerce(cls, values):
    """Build dataclass ``cls`` from string values, converting by field type."""
    kwargs = {}
    for f in fields(cls):
        if f.name not in values:
            continue
        raw = values[f.name]
        default = f.default
        if isinstance(default, bool):
            if str(raw).lower() not in ("true", "false", "1", "0"):
                raise ConfigurationError(f"{f.name}: expected true/false, got {raw!r}")
            kwargs[f.name] = str(raw).lower() in ("true", "1")
        elif isinstance(default, int):
            kwargs[f.name] = int(raw)
        elif isinstance(default, float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return cls(**kwargs)


def model_config_text(state):
    values = dict(asdict(state.net))
    values["strategy"] = state.coupling.strategy
    values["order"] = state.coupling.order
    return format_config(values)


# ---------------------------------------------------------------------------
# model files


def encode_model(state):
    config = model_config_text(state).encode()
    blobs = [(name.encode(), encode_tensor(arr)) for name, arr in state.params.items()]
    out = bytearray(MMDL_MAGIC + struct.pack("<B", VERSION))
    out += struct.pack("<I", len(config)) + config
    out += struct.pack("<I", len(blobs))
    offset = 0
    for name, blob in blobs:
        out += struct.pack("<H", len(name)) + name + struct.pack("<QQ", offset, len(blob))
        offset += len(blob)
    for _, blob in blobs:
        out += blob
    return bytes(out)


def decode_model(buf, expected=None):
    """Parse an MMDL buffer into a :class:`ModelState`.

    The stored tensors are checked against the shapes implied by the stored
    configuration (or by ``expected`` if given, an ``(NetworkConfig,
    CouplingConfig)`` pair); mismatches are reported per tensor name.
    """
    if buf[:4] != MMDL_MAGIC:
        raise FormatError("bad MMDL magic", 0)
    pos = 4

    def need(n, what):
        if len(buf) < pos + n:
            raise FormatError(f"truncated MMDL {what}", len(buf))

    need(5, "header")
    version, clen = struct.unpack_from("<BI", buf, pos)
    if version != VERSION:
        raise FormatError(f"unsupported MMDL version {version}", pos)
    pos += 5
    need(clen, "config")
    values = parse_config(buf[pos:pos + clen].decode())
    pos += clen
    need(4, "tensor count")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    index = []
    for _ in range(count):
        need(2, "manifest")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 16, "manifest")
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        off, length = struct.unpack_from("<QQ", buf, pos)
        pos += 16
        index.append((name, off, length))
    payload = pos
    params = {}
    for name, off, length in index:
        start = payload + off
        if len(buf) < start + length:
            raise FormatError(f"truncated payload for tensor {name!r}", len(buf))
        arr, end = decode_tensor(buf, start)
        if end != start + length:
            raise FormatError(f"tensor {name!r} length mismatch", start)
        params[name] = arr
    net = coerce(NetworkConfig, values)
    coupling = CouplingConfig(values.get("strategy", "shared"), values.get("order", "filter_first"))
    if expected is not None:
        net, coupling = expected
    if params or expected is not None:
        _check_shapes(params, net, coupling)
    return ModelState(net, coupling, params)


def _check_shapes(params, net, coupling):
    want = {}
    for name, (o, i, k) in param_shapes(net, coupling).items():
        want[name + ".weight"] = (o, i, k, k)
        want[name + ".bias"] = (o,)
    problems = []
    for name, shape in want.items():
        if name not in params:
            problems.append(f"{name}: missing (expected {shape})")
        elif params[name].shape != shape:
            problems.append(f"{name}: stored {params[name].shape}, expected {shape}")
    for name in params:
        if name not in want:
            problems.append(f"{name}: unexpected tensor {params[name].shape}")
    if problems:
        raise ConfigurationError("model tensors do not match configuration:\n  " + "\n  ".join(problems))


def save_model(state, path):
    with open(path, "wb") as fh:
        fh.write(encode_model(state))


def load_model(path, expected=None):
    with open(path, "rb") as fh:
        return decode_model(fh.read(), expected)
