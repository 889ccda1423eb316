"""Tensor files, checkpoints, and key=value configs.

MSAT layout (little-endian): magic "MSAT" | version u32 = 1 | dtype u8
(1=f32, 2=f64, 3=u32) | rank u8 | reserved u16 = 0 | rank x extent u64 |
payload, row-major. Rank 0 is a scalar with one element.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError
from .tensor import Tensor

MAGIC = b"MSAT"
VERSION = 1
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.uint32): 3}
_DTYPES = {1: "<f4", 2: "<f8", 3: "<u4"}
_NATIVE = {1: np.float32, 2: np.float64, 3: np.uint32}


def write_tensor(path, tensor):
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise ParameterError(f"cannot serialize dtype {arr.dtype}")
    header = MAGIC + struct.pack("<IBBH", VERSION, code, arr.ndim, 0)
    extents = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = np.ascontiguousarray(arr).astype(_DTYPES[code], copy=False).tobytes()
    Path(path).write_bytes(header + extents + payload)


def read_tensor(path):
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError("truncated header", offset=len(raw))
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", offset=0)
    version, code, rank, reserved = struct.unpack_from("<IBBH", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset=8)
    if reserved != 0:
        raise FormatError(f"reserved field must be 0, got {reserved}", offset=10)
    offset = 12
    if len(raw) < offset + 8 * rank:
        raise FormatError("truncated extents", offset=len(raw))
    shape = struct.unpack_from(f"<{rank}Q", raw, offset) if rank else ()
    for i, e in enumerate(shape):
        if e < 1:
            raise FormatError(f"zero extent at axis {i}", offset=offset + 8 * i)
    offset += 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    nbytes = count * np.dtype(_DTYPES[code]).itemsize
    if len(raw) != offset + nbytes:
        raise FormatError(
            f"payload holds {len(raw) - offset} bytes, expected {nbytes}", offset=offset
        )
    arr = np.frombuffer(raw, dtype=_DTYPES[code], count=count, offset=offset)
    return Tensor(arr.astype(_NATIVE[code]).reshape(shape))


def save_checkpoint(dirpath, named_params, extra_config=None):
    """One MSAT file per parameter plus a name -> path manifest."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, param in named_params:
        fname = f"{name}.msat"
        write_tensor(d / fname, param.data)
        lines.append(f"{name}\t{fname}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if extra_config is not None:
        write_config(d / "model.cfg", extra_config)


def load_checkpoint(dirpath):
    """Returns (name -> array, model config dict); config may be empty."""
    d = Path(dirpath)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise FormatError(f"no manifest in {d}")
    arrays = {}
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, _, rel = line.partition("\t")
        if not rel:
            raise FormatError(f"malformed manifest line {line!r}")
        arrays[name] = read_tensor(d / rel).numpy()
    cfg_path = d / "model.cfg"
    cfg = parse_config(cfg_path.read_text(encoding="utf-8")) if cfg_path.exists() else {}
    return arrays, cfg


def parse_config(text):
    """key=value lines; '#' comments and blank lines are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep or not key.strip():
            raise ParameterError(f"line {lineno}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def write_config(path, items):
    lines = [f"{k}={format_value(v)}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def coerce(value, kind):
    """Parse a config string into `kind`; booleans accept only true/false."""
    if kind is bool:
        if value == "true":
            return True
        if value == "false":
            return False
        raise ParameterError(f"booleans must be true or false, got {value!r}")
    if kind is int:
        return int(value)
    if kind is float:
        return float(value)
    if kind is tuple:
        return tuple(int(x) for x in value.split(","))
    return value


def sig6(x):
    """Round to 6 significant digits for JSON reports."""
    return float(f"{float(x):.6g}")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return sig6(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


def dump_json(obj, path=None):
    """JSON text with floats at 6 significant digits; optionally written out."""
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    return text
