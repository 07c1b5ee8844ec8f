"""Binary tensor-record files used for checkpoints and embedding dumps.

Layout (all integers little-endian)::

    b"GFCK" | u32 version | u32 record count
    per record: u32 name length | UTF-8 name | u32 ndim | u64 dims[ndim]
                | u8 dtype code | raw little-endian payload
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"GFCK"
VERSION = 1
DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("<u8"): 3,
    np.dtype("u1"): 4,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}

STEP_KEY = "__step__"
RNG_KEY = "__rng_state__"
CONFIG_KEY = "__config__"


class CorruptFileError(ValueError):
    """The file is not a well-formed record file of a supported version."""


def encode_records(records) -> bytes:
    records = list(records.items() if isinstance(records, dict) else records)
    out = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in DTYPE_CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(struct.pack("<B", DTYPE_CODES[dt]))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


def decode_records(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CorruptFileError(f"truncated file: need {n} bytes at offset {pos}, have {len(buf) - pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CorruptFileError("bad magic; not a record file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CorruptFileError(f"unsupported format version {version} (expected {VERSION})")
    records = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptFileError(f"record name is not UTF-8: {e}") from None
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (code,) = struct.unpack("<B", take(1))
        if code not in CODE_DTYPES:
            raise CorruptFileError(f"{name}: unknown dtype code {code}")
        dt = CODE_DTYPES[code]
        n = int(np.prod(shape, dtype=np.uint64)) if ndim else 1
        data = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape)
        if name in records:
            raise CorruptFileError(f"duplicate record {name!r}")
        records[name] = data.astype(dt.newbyteorder("="), copy=True)
    if pos != len(buf):
        raise CorruptFileError(f"{len(buf) - pos} trailing bytes after last record")
    return records


def write_records(path, records) -> None:
    Path(path).write_bytes(encode_records(records))


def read_records(path) -> "OrderedDict[str, np.ndarray]":
    return decode_records(Path(path).read_bytes())


def json_record(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def json_from_record(arr: np.ndarray):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))


def checkpoint_save(model, path, step: int = 0, rng_state: dict | None = None) -> None:
    """Every parameter and buffer in module order, then step, RNG state and
    the model config."""
    from .model import config_to_dict

    records = list(model.state_dict().items())
    records.append((STEP_KEY, np.array(step, dtype=np.int64)))
    records.append((RNG_KEY, json_record(rng_state or {})))
    records.append((CONFIG_KEY, json_record(config_to_dict(model.config))))
    write_records(path, records)


def checkpoint_load(path, model=None):
    """Rebuild the model described in the file (or fill ``model``) and return
    ``(model, step, rng_state)``.  Unknown names and shape mismatches raise."""
    from .model import build, config_from_dict

    records = read_records(path)
    try:
        step = int(records.pop(STEP_KEY))
        rng_state = json_from_record(records.pop(RNG_KEY))
        config = config_from_dict(json_from_record(records.pop(CONFIG_KEY)))
    except KeyError as e:
        raise CorruptFileError(f"missing reserved record {e}") from None
    if model is None:
        model = build(config)
    model.load_state_dict(records)
    return model, step, rng_state
