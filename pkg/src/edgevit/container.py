"""Binary model container.

Layout: ``b"NUWAVIT1"`` | header length (u32 LE) | UTF-8 JSON header |
payload of little-endian float32 tensors, row-major, in header order.

The header carries ``format_version``, ``config``, ``class_ids``,
``tensors`` (name, shape, byte_offset), ``payload_crc32`` and
``header_crc32``. The header is written in one canonical form; on load it
is re-serialised and compared byte for byte, so any edit to the header
bytes is rejected even if the JSON still parses.
"""

from __future__ import annotations

import json
import os
import re
import struct
import zlib

import numpy as np

from .errors import FormatError
from .model import ModelConfig, VitModel, tensor_shapes

MAGIC = b"NUWAVIT1"
FORMAT_VERSION = 1
_PROBE_NAME = re.compile(r"^probes\.(\d+)\.(ln\.gamma|ln\.beta|weight|bias)$")
_HEADER_KEYS = ("format_version", "config", "class_ids", "tensors", "payload_crc32",
                "header_crc32")


def _canonical(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=True, allow_nan=False).encode()


def _tensor_order(model: VitModel):
    names = list(tensor_shapes(model.config))
    for name in model.aux:
        if not _PROBE_NAME.match(name):
            raise FormatError(f"auxiliary tensor {name!r} is not a probe tensor")
    return [(n, model.params[n]) for n in names] + list(model.aux.items())


def dumps(model: VitModel) -> bytes:
    model.validate()
    entries, chunks, offset = [], [], 0
    for name, t in _tensor_order(model):
        arr = np.ascontiguousarray(t, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "byte_offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "class_ids": [int(c) for c in model.class_ids],
        "tensors": entries,
        "payload_crc32": zlib.crc32(payload),
    }
    header["header_crc32"] = zlib.crc32(_canonical(header))
    blob = _canonical(header)
    return MAGIC + struct.pack("<I", len(blob)) + blob + payload


def save_model(model: VitModel, path) -> None:
    data = dumps(model)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _require(cond, field, why):
    if not cond:
        raise FormatError(f"{field}: {why}")


def loads(data: bytes) -> VitModel:
    _require(len(data) >= 12, "magic", "file shorter than the fixed preamble")
    _require(data[:8] == MAGIC, "magic", "bad magic")
    (hlen,) = struct.unpack("<I", data[8:12])
    _require(12 + hlen <= len(data), "header_len", f"{hlen} exceeds file size")
    blob = data[12:12 + hlen]
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header: not valid JSON ({exc})") from None
    _require(isinstance(header, dict), "header", "must be a JSON object")
    _require(list(header) == list(_HEADER_KEYS), "header",
             f"expected fields {list(_HEADER_KEYS)}, got {list(header)}")
    _require(header["format_version"] == FORMAT_VERSION, "format_version",
             f"unsupported version {header['format_version']!r}")
    body = {k: header[k] for k in _HEADER_KEYS[:-1]}
    _require(header["header_crc32"] == zlib.crc32(_canonical(body)), "header_crc32",
             "checksum mismatch")
    _require(_canonical(header) == blob, "header", "not in canonical form")
    try:
        cfg = ModelConfig.from_dict(header["config"])
        cfg.validate()
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"config: {exc}") from None

    payload = data[12 + hlen:]
    _require(zlib.crc32(payload) == header["payload_crc32"], "payload_crc32", "checksum mismatch")
    expected = tensor_shapes(cfg)
    params, aux, offset = {}, {}, 0
    for i, entry in enumerate(header["tensors"]):
        name, shape = entry["name"], tuple(entry["shape"])
        _require(entry["byte_offset"] == offset, f"tensors[{i}].byte_offset",
                 f"expected {offset}, got {entry['byte_offset']}")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        _require(offset + 4 * n <= len(payload), f"tensors[{i}]", "runs past end of payload")
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
        arr = arr.astype(np.float32)
        if name in expected:
            _require(name not in params, f"tensors[{i}].name", f"duplicate {name}")
            _require(shape == expected[name], f"tensors[{i}].shape",
                     f"{name} has {list(shape)}, config implies {list(expected[name])}")
            params[name] = arr
        else:
            _require(bool(_PROBE_NAME.match(name)), f"tensors[{i}].name", f"unknown tensor {name!r}")
            aux[name] = arr
        offset += 4 * n
    _require(offset == len(payload), "payload", f"{len(payload) - offset} trailing bytes")
    order = [e["name"] for e in header["tensors"][:len(expected)]]
    _require(order == list(expected), "tensors", "model tensors not in canonical order")
    try:
        model = VitModel(cfg, params, [int(c) for c in header["class_ids"]], aux)
    except ValueError as exc:
        raise FormatError(f"class_ids: {exc}") from None
    return model


def load_model(path) -> VitModel:
    with open(path, "rb") as f:
        return loads(f.read())
