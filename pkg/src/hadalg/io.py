"""TensorFile: exchange format for dense, CP and TT tensors.

Two encodings share one schema (version 1):

* text: a JSON document.  Floats are written with ``repr`` precision, so
  reading them back gives the same bits.
* binary: the magic ``HADALGT1``, a little-endian ``uint32`` header length, the
  JSON header without payload, then every payload array as little-endian
  float64 in row-major order.
"""
from __future__ import annotations

import json
import struct
from typing import Union

import numpy as np

from .core import HadalgError, as_shape
from .cp import CpTensor
from .dense import DenseTensor
from .tt import TtTensor

VERSION = 1
MAGIC = b"HADALGT1"
FORMATS = ("dense", "cp", "tt")

Tensor = Union[DenseTensor, CpTensor, TtTensor]


class MalformedFileError(HadalgError, ValueError):
    pass


def _header_and_arrays(w: Tensor):
    shape = list(w.shape.mode_sizes)
    if isinstance(w, DenseTensor):
        return {"version": VERSION, "format": "dense", "shape": shape}, [w.values]
    if isinstance(w, CpTensor):
        return {"version": VERSION, "format": "cp", "shape": shape, "rank": w.rank}, list(w.factors)
    if isinstance(w, TtTensor):
        return {"version": VERSION, "format": "tt", "shape": shape, "tt_ranks": list(w.tt_ranks)}, list(w.cores)
    raise TypeError(f"cannot serialise {type(w).__name__}")


def _expected_sizes(header):
    fmt = header["format"]
    shape = header["shape"]
    if fmt == "dense":
        return [tuple(shape)]
    if fmt == "cp":
        r = int(header["rank"])
        return [(m, r) for m in shape]
    ranks = header["tt_ranks"]
    if len(ranks) != len(shape) + 1 or ranks[0] != 1 or ranks[-1] != 1:
        raise MalformedFileError("tt_ranks must have d+1 entries with boundary ranks 1")
    return [(ranks[k], m, ranks[k + 1]) for k, m in enumerate(shape)]


def _check_header(header):
    if not isinstance(header, dict):
        raise MalformedFileError("header is not an object")
    if header.get("version") != VERSION:
        raise MalformedFileError(f"unsupported version {header.get('version')!r}")
    if header.get("format") not in FORMATS:
        raise MalformedFileError(f"unknown format {header.get('format')!r}")
    shape = header.get("shape")
    if not isinstance(shape, list) or not shape or not all(isinstance(m, int) and m >= 1 for m in shape):
        raise MalformedFileError("shape must be a nonempty list of positive integers")
    if header["format"] == "cp" and not (isinstance(header.get("rank"), int) and header["rank"] >= 0):
        raise MalformedFileError("cp header needs a nonnegative integer rank")
    if header["format"] == "tt":
        ranks = header.get("tt_ranks")
        if not isinstance(ranks, list) or not all(isinstance(r, int) and r >= 1 for r in ranks):
            raise MalformedFileError("tt header needs a list of positive tt_ranks")


def _build(header, arrays) -> Tensor:
    fmt = header["format"]
    shape = as_shape(header["shape"])
    try:
        if fmt == "dense":
            return DenseTensor(shape, arrays[0])
        if fmt == "cp":
            return CpTensor(shape, arrays)
        return TtTensor(shape, arrays)
    except (ValueError, IndexError) as exc:
        raise MalformedFileError(str(exc)) from exc


def dumps_text(w: Tensor) -> str:
    header, arrays = _header_and_arrays(w)
    header["payload"] = [[float(x) for x in np.asarray(a).ravel()] for a in arrays]
    return json.dumps(header)


def loads_text(text: str) -> Tensor:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedFileError(f"invalid JSON: {exc}") from exc
    _check_header(doc)
    sizes = _expected_sizes(doc)
    payload = doc.get("payload")
    if not isinstance(payload, list) or len(payload) != len(sizes):
        raise MalformedFileError("payload does not match the format metadata")
    arrays = []
    for flat, size in zip(payload, sizes):
        a = np.asarray(flat, dtype=float)
        if a.ndim != 1 or a.size != int(np.prod(size)):
            raise MalformedFileError(f"payload array has {a.size} values, expected {int(np.prod(size))}")
        arrays.append(a.reshape(size))
    return _build(doc, arrays)


def dumps_binary(w: Tensor) -> bytes:
    header, arrays = _header_and_arrays(w)
    head = json.dumps(header).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(head)), head]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays]
    return b"".join(parts)


def loads_binary(data: bytes) -> Tensor:
    if not data.startswith(MAGIC) or len(data) < len(MAGIC) + 4:
        raise MalformedFileError("missing binary magic")
    (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFileError(f"invalid header: {exc}") from exc
    _check_header(header)
    sizes = _expected_sizes(header)
    pos = start + hlen
    arrays = []
    for size in sizes:
        count = int(np.prod(size))
        end = pos + 8 * count
        if end > len(data):
            raise MalformedFileError("payload shorter than the format metadata requires")
        arrays.append(np.frombuffer(data[pos:end], dtype="<f8").astype(float).reshape(size))
        pos = end
    if pos != len(data):
        raise MalformedFileError("trailing bytes after payload")
    return _build(header, arrays)


def save(w: Tensor, path, binary: bool = False):
    if binary:
        with open(path, "wb") as fh:
            fh.write(dumps_binary(w))
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(dumps_text(w))


def load(path) -> Tensor:
    """Read either encoding; the binary magic decides."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data.startswith(MAGIC):
        return loads_binary(data)
    try:
        return loads_text(data.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise MalformedFileError("file is neither binary TensorFile nor UTF-8 text") from exc
