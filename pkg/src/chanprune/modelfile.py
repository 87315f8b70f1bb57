"""Binary model file: ``SPMG`` magic, version, JSON header, packed LE float blobs.

Layout::

    0..3    b"SPMG"
    4..7    version, uint32 LE (= 1)
    8..11   header length N, uint32 LE
    12..    N bytes UTF-8 JSON header
    ...     tensor blobs, tightly packed in header order

Blob offsets in the header are relative to the first byte after the header.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError, InvalidArgument
from .graph import LAYER_TYPES, ModelGraph, hyperparams

MAGIC = b"SPMG"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def _header(graph: ModelGraph) -> tuple[bytes, list[np.ndarray]]:
    layers, blobs = [], []
    offset = 0
    for layer in graph.layers:
        entries = []
        for name in layer.tensor_names:
            arr = getattr(layer, name)
            if arr is None:
                raise InvalidArgument(f"cannot save unmaterialized tensor {layer.id}.{name}")
            dt = _DTYPE_NAMES.get(arr.dtype)
            if dt is None:
                raise InvalidArgument(f"unsupported dtype {arr.dtype} for {layer.id}.{name}")
            length = arr.size * arr.itemsize
            entries.append({"name": name, "shape": list(arr.shape), "dtype": dt,
                            "offset": offset, "length": length})
            blobs.append(arr)
            offset += length
        layers.append({"kind": layer.kind, "id": layer.id, "hyper": hyperparams(layer),
                       "tensors": entries})
    doc = {"input_shape": list(graph.input_shape), "num_classes": graph.num_classes,
           "meta": graph.meta, "layers": layers}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8"), blobs


def dumps(graph: ModelGraph) -> bytes:
    header, blobs = _header(graph)
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    parts += [np.ascontiguousarray(b, dtype=b.dtype.newbyteorder("<")).tobytes() for b in blobs]
    return b"".join(parts)


def save(graph: ModelGraph, path) -> None:
    header, blobs = _header(graph)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(np.ascontiguousarray(b, dtype=b.dtype.newbyteorder("<")).tobytes())


def load(path) -> ModelGraph:
    with open(path, "rb") as fh:
        data = fh.read()
    return loads(data)


def loads(data: bytes) -> ModelGraph:
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", 0)
    if len(data) < 12:
        raise FormatError("truncated preamble", len(data))
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if 12 + hlen > len(data):
        raise FormatError(f"header declares {hlen} bytes but only {len(data) - 12} remain", 8)
    try:
        doc = json.loads(data[12:12 + hlen].decode("utf-8"))
        layer_docs = doc["layers"]
        input_shape, num_classes = doc["input_shape"], doc["num_classes"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable header: {exc}", 12) from None
    base = 12 + hlen
    layers = []
    end = base
    for ld in layer_docs:
        try:
            cls = LAYER_TYPES[ld["kind"]]
            layer = cls(id=ld["id"], **ld["hyper"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"bad layer entry {ld!r}: {exc}", 12) from None
        for entry in ld["tensors"]:
            start = base + entry["offset"]
            stop = start + entry["length"]
            if stop > len(data):
                raise FormatError(f"blob {ld['id']}.{entry['name']} needs bytes up to {stop}, "
                                  f"file has {len(data)}", len(data))
            dt = _DTYPES.get(entry["dtype"])
            count = int(np.prod(entry["shape"], dtype=np.int64))
            if dt is None or count * dt.itemsize != entry["length"]:
                raise FormatError(f"inconsistent blob descriptor {entry!r}", start)
            arr = np.frombuffer(data, dtype=dt, count=count, offset=start)
            setattr(layer, entry["name"], arr.astype(dt.newbyteorder("="), copy=True).reshape(entry["shape"]))
            end = max(end, stop)
        layers.append(layer)
    if end != len(data):
        raise FormatError(f"{len(data) - end} trailing bytes after last blob", end)
    return ModelGraph(layers, tuple(input_shape), num_classes, meta=doc.get("meta", {}))
