"""Single-file container: JSON header plus flat little-endian array payload.

Layout: 8-byte magic ``VSMOOTH1``, 8-byte little-endian header length, UTF-8
JSON header, then the raw array bytes back to back. The header carries user
metadata under ``"meta"`` and an array directory under ``"arrays"`` (name,
dtype, shape, byte offset into the payload). Round-trips are bit-exact.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"VSMOOTH1"

_ALLOWED_DTYPES = ("<f8", "<i8", "|b1")


def write_container(path, meta: dict, arrays: dict) -> None:
    directory = []
    payload = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype == np.bool_:
            dtype = "|b1"
        elif np.issubdtype(arr.dtype, np.integer):
            dtype = "<i8"
            arr = arr.astype("<i8")
        else:
            dtype = "<f8"
            arr = arr.astype("<f8")
        raw = np.ascontiguousarray(arr).tobytes()
        directory.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset}
        )
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": directory}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for raw in payload:
            f.write(raw)


def read_container(path) -> tuple[dict, dict]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"not a varsmooth container: bad magic {magic!r}")
        header_len = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(header_len).decode("utf-8"))
        payload = f.read()
    arrays = {}
    for entry in header["arrays"]:
        dtype = entry["dtype"]
        if dtype not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported dtype in container: {dtype}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).copy()
    return header["meta"], arrays
