"""Single-file container: magic, JSON header, then little-endian float64 blobs.

Layout::

    b"DPRJ1\\n" | uint64 LE header length | UTF-8 JSON header | blob 0 | blob 1 ...

The header carries an ``arrays`` list of ``{"name", "shape"}`` entries in
blob order.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DPRJ1\n"
_F8 = np.dtype("<f8")


def write_container(path, header, arrays):
    arrays = {name: np.ascontiguousarray(a, dtype=_F8) for name, a in arrays.items()}
    header = dict(header)
    header["arrays"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()]
    text = json.dumps(header, sort_keys=True, allow_nan=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for a in arrays.values():
            fh.write(a.tobytes(order="C"))


def read_container(path):
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a diffproj container file")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos : pos + n].decode("utf-8"))
    pos += n
    arrays = {}
    for spec in header.pop("arrays"):
        shape = tuple(spec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        a = np.frombuffer(data, dtype=_F8, count=count, offset=pos).reshape(shape)
        arrays[spec["name"]] = a.astype(np.float64)
        pos += 8 * count
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return header, arrays
