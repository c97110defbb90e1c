"""Flat array containers on disk.

A container is an uncompressed ``.npz`` archive: one little-endian array per
path string, a ``__version__`` tag and an optional JSON metadata blob. Round
trips are bit-exact.
"""

import hashlib
import json

import numpy as np

FORMAT_VERSION = "latentdialog-state/1"


class FormatError(ValueError):
    pass


def _le(arr):
    arr = np.asarray(arr)
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and np.little_endian is False):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return np.ascontiguousarray(arr)


def save_arrays(path, arrays, meta=None):
    payload = {}
    for key, arr in arrays.items():
        if key.startswith("__"):
            raise FormatError(f"reserved key {key!r}")
        payload[key] = _le(arr)
    payload["__version__"] = np.frombuffer(FORMAT_VERSION.encode(), dtype=np.uint8)
    payload["__meta__"] = np.frombuffer(json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_arrays(path):
    """Return ``(arrays, meta)``; raises :class:`FormatError` on a version mismatch."""
    with np.load(path, allow_pickle=False) as z:
        if "__version__" not in z.files:
            raise FormatError(f"{path}: missing version tag")
        version = bytes(z["__version__"]).decode()
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported container version {version!r}")
        meta = json.loads(bytes(z["__meta__"]).decode()) if "__meta__" in z.files else {}
        arrays = {k: np.array(z[k]) for k in z.files if not k.startswith("__")}
    return arrays, meta


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
