"""Model persistence as a JSON manifest plus one raw little-endian float32 blob.

``<dir>/model.json`` holds the spec, the tensor table (name, shape, offset,
byte length) and free-form metadata; ``<dir>/model.bin`` holds the bytes.
"""
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .params import ModelParams
from .spec import NetworkSpec

MANIFEST = "model.json"
BLOB = "model.bin"
DTYPE = "<f4"


class CheckpointError(ValueError):
    pass


def atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(directory, spec, params, metadata=None):
    directory = Path(directory)
    table = []
    chunks = []
    offset = 0
    for name in sorted(params):
        raw = np.ascontiguousarray(params[name], dtype=DTYPE).tobytes()
        table.append({"name": name, "shape": list(params[name].shape), "dtype": DTYPE,
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"spec": spec.to_dict(), "blob": BLOB, "tensors": table, "metadata": metadata or {}}
    atomic_write(directory / BLOB, b"".join(chunks))
    atomic_write(directory / MANIFEST, json.dumps(manifest, indent=1, sort_keys=True))


def load_model(directory):
    """Returns ``(spec, params, metadata)``."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
        blob = (directory / manifest.get("blob", BLOB)).read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint in {directory}: {e}") from e
    expected = sum(t["nbytes"] for t in manifest["tensors"])
    if expected != len(blob):
        raise CheckpointError(f"blob holds {len(blob)} bytes, manifest lists {expected}")
    params = ModelParams()
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64)) * np.dtype(t["dtype"]).itemsize
        if n != t["nbytes"] or t["offset"] + n > len(blob):
            raise CheckpointError(f"tensor {t['name']} byte length does not match its shape")
        arr = np.frombuffer(blob, dtype=t["dtype"], count=n // 4, offset=t["offset"])
        params[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
    spec = NetworkSpec.from_dict(manifest["spec"])
    return spec, params, manifest.get("metadata", {})
