"""Raw little-endian volumes with plain-text sidecar headers."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_DTYPES = {"uint8": "<u1", "float32": "<f4"}


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".hdr")


def write_raw_volume(path: str | Path, array: np.ndarray, header: dict) -> None:
    path = Path(path)
    kind = np.dtype(array.dtype).name
    if kind not in _DTYPES:
        raise TypeError(f"unsupported dtype {kind}")
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(array, dtype=_DTYPES[kind])
    path.write_bytes(data.tobytes())
    meta = {"dtype": kind, "shape": list(array.shape), **header}
    lines = [f"{k} = {json.dumps(v)}" for k, v in meta.items()]
    sidecar_path(path).write_text("\n".join(lines) + "\n")


def read_header(path: str | Path) -> dict:
    meta = {}
    for line in sidecar_path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = json.loads(value)
    return meta


def read_raw_volume(path: str | Path) -> tuple[np.ndarray, dict]:
    meta = read_header(path)
    dtype = _DTYPES[meta["dtype"]]
    data = np.frombuffer(Path(path).read_bytes(), dtype=dtype).reshape(meta["shape"])
    return data.astype(np.dtype(dtype).newbyteorder("=")), meta
