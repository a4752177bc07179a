"""Array containers, single-tensor files, checkpoints and image export.

Container layout (all integers little-endian)::

    8 bytes   magic  b"VSHARPC1"
    8 bytes   uint64 manifest length L
    L bytes   UTF-8 JSON manifest
    payload   raw array bytes, each array starting at an 8-byte aligned
              offset relative to the start of the payload

Manifest::

    {"format": "vsharp-container", "version": 1,
     "arrays": [{"name", "dtype", "shape", "offset", "nbytes", "endianness"}],
     "metadata": {...}}

Single-tensor files use a fixed binary header (magic ``b"VSTN"``, uint8
dtype code, uint8 rank, ``rank`` uint64 dims) followed by the raw data, with
free-form metadata in a ``<file>.json`` sidecar.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

PathLike = Union[str, Path]

CONTAINER_MAGIC = b"VSHARPC1"
TENSOR_MAGIC = b"VSTN"
DTYPE_CODES = {
    "float32": 1,
    "float64": 2,
    "complex64": 3,
    "complex128": 4,
    "uint8": 5,
    "int64": 6,
    "bool": 7,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class FormatError(ValueError):
    """A file does not follow the container or tensor layout."""


def _le_dtype(name: str) -> np.dtype:
    if name not in DTYPE_CODES:
        raise FormatError(f"unsupported dtype {name!r}")
    return np.dtype(name).newbyteorder("<")


def write_container(path: PathLike, arrays: dict[str, np.ndarray], metadata: Optional[dict] = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, order="C")
        dtype = _le_dtype(arr.dtype.name)
        raw = arr.astype(dtype, copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "endianness": "little",
            }
        )
        pad = (-len(raw)) % 8
        blobs.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    manifest = {"format": "vsharp-container", "version": 1, "arrays": entries, "metadata": metadata or {}}
    header = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_manifest(path: PathLike) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CONTAINER_MAGIC:
            raise FormatError(f"{path}: not a vsharp container")
        (length,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(length).decode("utf-8"))
    return manifest, 16 + length


def read_container(path: PathLike) -> tuple[dict[str, np.ndarray], dict]:
    manifest, start = read_manifest(path)
    payload = Path(path).read_bytes()[start:]
    arrays, spans = {}, []
    for entry in manifest["arrays"]:
        dtype = _le_dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        off, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise FormatError(f"{entry['name']}: shape {shape} inconsistent with {nbytes} bytes")
        if off + nbytes > len(payload):
            raise FormatError(f"{entry['name']}: payload truncated")
        spans.append((off, off + nbytes, entry["name"]))
        arrays[entry["name"]] = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape).astype(entry["dtype"])
    spans.sort()
    for (_, end, a), (begin, _, b) in zip(spans, spans[1:]):
        if begin < end:
            raise FormatError(f"arrays {a!r} and {b!r} overlap")
    return arrays, manifest.get("metadata", {})


def write_tensor(path: PathLike, arr: np.ndarray, metadata: Optional[dict] = None) -> None:
    arr = np.asarray(arr, order="C")
    code = DTYPE_CODES.get(arr.dtype.name)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype(_le_dtype(arr.dtype.name), copy=False).tobytes())
    sidecar = {"dtype": arr.dtype.name, "shape": list(arr.shape), **(metadata or {})}
    Path(f"{path}.json").write_text(json.dumps(sidecar, indent=2))


def read_tensor(path: PathLike) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: not a vsharp tensor file")
    code, rank = struct.unpack("<BB", raw[4:6])
    if code not in CODE_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", raw[6 : 6 + 8 * rank])
    name = CODE_DTYPES[code]
    data = raw[6 + 8 * rank :]
    dtype = _le_dtype(name)
    if len(data) != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
        raise FormatError(f"{path}: payload length does not match shape {shape}")
    arr = np.frombuffer(data, dtype=dtype).reshape(shape).astype(name)
    sidecar = Path(f"{path}.json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return arr, meta


def save_checkpoint(path: PathLike, model, extra: Optional[dict] = None) -> None:
    state = model.state_dict()
    meta = {
        "kind": "vsharp-checkpoint",
        "model": model.config.to_dict(),
        "parameters": {k: list(v.shape) for k, v in state.items()},
        **(extra or {}),
    }
    write_container(path, state, meta)


def load_checkpoint(path: PathLike):
    from vsharp.solver import ModelConfig, VSharpNet

    arrays, meta = read_container(path)
    if meta.get("kind") != "vsharp-checkpoint":
        raise FormatError(f"{path}: not a model checkpoint")
    model = VSharpNet(ModelConfig.from_dict(meta["model"]))
    model.load_state_dict(arrays)
    return model, meta


def save_png(path: PathLike, image: np.ndarray) -> None:
    """Write a magnitude image or mask as 8-bit grayscale, scaled to its maximum."""
    from PIL import Image

    img = np.abs(np.asarray(image, dtype=np.float64))
    peak = img.max()
    scaled = (255 * img / peak) if peak > 0 else img
    Image.fromarray(np.clip(np.round(scaled), 0, 255).astype(np.uint8)).save(path)


def write_report(path: PathLike, rows: list[dict]) -> None:
    """Metrics as JSON (``.json``) or CSV (anything else)."""
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(rows, indent=2))
        return
    keys = list(dict.fromkeys(k for row in rows for k in row))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
