"""On-disk containers: the checkpoint archive and float32 tensor blobs with JSON sidecars.

Checkpoint archive layout (all integers unsigned 32-bit little-endian)::

    b"ADVKDCK1"
    u32 manifest_len | manifest JSON (utf-8, sorted keys)
    u32 tensor_count
    repeated: u32 name_len | name | u32 rank | u32 dims[rank] | float32 LE data

Blob layout: ``<name>.bin`` holds raw little-endian float32 values and
``<name>.meta.json`` records shape, dtype and layout.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np
import torch

MAGIC = b"ADVKDCK1"
BLOB_DTYPE = "f32le"

PathLike = Union[str, Path]


class ArchiveError(ValueError):
    """Malformed or mismatched archive/blob."""


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _as_f32(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    return np.asarray(value, dtype="<f4", order="C")  # keeps 0-d arrays 0-d


def dumps_archive(manifest: Mapping, tensors: Mapping[str, object]) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    buf.write(MAGIC)
    buf.write(_u32(len(meta)))
    buf.write(meta)
    buf.write(_u32(len(tensors)))
    for name, value in tensors.items():
        arr = _as_f32(value)
        encoded = name.encode()
        buf.write(_u32(len(encoded)))
        buf.write(encoded)
        buf.write(_u32(arr.ndim))
        for d in arr.shape:
            buf.write(_u32(d))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads_archive(data: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    if data[: len(MAGIC)] != MAGIC:
        raise ArchiveError("not a checkpoint archive (bad magic)")
    pos = len(MAGIC)

    def read_u32() -> int:
        nonlocal pos
        if pos + 4 > len(data):
            raise ArchiveError("truncated archive")
        (v,) = struct.unpack_from("<I", data, pos)
        pos += 4
        return v

    n = read_u32()
    manifest = json.loads(data[pos : pos + n].decode())
    pos += n
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(read_u32()):
        n = read_u32()
        name = data[pos : pos + n].decode()
        pos += n
        shape = tuple(read_u32() for _ in range(read_u32()))
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if pos + size > len(data):
            raise ArchiveError(f"truncated tensor {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape).copy()
        pos += size
    if pos != len(data):
        raise ArchiveError("trailing bytes after last tensor")
    return manifest, tensors


def save_archive(path: PathLike, manifest: Mapping, tensors: Mapping[str, object]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_archive(manifest, tensors))
    return path


def load_archive(path: PathLike) -> Tuple[dict, Dict[str, np.ndarray]]:
    return loads_archive(Path(path).read_bytes())


def file_digest(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_tensors(module: torch.nn.Module, prefix: str = "") -> Dict[str, np.ndarray]:
    return {prefix + k: _as_f32(v) for k, v in module.state_dict().items()}


def load_state_tensors(module: torch.nn.Module, tensors: Mapping[str, np.ndarray], prefix: str = "", strict: bool = True) -> None:
    own = module.state_dict()
    state = {}
    for key, ref in own.items():
        name = prefix + key
        if name not in tensors:
            if strict:
                raise ArchiveError(f"missing tensor {name!r}")
            continue
        arr = tensors[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise ArchiveError(f"shape mismatch for {name!r}: {arr.shape} vs {tuple(ref.shape)}")
        state[key] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    module.load_state_dict(state, strict=strict)


# -- blobs ------------------------------------------------------------------

def write_blob(path: PathLike, value, layout: str = "chw", **extra) -> Path:
    """Write ``<stem>.bin`` plus ``<stem>.meta.json``; returns the .bin path."""
    path = Path(path)
    if path.suffix != ".bin":
        path = path.with_suffix(".bin")
    arr = _as_f32(value)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(arr.tobytes())
    meta = {"shape": list(arr.shape), "dtype": BLOB_DTYPE, "layout": layout, **extra}
    _meta_path(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return path


def read_blob(path: PathLike, expect_layout: Optional[str] = None) -> np.ndarray:
    path = Path(path)
    meta = read_blob_meta(path)
    if meta.get("dtype") != BLOB_DTYPE:
        raise ArchiveError(f"{path}: unsupported dtype {meta.get('dtype')!r}")
    if expect_layout is not None and meta.get("layout") != expect_layout:
        raise ArchiveError(f"{path}: layout {meta.get('layout')!r}, expected {expect_layout!r}")
    data = np.fromfile(path, dtype="<f4")
    shape = tuple(meta["shape"])
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise ArchiveError(f"{path}: {data.size} values do not fit shape {shape}")
    return data.reshape(shape).astype(np.float32)


def read_blob_meta(path: PathLike) -> dict:
    meta_path = _meta_path(Path(path))
    if not meta_path.exists():
        raise ArchiveError(f"missing sidecar {meta_path}")
    return json.loads(meta_path.read_text())


def _meta_path(bin_path: Path) -> Path:
    return bin_path.with_name(bin_path.stem + ".meta.json")
