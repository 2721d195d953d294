"""Checkpoint directory format: named tensors plus a flat metadata text file.

Layout of a checkpoint directory:

    meta.txt       flat typed key=value lines (spec fields, seeds, schedule)
    tensors.index  one line per tensor: name<TAB>dtype<TAB>shape<TAB>offset<TAB>nbytes
    tensors.bin    concatenated little-endian raw data, in index order

Tensor names are dotted paths ("generator.block1.conv.weight"). Loading
validates names and shapes against the expectation the caller supplies, so a
checkpoint saved for one architecture cannot be silently loaded into another.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
    "uint8": "|u1",
}


class CheckpointError(RuntimeError):
    """Missing, malformed, or shape-incompatible checkpoint data."""


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float, str)):
        return str(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_format_value(x) for x in v)
    raise TypeError(f"unsupported meta value type: {type(v)!r}")


def _parse_value(s: str):
    s = s.strip()
    if "," in s:
        return [_parse_value(x) for x in s.split(",")]
    if s == "true":
        return True
    if s == "false":
        return False
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s


def write_meta(path: Path, meta: dict) -> None:
    lines = [f"{k} = {_format_value(v)}" for k, v in sorted(meta.items())]
    path.write_text("\n".join(lines) + "\n")


def read_meta(path: Path) -> dict:
    meta = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointError(f"malformed meta line: {line!r}")
        k, v = line.split("=", 1)
        meta[k.strip()] = _parse_value(v)
    return meta


def save_checkpoint(directory, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write tensors and metadata to `directory`, creating it if needed."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index_lines = []
    offset = 0
    with open(directory / "tensors.bin", "wb") as blob:
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            if arr.dtype.name not in _DTYPES:
                raise CheckpointError(f"unsupported tensor dtype {arr.dtype} for {name}")
            raw = np.ascontiguousarray(arr).astype(_DTYPES[arr.dtype.name]).tobytes()
            shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
            index_lines.append(
                f"{name}\t{arr.dtype.name}\t{shape}\t{offset}\t{len(raw)}"
            )
            blob.write(raw)
            offset += len(raw)
    (directory / "tensors.index").write_text("\n".join(index_lines) + "\n")
    write_meta(directory / "meta.txt", meta)


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    """Read back tensors and metadata written by `save_checkpoint`."""
    directory = Path(directory)
    if not directory.is_dir():
        raise CheckpointError(f"checkpoint directory not found: {directory}")
    for required in ("meta.txt", "tensors.index", "tensors.bin"):
        if not (directory / required).exists():
            raise CheckpointError(f"checkpoint missing {required}: {directory}")
    meta = read_meta(directory / "meta.txt")
    raw = (directory / "tensors.bin").read_bytes()
    tensors = {}
    for line in (directory / "tensors.index").read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise CheckpointError(f"malformed index line: {line!r}")
        name, dtype, shape_s, offset_s, nbytes_s = parts
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} in index")
        shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
        offset, nbytes = int(offset_s), int(nbytes_s)
        arr = np.frombuffer(raw[offset : offset + nbytes], dtype=_DTYPES[dtype])
        if shape:
            arr = arr.reshape(shape)
        else:
            arr = arr.reshape(())
        tensors[name] = arr.astype(dtype)
    return tensors, meta


def checkpoint_digest(directory) -> str:
    """Stable content hash of a checkpoint (tensors + index + meta)."""
    import hashlib

    directory = Path(directory)
    h = hashlib.sha256()
    for name in ("meta.txt", "tensors.index", "tensors.bin"):
        p = directory / name
        if p.exists():
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


def validate_names_shapes(
    tensors: dict[str, np.ndarray], expected: dict[str, tuple]
) -> None:
    """Check every expected tensor exists with the right shape."""
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {missing[:5]}")
    for name, shape in expected.items():
        got = tuple(tensors[name].shape)
        if got != tuple(shape):
            raise CheckpointError(
                f"tensor {name} has shape {got}, expected {tuple(shape)}"
            )


# -- torch module adapters -------------------------------------------------


def state_dict_to_arrays(module, prefix: str = "") -> dict[str, np.ndarray]:
    state = module.state_dict()
    out = {}
    for k, v in state.items():
        out[prefix + k] = v.detach().cpu().numpy().copy()
    return out


def load_arrays_into_module(module, tensors: dict[str, np.ndarray], prefix: str = ""):
    import torch

    state = module.state_dict()
    expected = {prefix + k: tuple(v.shape) for k, v in state.items()}
    picked = {k: v for k, v in tensors.items() if k in expected}
    validate_names_shapes(picked, expected)
    new_state = {}
    for k, v in state.items():
        arr = tensors[prefix + k]
        new_state[k] = torch.from_numpy(np.ascontiguousarray(arr)).to(v.dtype)
    module.load_state_dict(new_state)


def optimizer_state_to_arrays(optimizer, prefix: str) -> dict[str, np.ndarray]:
    """Flatten Adam-style optimizer state into named arrays (by param index)."""
    out = {}
    state = optimizer.state_dict()["state"]
    for idx, entry in state.items():
        for key, val in entry.items():
            arr = val.detach().cpu().numpy() if hasattr(val, "detach") else np.asarray(val)
            out[f"{prefix}{idx}.{key}"] = np.asarray(arr, dtype=np.float32 if arr.dtype.kind == "f" else arr.dtype)
    return out


def load_optimizer_state(optimizer, tensors: dict[str, np.ndarray], prefix: str) -> None:
    """Restore optimizer state saved by `optimizer_state_to_arrays`.

    Must be called after the optimizer has been constructed over the same
    parameter list (same order) it was saved from.
    """
    import torch

    sd = optimizer.state_dict()
    state: dict = {}
    for name, arr in tensors.items():
        if not name.startswith(prefix):
            continue
        rest = name[len(prefix) :]
        idx_s, key = rest.split(".", 1)
        entry = state.setdefault(int(idx_s), {})
        t = torch.from_numpy(np.ascontiguousarray(arr))
        entry[key] = t
    sd["state"] = state
    optimizer.load_state_dict(sd)
