"""Deterministic binary checkpoints.

Layout: an 8-byte magic, a length-prefixed JSON header (sorted keys)
declaring the format version, the flat network config, and every array's
name/dtype/shape in order, followed by the raw array bytes in that order.
Writing the same network twice produces identical bytes, so checkpoint
comparisons in reproducibility tests can be bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DPCNNCK1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable or incompatible checkpoint files."""


def save_checkpoint(path, net, config: dict[str, str]) -> None:
    """Write all weights and normalization state plus the resolved config."""
    arrays = net.state_arrays()
    header = {
        "format_version": FORMAT_VERSION,
        "config": {str(k): str(v) for k, v in config.items()},
        "arrays": [
            [name, np.lib.format.dtype_to_descr(a.dtype), list(a.shape)]
            for name, a in arrays.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a).tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read the header config and the named arrays from a checkpoint."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:8]!r})")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen].decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')}"
        )
    arrays: dict[str, np.ndarray] = {}
    offset = 12 + hlen
    for name, descr, shape in header["arrays"]:
        dtype = np.dtype(descr)
        count = int(np.prod(shape)) if shape else 1
        nbytes = dtype.itemsize * count
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated array data for {name}")
        arrays[name] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        offset += nbytes
    return header["config"], arrays


def restore_into(net, arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into an already-built network, name by name."""
    target = net.state_arrays()
    missing = sorted(set(target) - set(arrays))
    extra = sorted(set(arrays) - set(target))
    if missing or extra:
        raise CheckpointError(
            f"checkpoint does not match network: missing={missing} extra={extra}"
        )
    for name, dst in target.items():
        src = arrays[name]
        if src.shape != dst.shape:
            raise CheckpointError(
                f"checkpoint array {name} has shape {src.shape}, network expects "
                f"{dst.shape}"
            )
        dst[...] = src.astype(dst.dtype)
