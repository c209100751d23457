#!/usr/bin/env python3
"""
Checkpoint module for the belief-graph laboratory.
Handles the binary parameter archive (versioned header, JSON manifest of
name/shape/dtype/offset, little-endian payloads) and its JSON sidecar.
"""

import json
import logging
import os
import struct
from typing import Any, Dict, Optional, Tuple

import numpy as np

from beliefgraph.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"BGNN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")


def save_checkpoint(path: str, state: Dict[str, np.ndarray], role: str,
                    metadata: Optional[Dict[str, Any]] = None) -> str:
    """Write a parameter archive and a `<path>.json` sidecar

    Args:
        path: Archive path
        state: Arrays by parameter name
        role: Role tag such as "updater-og" or "agent"
        metadata: Extra sidecar fields (variant, config, hashes)

    Returns:
        Archive path
    """
    entries = []
    payloads = []
    offset = 0
    for name in sorted(state):
        array = np.ascontiguousarray(state[name])
        le = array.astype(array.dtype.newbyteorder("<"), copy=False)
        data = le.tobytes(order="C")
        entries.append({"name": name, "shape": list(array.shape), "dtype": array.dtype.str.lstrip("<>|="),
                        "offset": offset, "nbytes": len(data)})
        payloads.append(data)
        offset += len(data)
    manifest = json.dumps({"role": role, "entries": entries}, sort_keys=True).encode("utf-8")

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest)))
        f.write(manifest)
        for data in payloads:
            f.write(data)

    sidecar = {"role": role, "format_version": FORMAT_VERSION}
    sidecar.update(metadata or {})
    with open(path + ".json", "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    logger.info("saved %s checkpoint with %d arrays to %s", role, len(entries), path)
    return path


def load_checkpoint(path: str, role: Optional[str] = None) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read a parameter archive

    Args:
        path: Archive path
        role: Expected role tag, checked when given

    Returns:
        Tuple of (arrays by name, sidecar metadata or {})
    """
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError:
        raise CheckpointError(f"missing checkpoint: {path}") from None
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"truncated checkpoint: {path}")
    magic, version, length = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    try:
        manifest = json.loads(blob[_HEADER.size:_HEADER.size + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt manifest in {path}: {e}") from None
    if role is not None and manifest.get("role") != role:
        raise CheckpointError(f"expected role {role!r}, found {manifest.get('role')!r} in {path}")

    base = _HEADER.size + length
    state = {}
    for entry in manifest["entries"]:
        start = base + entry["offset"]
        chunk = blob[start:start + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError(f"truncated payload for {entry['name']} in {path}")
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        values = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"])
        state[entry["name"]] = values.astype(values.dtype.newbyteorder("="))

    metadata: Dict[str, Any] = {}
    if os.path.isfile(path + ".json"):
        with open(path + ".json", "r", encoding="utf-8") as f:
            metadata = json.load(f)
    metadata.setdefault("role", manifest.get("role"))
    return state, metadata
