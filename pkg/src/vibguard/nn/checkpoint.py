"""Named-tensor archives with a versioned JSON header.

The archive is a zip of `.npy` members with fixed timestamps so identical
contents give identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from ..errors import InvalidInputError

FORMAT = "vibguard-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], optimizer: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    optimizer = optimizer or {}
    header = {
        "format": FORMAT,
        "version": VERSION,
        "tensors": {k: list(np.shape(v)) for k, v in tensors.items()},
        "optimizer": sorted(optimizer),
        "meta": meta or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("header.json", _EPOCH), json.dumps(header, sort_keys=True, indent=1))
        for group, items in (("tensor", tensors), ("optim", optimizer)):
            for k in sorted(items):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(items[k]), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(f"{group}/{k}.npy", _EPOCH), buf.getvalue())


def load_checkpoint(path: str | Path):
    """Returns (tensors, optimizer_state, meta)."""
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"checkpoint not found: {path}")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as e:
        raise InvalidInputError(f"{path}: not a checkpoint archive") from e
    with zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != FORMAT:
            raise InvalidInputError(f"{path}: unknown archive format")
        if header.get("version") != VERSION:
            raise InvalidInputError(f"{path}: unsupported checkpoint version {header.get('version')}")

        def read(name):
            return np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)

        tensors = {k: read(f"tensor/{k}.npy") for k in header["tensors"]}
        optim = {k: read(f"optim/{k}.npy") for k in header["optimizer"]}
    for k, shape in header["tensors"].items():
        if list(tensors[k].shape) != shape:
            raise InvalidInputError(f"{path}: tensor {k} shape does not match header")
    return tensors, optim, header["meta"]
