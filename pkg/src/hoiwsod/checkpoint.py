"""Parameter archives with a JSON manifest, written atomically."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import torch
from torch import nn

from .annotations import write_json_atomic


def state_hash(modules: dict[str, nn.Module]) -> str:
    """SHA-256 over parameter names, shapes and raw bytes (file-format independent)."""
    h = hashlib.sha256()
    for block in sorted(modules):
        for name, t in sorted(modules[block].state_dict().items()):
            t = t.detach().cpu().contiguous()
            h.update(f"{block}.{name}:{tuple(t.shape)}:{t.dtype}".encode())
            h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | os.PathLike, modules: dict[str, nn.Module], **meta) -> dict:
    """Write ``path`` (torch archive) and ``path`` + ``.json`` (manifest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {block: m.state_dict() for block, m in modules.items()}
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(state, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    manifest = {
        "blocks": {
            block: {name: list(t.shape) for name, t in m.state_dict().items()}
            for block, m in modules.items()
        },
        "sha256": state_hash(modules),
        **meta,
    }
    write_json_atomic(manifest_path(path), manifest)
    return manifest


def manifest_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".json")


def load_manifest(path: str | os.PathLike) -> dict:
    with open(manifest_path(path)) as fh:
        return json.load(fh)


def load_state(path: str | os.PathLike) -> dict:
    return torch.load(path, map_location="cpu", weights_only=True)


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
