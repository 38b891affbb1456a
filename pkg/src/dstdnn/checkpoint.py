"""Checkpoint files: a JSON manifest followed by a raw float32 payload.

Layout::

    b"DSTDCKPT" | uint64 LE header length | header JSON (UTF-8) | payload

The header lists every tensor with its name, shape, dtype and byte offset
into the payload, together with the model config and a SHA-256 of the
payload.  Complex filters are stored through their (..., 2) real view, so a
K x C x B bank occupies 2*K*C*B floats.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .config import ModelConfig
from .errors import CheckpointError

MAGIC = b"DSTDCKPT"
FORMAT_VERSION = 1


def _float_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    # num_batches_tracked is an integer counter that momentum-based BN ignores
    return {prefix + k: v for k, v in module.state_dict().items() if v.is_floating_point()}


def save_checkpoint(path: str | Path, model: torch.nn.Module, cfg: ModelConfig,
                    head: torch.nn.Module | None = None, extra: dict[str, Any] | None = None) -> Path:
    tensors = _float_tensors(model)
    if head is not None:
        tensors.update(_float_tensors(head, "aam."))
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                        "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "tensors": entries,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    blob = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
    return path


def read_header(path: str | Path) -> tuple[dict[str, Any], bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + n:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    return header, raw[16 + n:]


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], ModelConfig, dict[str, Any]]:
    """Returns (tensors by name, config, extra metadata)."""
    header, payload = read_header(path)
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version!r}")
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, header promises {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["dtype"] != "float32" or count != e["count"]:
            raise CheckpointError(f"{path}: manifest entry {e['name']} is inconsistent")
        end = e["offset"] + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past the payload")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return tensors, ModelConfig.from_dict(header["config"]), header.get("extra", {})


def split_state(tensors: dict[str, torch.Tensor]) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
    model = {k: v for k, v in tensors.items() if not k.startswith("aam.")}
    head = {k[4:]: v for k, v in tensors.items() if k.startswith("aam.")}
    return model, head


def load_model(path: str | Path):
    """Rebuild a DSTDNN from a checkpoint, in eval mode."""
    from .network import DSTDNN

    tensors, cfg, extra = load_checkpoint(path)
    model = DSTDNN(cfg)
    state, _ = split_state(tensors)
    expected = _float_tensors(model)
    missing = set(expected) - set(state)
    unexpected = set(state) - set(expected)
    if missing or unexpected:
        raise CheckpointError(
            f"{path}: parameter mismatch (missing {sorted(missing)[:3]}, unexpected {sorted(unexpected)[:3]})")
    for name, t in state.items():
        if tuple(t.shape) != tuple(expected[name].shape):
            raise CheckpointError(f"{path}: {name} has shape {tuple(t.shape)}, "
                                  f"model expects {tuple(expected[name].shape)}")
    model.load_state_dict(state, strict=False)
    model.eval()
    return model, cfg, extra
