"""Single-file checkpoint container shared by every trained artifact.

Layout: ``MAGIC`` | uint64 LE header length | UTF-8 JSON header | payload.
The payload is the concatenation of little-endian float32 blobs; the header's
``index`` maps each name to its byte offset and shape, and ``payload_sha256``
guards against truncation or corruption.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"GPSGENCK"
FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def _blob(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    arr = np.asarray(t, dtype="<f4")
    # ascontiguousarray promotes 0-d arrays to 1-d, so restore the shape
    return np.ascontiguousarray(arr).reshape(arr.shape)


def save_checkpoint(path, header: dict, tensors: dict[str, torch.Tensor]) -> str:
    """Write atomically and return the sha256 of the whole file."""
    index, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        arr = _blob(tensors[name])
        raw = arr.tobytes()
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    head = dict(header)
    head.update(format=FORMAT_VERSION, dtype="<f4", index=index, payload_sha256=hashlib.sha256(payload).hexdigest())
    head_bytes = canonical_json(head).encode()
    data = MAGIC + struct.pack("<Q", len(head_bytes)) + head_bytes + payload
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _parse_header(fh.read(len(MAGIC) + 8), fh, path)[0]


def _parse_header(prefix: bytes, fh, path):
    if len(prefix) < len(MAGIC) + 8 or prefix[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    (n,) = struct.unpack("<Q", prefix[len(MAGIC):])
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError(f"{path}: truncated header")
    try:
        return json.loads(raw.decode()), n
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc


def load_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            header, _ = _parse_header(fh.read(len(MAGIC) + 8), fh, path)
            payload = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    tensors = {}
    for name, entry in header["index"].items():
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        tensors[name] = torch.from_numpy(arr.astype(np.float32).reshape(entry["shape"]))
    return header, tensors


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_tensors(module: torch.nn.Module, prefix: str = "model.") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "model.") -> None:
    own = module.state_dict()
    found = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    if set(found) != set(own):
        missing = sorted(set(own) - set(found))[:3]
        extra = sorted(set(found) - set(own))[:3]
        raise CheckpointError(f"parameter names disagree (missing {missing}, unexpected {extra})")
    for k, v in found.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise CheckpointError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(own[k].shape)}")
    module.load_state_dict({k: v.to(own[k].dtype) for k, v in found.items()})


def optimizer_tensors(opt: torch.optim.Optimizer, names: dict[int, str]) -> tuple[dict, dict]:
    """Adam-family state as named blobs plus a small JSON summary (per-param step counts)."""
    tensors, steps = {}, {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            tensors[f"optim.exp_avg.{name}"] = st["exp_avg"]
            tensors[f"optim.exp_avg_sq.{name}"] = st["exp_avg_sq"]
            steps[name] = int(st["step"])
    return tensors, steps


def restore_optimizer(opt: torch.optim.Optimizer, names: dict[int, str], tensors: dict, steps: dict) -> None:
    for group in opt.param_groups:
        for p in group["params"]:
            name = names[id(p)]
            if name not in steps:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(steps[name])),
                "exp_avg": tensors[f"optim.exp_avg.{name}"].clone(),
                "exp_avg_sq": tensors[f"optim.exp_avg_sq.{name}"].clone(),
            }


def module_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
