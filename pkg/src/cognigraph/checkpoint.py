"""Versioned network checkpoints and content hashing.

A checkpoint is an ``.npz`` archive holding every state-dict tensor under
``param/<name>`` plus a UTF-8 JSON ``meta`` record (net config, active
depths, seed, loss curve, provenance). Zip timestamps make the raw file
bytes unstable, so identity is the hash of the decoded content.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .search_space import CognitiveNet, NetConfig, assemble_network

FORMAT = "cognigraph-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_hash(arrays: dict[str, np.ndarray], meta: dict) -> str:
    h = hashlib.sha256()
    h.update(canonical_json(meta).encode())
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(f"{name}|{a.dtype.str}|{a.shape}".encode())
        h.update(a.tobytes())
    return h.hexdigest()


def atomic_write_bytes(path: str | Path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: str | Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode())


def artifact_hash(path: str | Path) -> str:
    """Content hash: decoded arrays for ``.npz``, raw bytes otherwise."""
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files if k != "meta"}
            meta = json.loads(bytes(z["meta"]).decode()) if "meta" in z.files else {}
        return content_hash(arrays, meta)
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_npz(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> str:
    buf = io.BytesIO()
    payload = dict(arrays)
    payload["meta"] = np.frombuffer(canonical_json(meta).encode(), dtype=np.uint8)
    np.savez(buf, **payload)
    atomic_write_bytes(path, buf.getvalue())
    return content_hash(arrays, meta)


def load_npz(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files if k != "meta"}
            meta = json.loads(bytes(z["meta"]).decode())
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return arrays, meta


@dataclass
class Checkpoint:
    net_config: dict
    state: dict[str, np.ndarray]
    active_depths: dict[str, int]
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net: CognitiveNet, **meta) -> "Checkpoint":
        state = {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}
        return cls(net.cfg.to_dict(), state, net.active_depths(), dict(meta))

    @property
    def encoding_only(self) -> bool:
        return bool(self.meta.get("encoding_only", False))

    def to_network(self, allow_encoding_only: bool = False) -> CognitiveNet:
        if self.encoding_only and not allow_encoding_only:
            raise CheckpointError("identity-padded checkpoint is for graph encoding only, not execution")
        net = assemble_network(NetConfig.from_dict(self.net_config))
        sd = net.state_dict()
        missing = [k for k in sd if k not in self.state]
        if missing:
            block = missing[0].rsplit(".", 2)[0]
            raise CheckpointError(f"checkpoint lacks tensors for {block!r} ({len(missing)} missing)")
        for k, ref in sd.items():
            if tuple(self.state[k].shape) != tuple(ref.shape):
                raise CheckpointError(f"shape mismatch for {k}: {self.state[k].shape} vs {tuple(ref.shape)}")
        dtype = torch.float64 if any(a.dtype == np.float64 for a in self.state.values()) else torch.float32
        net = net.to(dtype)
        net.load_state_dict({k: torch.from_numpy(np.array(self.state[k])) for k in sd})
        net.set_active_depths(self.active_depths)
        return net

    def _record(self):
        arrays = {f"param/{k}": v for k, v in self.state.items()}
        meta = dict(self.meta)
        meta.update(format=FORMAT, version=VERSION, net_config=self.net_config, active_depths=self.active_depths)
        return arrays, meta

    def content_hash(self) -> str:
        return content_hash(*self._record())

    def save(self, path: str | Path) -> str:
        return save_npz(path, *self._record())


def load_checkpoint(path: str | Path) -> Checkpoint:
    arrays, meta = load_npz(path)
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a network checkpoint")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    state = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    net_config = meta.pop("net_config")
    depths = meta.pop("active_depths")
    meta.pop("format")
    meta.pop("version")
    return Checkpoint(net_config, state, depths, meta)
