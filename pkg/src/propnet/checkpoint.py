"""Checkpoint container.

Layout: the header line ``propnet-ckpt-v1\\n``, an 8-byte little-endian
manifest length, the UTF-8 JSON manifest (sorted keys) and the raw tensor
bytes. The manifest holds the network config, JSON-able training state and
a table of tensors (name, dtype, shape, offset, nbytes). Serialization is
deterministic, so saving a loaded checkpoint reproduces the file byte for
byte.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

HEADER = b"propnet-ckpt-v1\n"

_DTYPES = {
    torch.float32: "f4", torch.float64: "f8", torch.int64: "i8",
    torch.int32: "i4", torch.uint8: "u1", torch.bool: "b1",
}
_FROM_CODE = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    network: dict
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table, blobs, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().tobytes()
        table.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"network": ckpt.network, "meta": ckpt.meta, "tensors": table},
                          sort_keys=True, separators=(",", ":")).encode()
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(HEADER)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Parse a checkpoint completely; raises CheckpointError on any defect."""
    data = Path(path).read_bytes()
    if not data.startswith(HEADER):
        got = data[: len(HEADER)].split(b"\n")[0][:40]
        raise CheckpointError(f"expected header {HEADER.strip().decode()!r}, found {got!r}")
    pos = len(HEADER)
    try:
        (n,) = struct.unpack_from("<Q", data, pos)
        manifest = json.loads(data[pos + 8: pos + 8 + n])
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from exc
    base = pos + 8 + n
    tensors = {}
    for entry in manifest["tensors"]:
        start = base + entry["offset"]
        raw = data[start: start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"truncated tensor {entry['name']}")
        dtype = _FROM_CODE[entry["dtype"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]) if entry["dtype"] != "b1" else np.bool_)
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(dtype).reshape(entry["shape"])
    return Checkpoint(manifest["network"], tensors, manifest.get("meta", {}))


def network_to_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def model_checkpoint(model, meta: dict | None = None, optimizer=None) -> Checkpoint:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    meta = dict(meta or {})
    if optimizer is not None:
        state = optimizer.state_dict()
        for idx, slots in state["state"].items():
            for slot, val in slots.items():
                tensors[f"optim/{idx}/{slot}"] = torch.as_tensor(val)
        meta["optimizer_groups"] = state["param_groups"]
    return Checkpoint(network_to_dict(model.cfg), tensors, meta)


def build_model(ckpt: Checkpoint):
    from .model import NetworkConfig, PropNet

    model = PropNet(NetworkConfig(**ckpt.network))
    model.load_state_dict(ckpt.section("model"), strict=True)
    return model


def optimizer_state(ckpt: Checkpoint) -> dict | None:
    groups = ckpt.meta.get("optimizer_groups")
    if groups is None:
        return None
    state: dict[int, dict] = {}
    for name, t in ckpt.section("optim").items():
        idx, slot = name.split("/", 1)
        state.setdefault(int(idx), {})[slot] = t
    groups = [dict(g, betas=tuple(g["betas"])) if "betas" in g else dict(g) for g in groups]
    return {"state": state, "param_groups": groups}
