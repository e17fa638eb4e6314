"""Checkpoint container.

Layout (all little-endian)::

    8 bytes   magic b"OCFCKPT\\0"
    uint32    schema version
    uint64    header length L
    L bytes   UTF-8 JSON header (sorted keys): stage, config, meta, tensors
    ...       raw tensor payloads, concatenated in header order

Each header tensor entry records name, dtype, shape, offset and nbytes,
with offsets relative to the end of the header. Serialization is a pure
function of the contents, so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"OCFCKPT\x00"
SCHEMA_VERSION = 1

_DTYPES = {
    torch.float32: "f32",
    torch.float64: "f64",
    torch.int64: "i64",
    torch.int32: "i32",
    torch.bool: "bool",
}
_NP = {"f32": "<f4", "f64": "<f8", "i64": "<i8", "i32": "<i4", "bool": "|b1"}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    stage: str
    config: dict
    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k[len("model/"):]: v for k, v in self.tensors.items() if k.startswith("model/")}

    def optimizer_tensors(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith("optim/")}


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, payload, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        code = _DTYPES[t.dtype]
        raw = np.ascontiguousarray(t.numpy(), dtype=_NP[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"stage": ckpt.stage, "config": ckpt.config, "meta": ckpt.meta, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", ckpt.schema_version, len(header)) + header + b"".join(payload)


def from_bytes(raw: bytes, expect_schema: int | None = SCHEMA_VERSION) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if expect_schema is not None and version != expect_schema:
        raise CheckpointError(f"checkpoint schema {version} != supported {expect_schema}")
    header = json.loads(raw[20:20 + hlen].decode())
    base = 20 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"truncated tensor {e['name']}")
        arr = np.frombuffer(buf, dtype=_NP[e["dtype"]]).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr).to(_TORCH[e["dtype"]])
    return Checkpoint(header["stage"], header["config"], tensors, header["meta"], version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path, expect_schema: int | None = SCHEMA_VERSION) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"missing checkpoint {p}")
    return from_bytes(p.read_bytes(), expect_schema)


def pack_optimizer(opt: torch.optim.Optimizer, names: dict[int, str]) -> tuple[dict, dict]:
    """Flatten Adam-style state into named tensors plus JSON group settings.

    names maps id(param) -> parameter name.
    """
    tensors = {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            pname = names[id(p)]
            for key, val in st.items():
                tv = val if isinstance(val, torch.Tensor) else torch.tensor(val)
                tensors[f"optim/{pname}/{key}"] = tv
    groups = [{k: v for k, v in g.items() if k != "params"} | {"params": [names[id(p)] for p in g["params"]]}
              for g in opt.param_groups]
    return tensors, {"param_groups": groups}


def unpack_optimizer(opt: torch.optim.Optimizer, tensors: dict, groups_meta: dict, params_by_name: dict) -> None:
    for group, saved in zip(opt.param_groups, groups_meta["param_groups"]):
        for k, v in saved.items():
            if k != "params":
                group[k] = v
    for name, p in params_by_name.items():
        prefix = f"optim/{name}/"
        st = {k[len(prefix):]: v.clone() for k, v in tensors.items() if k.startswith(prefix)}
        if st:
            opt.state[p] = st
