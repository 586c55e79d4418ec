"""Versioned single-file checkpoint container.

Layout (little-endian throughout):

    bytes 0..7    magic ``b"SSRCKPT1"``
    bytes 8..15   uint64 header length in bytes
    header        UTF-8 JSON:
                    format_version  int (currently 1)
                    kind            str, e.g. "vae" | "teacher" | "stage1" | "stage2"
                    step            int
                    config          arbitrary JSON config snapshot
                    meta            arbitrary JSON (param groups, notes, ...)
                    tensors         list of {name, dtype, shape, offset, nbytes}
    payload       concatenated raw tensor buffers at the stated offsets

Tensors are stored contiguously in the dtypes listed in ``_DTYPES``; offsets
are relative to the start of the payload. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SSRCKPT1"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": (torch.float32, np.float32),
    "float64": (torch.float64, np.float64),
    "int64": (torch.int64, np.int64),
    "int32": (torch.int32, np.int32),
    "uint8": (torch.uint8, np.uint8),
    "bool": (torch.bool, np.bool_),
}
_TORCH_NAMES = {t: name for name, (t, _) in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    kind: str
    step: int
    config: dict
    meta: dict
    tensors: dict[str, torch.Tensor]


def save_checkpoint(
    path: str | Path,
    kind: str,
    step: int,
    config: dict,
    tensors: dict[str, torch.Tensor],
    meta: dict | None = None,
) -> None:
    entries = []
    buffers = []
    offset = 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        dtype_name = _TORCH_NAMES.get(t.dtype)
        if dtype_name is None:
            raise CheckpointError(f"unsupported dtype {t.dtype} for tensor {name!r}")
        raw = t.numpy().tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dtype_name,
                "shape": list(t.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        buffers.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "format_version": FORMAT_VERSION,
            "kind": kind,
            "step": int(step),
            "config": config,
            "meta": meta or {},
            "tensors": entries,
        }
    ).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in buffers:
            f.write(raw)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {header.get('format_version')}"
            )
        payload = f.read()
    tensors: dict[str, torch.Tensor] = {}
    for e in header["tensors"]:
        torch_dtype, np_dtype = _DTYPES[e["dtype"]]
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np_dtype).copy()
        tensors[e["name"]] = torch.from_numpy(arr).reshape(e["shape"]).to(torch_dtype)
    return Checkpoint(
        kind=header["kind"],
        step=header["step"],
        config=header["config"],
        meta=header["meta"],
        tensors=tensors,
    )


# --------------------------------------------------------------------- #
# helpers for packing modules and optimizers


def pack_module(module: torch.nn.Module, prefix: str = "model") -> dict[str, torch.Tensor]:
    return {f"{prefix}/{name}": t for name, t in module.state_dict().items()}


def unpack_module(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "model") -> None:
    state = {
        name[len(prefix) + 1 :]: t for name, t in tensors.items() if name.startswith(prefix + "/")
    }
    module.load_state_dict(state)


def pack_optimizer(opt: torch.optim.Optimizer, prefix: str) -> tuple[dict[str, torch.Tensor], dict]:
    """Flatten optimizer state into named tensors plus a JSON-able skeleton."""
    sd = opt.state_dict()
    tensors: dict[str, torch.Tensor] = {}
    state_meta: dict[str, dict] = {}
    for pid, st in sd["state"].items():
        entry = {}
        for key, value in st.items():
            if torch.is_tensor(value):
                tensors[f"{prefix}/state/{pid}/{key}"] = value
                entry[key] = "tensor"
            else:
                entry[key] = value
        state_meta[str(pid)] = entry
    meta = {"param_groups": sd["param_groups"], "state": state_meta}
    return tensors, meta


def unpack_optimizer(opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor], meta: dict, prefix: str) -> None:
    state: dict[int, dict] = {}
    for pid_str, entry in meta["state"].items():
        pid = int(pid_str)
        st = {}
        for key, value in entry.items():
            if value == "tensor":
                st[key] = tensors[f"{prefix}/state/{pid}/{key}"]
            else:
                st[key] = value
        state[pid] = st
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
