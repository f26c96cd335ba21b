"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"BELIEFRL"
    version    u32
    count      u32
    count x entry:
        name_len  u16, name (UTF-8)
        dtype     u8   (1 = float64, 2 = int64, 3 = raw bytes)
        ndim      u8
        dims      ndim x u64
        payload   prod(dims) items, little-endian

See docs/format.md for the entry names a trainer checkpoint contains.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
import torch

from .config import config_from_text
from .errors import ContractError
from .rl import GROUPS, Trainer

MAGIC = b"BELIEFRL"
VERSION = 1
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("u1"): 3}


@dataclass
class Checkpoint:
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config_text(self) -> str:
        return self.arrays["config"].tobytes().decode("utf-8")

    @property
    def meta(self) -> dict:
        return json.loads(self.arrays["meta"].tobytes().decode("utf-8"))

    def params(self) -> Dict[str, Dict[str, torch.Tensor]]:
        out = {g: {} for g in GROUPS}
        for name, arr in self.arrays.items():
            if name.startswith("param/"):
                _, group, key = name.split("/", 2)
                out[group][key] = torch.from_numpy(arr.astype(np.float64)).clone()
        return out


def _as_bytes_array(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).copy()


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.arrays))]
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8")
        elif arr.dtype.kind in "iub" and arr.dtype != np.uint8:
            arr = arr.astype("<i8")
        code = _CODES[arr.dtype]
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> Checkpoint:
    if data[:8] != MAGIC:
        raise ContractError("not a checkpoint file (bad magic)")
    try:
        return Checkpoint(_read_entries(data))
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise ContractError(f"corrupt checkpoint: {exc}") from None


def _read_entries(data: bytes) -> Dict[str, np.ndarray]:
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    off = 16
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode("utf-8")
        off += n
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        dims = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if off + size > len(data):
            raise ValueError(f"entry {name!r} runs past the end of the file")
        arrays[name] = np.frombuffer(data[off:off + size], dtype=dt).reshape(dims).copy()
        off += size
    if off != len(data):
        raise ContractError("trailing bytes after last checkpoint entry")
    return arrays


def save(ckpt: Checkpoint, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


# --------------------------------------------------------------------------
# Trainer <-> checkpoint
# --------------------------------------------------------------------------


def _latent_arrays(latent) -> Dict[str, np.ndarray]:
    if isinstance(latent, torch.Tensor):
        return {"latent/h": latent.detach().numpy()}
    return {f"latent/{k}": getattr(latent, k).detach().numpy() for k in ("h", "z", "logw", "summary")}


def from_trainer(trainer: Trainer) -> Checkpoint:
    meta = {
        "frames": trainer.frames,
        "segment": trainer.segment_index,
        "chain_steps": trainer.chain_steps,
        "episodes": trainer.episodes,
        "returns": list(trainer.returns),
        "venv": trainer.venv.get_state(),
    }
    arrays = {
        "config": _as_bytes_array(trainer.config.to_text().encode("utf-8")),
        "meta": _as_bytes_array(json.dumps(meta, sort_keys=True).encode("utf-8")),
        "rng/torch": trainer.generator.get_state().numpy().copy(),
    }
    for g in GROUPS:
        for k in sorted(trainer.params[g]):
            arrays[f"param/{g}/{k}"] = trainer.params[g][k].detach().numpy().copy()
    for k in sorted(trainer.opt_state):
        arrays[f"opt/{k}"] = trainer.opt_state[k].numpy().copy()
    arrays.update(_latent_arrays(trainer.latent))
    arrays["prev_action"] = np.asarray(trainer.prev_action)
    arrays["obs"] = np.asarray(trainer.obs, dtype=np.float64)
    return Checkpoint(arrays)


def to_trainer(ckpt: Checkpoint, env=None) -> Trainer:
    """Rebuild a trainer that continues exactly where the checkpoint left off."""
    from .encoders import ParticleBelief

    config = config_from_text(ckpt.config_text, environ={})
    trainer = Trainer(config, env)
    meta = ckpt.meta
    params = ckpt.params()
    for g in GROUPS:
        if set(params[g]) != set(trainer.params[g]):
            raise ContractError(f"checkpoint parameter group {g!r} does not match the config")
        for k, v in params[g].items():
            with torch.no_grad():
                trainer.params[g][k].copy_(v)
    trainer.opt_state = {
        name[4:]: torch.from_numpy(arr.copy()) for name, arr in ckpt.arrays.items() if name.startswith("opt/")
    }
    trainer.generator.set_state(torch.from_numpy(ckpt.arrays["rng/torch"].copy()))
    trainer.venv.set_state(meta["venv"])
    trainer.frames = meta["frames"]
    trainer.segment_index = meta["segment"]
    trainer.chain_steps = meta["chain_steps"]
    trainer.episodes = meta["episodes"]
    trainer.returns.clear()
    trainer.returns.extend(meta["returns"])
    a = ckpt.arrays
    if "latent/z" in a:
        trainer.latent = ParticleBelief(*(torch.from_numpy(a[f"latent/{k}"].copy())
                                          for k in ("h", "z", "logw", "summary")))
    else:
        trainer.latent = torch.from_numpy(a["latent/h"].copy())
    trainer.prev_action = a["prev_action"].copy()
    trainer.obs = a["obs"].copy()
    return trainer
