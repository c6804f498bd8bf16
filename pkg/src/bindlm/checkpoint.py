"""Binary checkpoint format and model reconstruction.

Layout (all integers little-endian):

    magic 'BNDK' (4 bytes)
    version         u32
    config JSON     u32 length + UTF-8 bytes
    param count     u32
    per parameter:  name (u32 length + UTF-8) | ndim u32 | dims u32 each
                    | float64 LE row-major data
    RNG state JSON  u32 length + UTF-8 bytes
    step counter    u64
    provenance      u32 count, then u32 length + UTF-8 bytes each

Parameters are stored under qualified names ('lm.tok_emb', 'bind.w0', ...)
in sorted order, and the config JSON uses sorted keys, so identical models
serialize to identical bytes. A load followed by a save reproduces the file,
and forward passes through a reloaded model are bitwise equal.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bind import BindConfig, BindNetwork
from .encoders import EncoderConfig
from .lm import InjectedLM, LMConfig
from .peft import LoraSpec
from .tensor import Tensor
from .tokenizer import Tokenizer

MAGIC = b"BNDK"
VERSION = 1


class CheckpointFormatError(ValueError):
    """The file is not a valid checkpoint; message carries the byte offset."""


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    rng_state: dict
    step: int
    provenance: list[str]

    @staticmethod
    def from_models(lm: InjectedLM, bind: BindNetwork, tok: Tokenizer,
                    encoder_config: EncoderConfig, rng_state: dict,
                    step: int, provenance: list[str]) -> "Checkpoint":
        config = {
            "lm": lm.config.to_dict(),
            "bind": bind.config.to_dict(),
            "encoder": encoder_config.to_dict(),
            "tokenizer": tok.to_dict(),
            "adapters": {
                name: {"rank": spec.rank, "scaling": spec.scaling}
                for name, spec in sorted(lm.adapters.items())
            },
        }
        params = {f"lm.{n}": t.array for n, t in lm.params.items()}
        params.update({f"bind.{n}": t.array for n, t in bind.params.items()})
        return Checkpoint(config, params, _jsonable_rng(rng_state), step, list(provenance))

    def to_models(self) -> tuple[InjectedLM, BindNetwork, Tokenizer]:
        lm_config = LMConfig.from_dict(self.config["lm"])
        bind_config = BindConfig.from_dict(self.config["bind"])
        lm_params = {
            n[3:]: Tensor(a) for n, a in self.params.items() if n.startswith("lm.")
        }
        bind_params = {
            n[5:]: Tensor(a) for n, a in self.params.items() if n.startswith("bind.")
        }
        lm = InjectedLM(lm_config, lm_params)
        lm.adapters = {
            name: LoraSpec(rank=d["rank"], scaling=d["scaling"])
            for name, d in self.config.get("adapters", {}).items()
        }
        bind = BindNetwork(bind_config, bind_params)
        tok = Tokenizer.from_dict(self.config["tokenizer"])
        return lm, bind, tok

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig.from_dict(self.config["encoder"])


_ADAPTER_SUFFIXES = (".lora_a", ".lora_b", ".bias")


def _is_stage2_delta(name: str) -> bool:
    scope, local = name.split(".", 1)
    if scope != "lm":
        return False
    return (
        local.endswith(_ADAPTER_SUFFIXES)
        or local.endswith("_norm")
        or local == "final_norm"
        or local.startswith("gates.")
    )


def split_adapters(ckpt: Checkpoint) -> tuple[Checkpoint, Checkpoint]:
    """Split a tuned checkpoint into base weights and the stage-2 delta.

    The delta checkpoint carries only the adapter matrices, biases, norm
    gains, and gates (plus the adapter metadata), so it can ship without the
    dense base weights and be re-applied with apply_adapters.
    """
    delta_params = {n: a for n, a in ckpt.params.items() if _is_stage2_delta(n)}
    base_params = {n: a for n, a in ckpt.params.items() if not _is_stage2_delta(n)}
    delta = Checkpoint(dict(ckpt.config), delta_params, ckpt.rng_state, ckpt.step,
                       list(ckpt.provenance))
    base_config = dict(ckpt.config)
    base_config["adapters"] = {}
    base = Checkpoint(base_config, base_params, ckpt.rng_state, ckpt.step,
                      list(ckpt.provenance))
    return base, delta


def apply_adapters(base: Checkpoint, delta: Checkpoint) -> Checkpoint:
    """Overlay a stage-2 delta checkpoint onto base weights."""
    params = dict(base.params)
    params.update(delta.params)
    config = dict(base.config)
    config["adapters"] = delta.config.get("adapters", {})
    return Checkpoint(config, params, delta.rng_state, delta.step, list(delta.provenance))


def _jsonable_rng(state: dict) -> dict:
    def conv(v):
        if isinstance(v, np.ndarray):
            return {"__ndarray__": v.tolist(), "dtype": str(v.dtype)}
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, (np.integer,)):
            return int(v)
        return v

    return conv(state)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]

    def put_str(s: str):
        raw = s.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)

    put_str(json.dumps(ckpt.config, sort_keys=True))
    names = sorted(ckpt.params)
    chunks.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        put_str(name)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    put_str(json.dumps(ckpt.rng_state, sort_keys=True))
    chunks.append(struct.pack("<Q", ckpt.step))
    chunks.append(struct.pack("<I", len(ckpt.provenance)))
    for p in ckpt.provenance:
        put_str(p)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes, name: str):
        self.raw = raw
        self.off = 0
        self.name = name

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointFormatError(
                f"{self.name}: truncated at byte offset {self.off} (needed {n} more)"
            )
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw, Path(path).name)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError(
            f"{r.name}: bad magic at byte offset 0, expected {MAGIC!r}"
        )
    version = r.u32()
    if version != VERSION:
        raise CheckpointFormatError(f"{r.name}: unsupported version {version}")
    config = json.loads(r.string())
    params: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.string()
        ndim = r.u32()
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims)
        params[name] = data.copy()
    rng_state = json.loads(r.string())
    step = r.u64()
    provenance = [r.string() for _ in range(r.u32())]
    if r.off != len(raw):
        raise CheckpointFormatError(
            f"{r.name}: {len(raw) - r.off} trailing bytes at offset {r.off}"
        )
    return Checkpoint(config, params, rng_state, step, provenance)
