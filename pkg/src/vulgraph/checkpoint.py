"""Versioned checkpoint container.

Stored as a safetensors file. Tensor keys are ``student.<k>.ggnn.A.<kind>.<dir>``,
``student.<k>.ggnn.gru.Wz`` ..., ``student.<k>.readout.conv_z.<i>.weight`` ...,
``aux.W`` and ``provider.<name>``. Everything else (config, vocabulary, model
shape, selected student) sits in the header metadata as one sorted JSON blob,
so save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save

from .config import TrainConfig
from .errors import ConfigError
from .ggnn import ModelShape

FORMAT = "vulgraph-checkpoint"
META_KEY = "vulgraph"
VERSION = 1

_A_INTERNAL = re.compile(r"^ggnn\.A\.([A-Z]+)_(fwd|rev)$")
_A_EXTERNAL = re.compile(r"^ggnn\.A\.([A-Z]+)\.(fwd|rev)$")


def _export_key(key: str) -> str:
    return _A_INTERNAL.sub(r"ggnn.A.\1.\2", key)


def _import_key(key: str) -> str:
    return _A_EXTERNAL.sub(r"ggnn.A.\1_\2", key)


@dataclass
class Checkpoint:
    config: TrainConfig
    vocab: list[str]
    shape: ModelShape
    students: list[dict[str, torch.Tensor]]
    aux_W: torch.Tensor
    provider_spec: str
    provider_state: dict[str, torch.Tensor] = field(default_factory=dict)
    selected_student: int = 0
    best_valid_f1: float = 0.0
    version: int = VERSION

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for k, state in enumerate(self.students):
            for name, t in state.items():
                out[f"student.{k}.{_export_key(name)}"] = t
        out["aux.W"] = self.aux_W
        for name, t in self.provider_state.items():
            out[f"provider.{name}"] = t
        return {k: v.detach().contiguous().clone() for k, v in out.items()}

    def metadata(self) -> dict:
        return {
            "version": self.version,
            "config": self.config.to_dict(),
            "vocab": list(self.vocab),
            "shape": asdict(self.shape),
            "students": len(self.students),
            "provider": self.provider_spec,
            "selected_student": self.selected_student,
            "best_valid_f1": self.best_valid_f1,
        }

    def to_bytes(self) -> bytes:
        # safetensors writes metadata from a hash map, so several keys would come out
        # in varying order; a single key keeps the header byte-stable
        meta = json.dumps(dict(self.metadata(), format=FORMAT), sort_keys=True)
        return st_save(self.tensors(), metadata={META_KEY: meta})

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        (header_len,) = struct.unpack("<Q", blob[:8])
        header = json.loads(blob[8:8 + header_len])
        meta_raw = header.get("__metadata__", {})
        meta = json.loads(meta_raw[META_KEY]) if META_KEY in meta_raw else {}
        if meta.get("format") != FORMAT:
            raise ConfigError("not a vulgraph checkpoint")
        if meta["version"] != VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta['version']}")
        tensors = st_load(blob)
        students = [{} for _ in range(meta["students"])]
        provider_state = {}
        for key, t in tensors.items():
            if key.startswith("student."):
                _, k, name = key.split(".", 2)
                students[int(k)][_import_key(name)] = t
            elif key.startswith("provider."):
                provider_state[key[len("provider."):]] = t
        return cls(
            config=TrainConfig.from_dict(meta["config"]),
            vocab=meta["vocab"],
            shape=ModelShape(**meta["shape"]),
            students=students,
            aux_W=tensors["aux.W"],
            provider_spec=meta["provider"],
            provider_state=provider_state,
            selected_student=meta["selected_student"],
            best_valid_f1=meta["best_valid_f1"],
            version=meta["version"],
        )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
