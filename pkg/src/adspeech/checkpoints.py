"""Versioned binary checkpoints with a config digest and an access log.

A checkpoint stores one state dict per declared sub-module (e.g. encoder,
decoder, ctc_head, quantizer, projection). Loads go through `Checkpoint`,
which records which sub-modules were actually read, so tests can prove
that classifier construction never touches discarded heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str | Path, modules: dict[str, dict],
                    config_digest: str, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "config_digest": config_digest,
        "meta": dict(meta or {}),
        "modules": {name: sd for name, sd in modules.items()},
    }
    torch.save(payload, path)


@dataclass
class Checkpoint:
    path: Path
    config_digest: str
    meta: dict
    _modules: dict[str, dict]
    accessed: set[str] = field(default_factory=set)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"no checkpoint at {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as exc:  # torch raises several unpickling types
            raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
        if payload.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {payload.get('format_version')}")
        return cls(path=path, config_digest=payload["config_digest"],
                   meta=payload["meta"], _modules=payload["modules"])

    @property
    def module_names(self) -> tuple[str, ...]:
        return tuple(sorted(self._modules))

    def has(self, name: str) -> bool:
        return name in self._modules

    def state(self, name: str) -> dict:
        if name not in self._modules:
            raise CheckpointError(
                f"{self.path} has no sub-module {name!r}; contains {self.module_names}")
        self.accessed.add(name)
        return self._modules[name]
