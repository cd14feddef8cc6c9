"""Fingerprinted checkpoint files.

A checkpoint is a ``torch.save`` dict with a ``header`` (format, topology,
config fingerprint, provenance) and named state dicts (``segnet``,
``clsnet``, ``pretrain_decoder`` ...). Loading into a model built from a
different topology fails before any tensor is copied.
"""
from __future__ import annotations

import hashlib
import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from .backbone import BackboneConfig

FORMAT = "histomorph-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def state_fingerprint(state: dict) -> str:
    h = hashlib.sha256()
    for name, t in sorted(state.items()):
        h.update(name.encode())
        if isinstance(t, torch.Tensor):
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        else:
            h.update(repr(t).encode())
    return h.hexdigest()


@dataclass
class Checkpoint:
    header: dict
    states: dict
    extra: dict

    @property
    def config(self) -> BackboneConfig:
        return BackboneConfig.from_dict(self.header["config"])

    @property
    def fingerprint(self) -> str:
        return self.header["config_fingerprint"]

    @property
    def weights_fingerprint(self) -> str:
        return self.header["weights_fingerprint"]

    def load_into(self, name: str, module: torch.nn.Module) -> None:
        cfg = getattr(module, "config", None)
        if cfg is not None and cfg.fingerprint() != self.fingerprint:
            raise CheckpointError(
                f"checkpoint topology {self.header['preset']}/{self.fingerprint} does not match "
                f"model {cfg.preset}/{cfg.fingerprint()}"
            )
        if name not in self.states:
            raise CheckpointError(f"checkpoint has no {name!r} weights (has {sorted(self.states)})")
        module.load_state_dict(self.states[name])


def make_header(config: BackboneConfig, states: dict, **meta) -> dict:
    combined = hashlib.sha256(
        "".join(f"{k}:{state_fingerprint(v)}" for k, v in sorted(states.items())).encode()
    ).hexdigest()
    header = {
        "format": FORMAT,
        "version": VERSION,
        "preset": config.preset,
        "stride": config.stride,
        "skip_widths": list(config.skip_widths),
        "final_width": config.final_width,
        "config": config.to_dict(),
        "config_fingerprint": config.fingerprint(),
        "weights_fingerprint": combined,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    header.update(meta)
    return header


def atomic_save(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def save_checkpoint(path, config: BackboneConfig, states: dict, extra: dict | None = None, **meta) -> Checkpoint:
    states = {k: {n: t.detach().cpu().clone() for n, t in v.items()} for k, v in states.items() if v is not None}
    header = make_header(config, states, **meta)
    atomic_save({"header": header, "states": states, "extra": extra or {}}, path)
    return Checkpoint(header, states, extra or {})


def load_checkpoint(path, expect: BackboneConfig | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        raw = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # corrupt or foreign file
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    header = raw.get("header") if isinstance(raw, dict) else None
    if not header or header.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    ck = Checkpoint(header, raw["states"], raw.get("extra", {}))
    if expect is not None and expect.fingerprint() != ck.fingerprint:
        raise CheckpointError(
            f"{path}: topology {header['preset']}/{ck.fingerprint} but {expect.preset}/{expect.fingerprint()} expected"
        )
    return ck
