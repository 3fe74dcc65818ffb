"""Versioned checkpoint archives.

An archive is a ``torch.save`` dict::

    {"format": "vtryon-ckpt", "version": 1, "arch": {...}, "arch_digest": sha256,
     "params": {subnet_name: state_dict}, "optim": {...}, "meta": {...}}

Loading checks the digest against the stored architecture and, when given,
against the caller's architecture config.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

import torch

from .config import ArchConfig, arch_digest

FORMAT = "vtryon-ckpt"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, arch: ArchConfig, modules: dict, optimizers: dict | None = None,
                    meta: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = {}
    for name, module in modules.items():
        for sub, child in module.named_children():
            params[f"{name}.{sub}"] = child.state_dict()
        own = {k: v for k, v in module.state_dict().items() if "." not in k}
        if own:
            params[f"{name}.__self__"] = own
    archive = {
        "format": FORMAT,
        "version": VERSION,
        "arch": dataclasses.asdict(arch),
        "arch_digest": arch_digest(arch),
        "params": params,
        "optim": {k: o.state_dict() for k, o in (optimizers or {}).items()},
        "meta": dict(meta or {}),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(archive, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, arch: ArchConfig | None = None) -> dict:
    try:
        archive = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # corrupt or foreign file
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(archive, dict) or archive.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} archive")
    if archive.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {archive.get('version')}")
    stored = ArchConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in archive["arch"].items()})
    if arch_digest(stored) != archive["arch_digest"]:
        raise CheckpointError(f"{path}: architecture digest mismatch (archive corrupted)")
    if arch is not None and arch_digest(arch) != archive["arch_digest"]:
        raise CheckpointError(f"{path}: checkpoint architecture differs from the configured one")
    archive["arch_config"] = stored
    return archive


def restore(archive: dict, name: str, module: torch.nn.Module):
    """Load every ``name.*`` blob of ``archive`` into ``module``."""
    found = False
    for key, state in archive["params"].items():
        prefix, _, sub = key.partition(".")
        if prefix != name:
            continue
        found = True
        if sub == "__self__":
            module.load_state_dict(state, strict=False)
        else:
            getattr(module, sub).load_state_dict(state)
    if not found:
        raise CheckpointError(f"checkpoint has no parameters for {name!r}")
    return module
