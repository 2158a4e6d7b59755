"""Checkpoint directories: ``manifest.json`` plus raw little-endian ``params.bin``.

The manifest lists each array's name, shape, dtype and byte offset, the
model configs, the optimizer hyperparameters and the training step.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import EncoderConfig, Module
from .optim import Adam

FORMAT = "rtdkit-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
PARAMS = "params.bin"


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    configs: dict[str, EncoderConfig]
    arrays: dict[str, np.ndarray]
    step: int = 0
    kind: str = ""
    optimizer: dict | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(
    path: str | os.PathLike,
    model: Module,
    configs: dict[str, EncoderConfig],
    kind: str,
    optimizer: Adam | None = None,
    step: int = 0,
    extra: dict | None = None,
) -> None:
    arrays = {name: t.data for name, t in model.named_parameters().items()}
    opt_meta = None
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
        s = optimizer.state
        opt_meta = {"step": s.step, "beta1": s.beta1, "beta2": s.beta2, "epsilon": s.epsilon, "weight_decay": s.weight_decay}
    write_arrays(path, arrays, {
        "kind": kind,
        "configs": {k: c.to_dict() for k, c in configs.items()},
        "step": step,
        "optimizer": opt_meta,
        "extra": extra or {},
    })


def write_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        entries = []
        offset = 0
        with open(tmp / PARAMS, "wb") as f:
            for name, arr in arrays.items():
                dt = arr.dtype.newbyteorder("<")
                raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
                entries.append({"name": name, "shape": list(arr.shape), "dtype": dt.str, "offset": offset, "nbytes": len(raw)})
                f.write(raw)
                offset += len(raw)
        manifest = {"format": FORMAT, "version": VERSION, **meta, "params": entries, "total_bytes": offset}
        with open(tmp / MANIFEST, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=1)
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    try:
        with open(path / MANIFEST, encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path / MANIFEST}: unreadable manifest ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} directory")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {manifest.get('version')} unsupported (expected {VERSION})")
    blob = (path / PARAMS).read_bytes() if (path / PARAMS).exists() else b""
    if len(blob) != manifest["total_bytes"]:
        raise CheckpointError(f"{path / PARAMS}: {len(blob)} bytes, manifest expects {manifest['total_bytes']} (truncated?)")
    arrays = {}
    for e in manifest["params"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if n != e["nbytes"] or e["offset"] + n > len(blob):
            raise CheckpointError(f"{path}: entry {e['name']!r} is out of bounds")
        arr = np.frombuffer(blob, dtype=dt, count=n // dt.itemsize, offset=e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dt.newbyteorder("="))
    configs = {k: EncoderConfig.from_dict(v) for k, v in manifest.get("configs", {}).items()}
    return Checkpoint(configs, arrays, manifest.get("step", 0), manifest.get("kind", ""), manifest.get("optimizer"), manifest.get("extra", {}))


def check_configs(ckpt: Checkpoint, expected: dict[str, EncoderConfig]) -> None:
    """Raise CheckpointError naming every config field that disagrees."""
    problems = []
    for key, cfg in expected.items():
        if key not in ckpt.configs:
            problems.append(f"{key}: missing from checkpoint")
            continue
        have, want = ckpt.configs[key].to_dict(), cfg.to_dict()
        for fname in want:
            if have[fname] != want[fname]:
                problems.append(f"{key}.{fname}: checkpoint has {have[fname]}, model has {want[fname]}")
    if problems:
        raise CheckpointError("config mismatch: " + "; ".join(problems))


def restore(ckpt: Checkpoint, model: Module, optimizer: Adam | None = None, strict: bool = True) -> None:
    """Copy arrays into ``model`` (and optimizer moments) by name."""
    params = model.named_parameters()
    for name, t in params.items():
        if name not in ckpt.arrays:
            if strict:
                raise CheckpointError(f"checkpoint lacks parameter {name!r}")
            continue
        src = ckpt.arrays[name]
        if src.shape != t.shape:
            raise CheckpointError(f"parameter {name!r}: checkpoint shape {src.shape}, model shape {t.shape}")
        t.data[...] = src
    if optimizer is not None:
        if ckpt.optimizer is None:
            raise CheckpointError("checkpoint carries no optimizer state")
        optimizer.load_state_arrays(ckpt.arrays, ckpt.optimizer["step"])
