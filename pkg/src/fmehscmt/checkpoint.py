"""Checkpoint directories: ``manifest.json`` plus a raw ``params.bin`` blob.

The blob holds little-endian float32 arrays back to back in index order.
Model parameters come first, then the optimizer moments as ``optim.m.<name>``
and ``optim.v.<name>``. Sampling streams are keyed by (seed, epoch, index),
so the seed and the finished-epoch count are the complete RNG state.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .backbone import ModelConfig
from .errors import CheckpointError
from .model import HSCMTNet
from .params import ParamStore
from .training import Adam, TrainConfig, TrainState

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"
FME_ORDER = ["hscmt", "residual"]
_LE32 = np.dtype("<f4")


def _pack(arrays: Dict[str, np.ndarray]) -> Tuple[List[dict], bytes]:
    index, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype=_LE32).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return index, b"".join(chunks)


def save_checkpoint(net: HSCMTNet, state: Optional[TrainState], path,
                    train_config: Optional[TrainConfig] = None,
                    params: Optional[Dict[str, np.ndarray]] = None,
                    metadata: Optional[dict] = None) -> Path:
    """Write ``net`` (or the given ``params`` snapshot) and optional state.

    ``metadata`` is stored verbatim (class names, split seed and the like).
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = dict(params) if params is not None else net.store.state()
    missing = [n for n in net.store.names() if n not in arrays]
    if missing:
        raise CheckpointError(f"parameter {missing[0]!r} missing from snapshot")
    opt_step = 0
    if state is not None and state.optimizer is not None and params is None:
        opt = state.optimizer
        opt_step = opt.step_count
        arrays.update({f"optim.m.{k}": v for k, v in opt.m.items()})
        arrays.update({f"optim.v.{k}": v for k, v in opt.v.items()})
    index, blob = _pack(arrays)
    epoch = state.epoch if state is not None else 0
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": net.config.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "epoch": epoch,
        "rng": {"seed": train_config.seed if train_config is not None else None,
                "epoch": epoch},
        "fme_order": FME_ORDER,
        "optimizer_step": opt_step,
        "best_val_acc": state.best_val_acc if state is not None else None,
        "history": state.history if state is not None else [],
        "metadata": metadata or {},
        "index": index,
    }
    tmp = path / (BLOB + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path / BLOB)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Validated manifest plus every indexed array."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint at {path}: {exc.filename} missing") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path / MANIFEST}: invalid JSON ({exc})") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"format_version {version!r} unsupported (expected {FORMAT_VERSION})")
    index = manifest.get("index", [])
    expected = sum(e["nbytes"] for e in index)
    if len(blob) != expected:
        raise CheckpointError(f"{BLOB} holds {len(blob)} bytes, index expects {expected}")
    arrays: Dict[str, np.ndarray] = {}
    for e in index:
        shape = tuple(e["shape"])
        if int(np.prod(shape, dtype=np.int64)) * 4 != e["nbytes"]:
            raise CheckpointError(f"entry {e['name']!r}: byte length does not match shape {shape}")
        if e["name"] in arrays:
            raise CheckpointError(f"entry {e['name']!r} indexed twice")
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=_LE32).reshape(shape).astype(np.float32)
    return manifest, arrays


def load_checkpoint(path, dtype=np.float32) -> Tuple[HSCMTNet, TrainState, Optional[TrainConfig]]:
    manifest, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(manifest["model_config"])
    net = HSCMTNet(cfg, seed=0, dtype=dtype)
    params = {}
    for name in net.store.names():
        if name not in arrays:
            raise CheckpointError(f"parameter {name!r} missing from checkpoint")
        if arrays[name].shape != net.store[name].shape:
            raise CheckpointError(f"parameter {name!r}: stored shape {arrays[name].shape} "
                                  f"!= model shape {net.store[name].shape}")
        params[name] = arrays[name]
    net.store.load_state(params)
    tcfg = manifest.get("train_config")
    tcfg = TrainConfig.from_dict(tcfg) if tcfg else None
    state = TrainState(epoch=int(manifest.get("epoch", 0)),
                       history=list(manifest.get("history", [])))
    if manifest.get("best_val_acc") is not None:
        state.best_val_acc = float(manifest["best_val_acc"])
    if any(k.startswith("optim.") for k in arrays):
        opt = Adam(net.store, tcfg.beta1, tcfg.beta2, tcfg.eps) if tcfg else Adam(net.store)
        for name in opt.m:
            for slot in ("m", "v"):
                key = f"optim.{slot}.{name}"
                if key not in arrays:
                    raise CheckpointError(f"optimizer entry {key!r} missing from checkpoint")
        opt.load_state({"step": manifest.get("optimizer_step", 0),
                        "m": {n: arrays[f"optim.m.{n}"] for n in opt.m},
                        "v": {n: arrays[f"optim.v.{n}"] for n in opt.v}})
        state.optimizer = opt
    return net, state, tcfg


def import_weights(store: ParamStore, path) -> Dict[str, List[str]]:
    """Copy matching parameters from a checkpoint into ``store``.

    Entries are matched by exact path and shape. Returns the lists of
    ``loaded`` names, checkpoint entries with no ``unmatched`` destination,
    ``shape_mismatch`` names, and store parameters left ``untouched``.
    """
    _, arrays = read_checkpoint(path)
    report = {"loaded": [], "unmatched": [], "shape_mismatch": [], "untouched": []}
    updates = {}
    for name, arr in arrays.items():
        if name.startswith("optim."):
            continue
        if name not in store:
            report["unmatched"].append(name)
        elif store[name].shape != arr.shape:
            report["shape_mismatch"].append(name)
        else:
            updates[name] = arr
            report["loaded"].append(name)
    store.load_state(updates)
    report["untouched"] = [n for n in store.names() if n not in updates]
    return report
