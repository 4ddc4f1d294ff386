"""Checkpoint container: ``meta.json`` plus a flat little-endian ``tensors.bin``."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .model import ModelConfig, SLUModel

SCHEMA_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}
_TORCH_NAMES = {torch.float32: "float32", torch.float64: "float64", torch.int64: "int64"}


def _write_tensors(tensors: dict, path: Path):
    manifest, offset = [], 0
    digest = hashlib.sha256()
    with open(path, "wb") as f:
        for name, t in tensors.items():
            t = t.detach().cpu()
            if t.dtype not in _TORCH_NAMES:
                raise CheckpointError(f"tensor {name!r} has unsupported dtype {t.dtype}")
            dtype = _TORCH_NAMES[t.dtype]
            blob = np.ascontiguousarray(t.numpy(), dtype=_DTYPES[dtype]).tobytes()
            f.write(blob)
            digest.update(blob)
            manifest.append({"name": name, "shape": list(t.shape), "dtype": dtype,
                             "offset": offset, "nbytes": len(blob)})
            offset += len(blob)
    return manifest, digest.hexdigest()


def _read_tensors(manifest, path: Path, expected_sha=None):
    data = path.read_bytes()
    out = {}
    for entry in manifest:
        name, start, nbytes = entry["name"], entry["offset"], entry["nbytes"]
        if start + nbytes > len(data):
            raise CheckpointError(f"tensor {name!r} is truncated in {path}")
        arr = np.frombuffer(data, dtype=_DTYPES[entry["dtype"]], count=nbytes // np.dtype(_DTYPES[entry["dtype"]]).itemsize,
                            offset=start)
        if arr.size != int(np.prod(entry["shape"], dtype=np.int64)):
            raise CheckpointError(f"tensor {name!r} has {arr.size} values, expected shape {entry['shape']}")
        out[name] = torch.from_numpy(arr.reshape(entry["shape"]).astype(arr.dtype.newbyteorder("=")))
    if expected_sha is not None and hashlib.sha256(data).hexdigest() != expected_sha:
        raise CheckpointError(f"{path}: checksum mismatch")
    return out


def save_checkpoint(model: SLUModel, path, meta: dict | None = None, optimizer=None) -> Path:
    """Write ``model`` (and optionally Adam-style optimizer state) to directory ``path``.

    ``meta`` is merged into ``meta.json`` under the ``"extra"`` key and must be
    JSON-serialisable.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = dict(model.state_dict())
    optim_meta = None
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        optim_meta = {"param_groups": [], "state_keys": {}}
        for group in optimizer.param_groups:
            hyper = {k: v for k, v in group.items() if k != "params"}
            hyper = {k: list(v) if isinstance(v, tuple) else v for k, v in hyper.items()}
            optim_meta["param_groups"].append({**hyper, "params": [names[id(p)] for p in group["params"]]})
            for p in group["params"]:
                for key, value in optimizer.state.get(p, {}).items():
                    if torch.is_tensor(value):
                        tensors[f"optimizer/{names[id(p)]}/{key}"] = value
                        optim_meta["state_keys"].setdefault(names[id(p)], []).append(key)
    manifest, sha = _write_tensors(tensors, path / "tensors.bin")
    config = model.config.to_dict()
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "config_hash": model.config.hash(),
        "layer_groups": model.layer_groups(),
        "heads": {"phoneme": model.phoneme_head is not None, "word": model.word_head is not None},
        "vocab_sizes": {"phones": model.config.num_phones, "words": model.config.num_words,
                        "slots": list(model.config.slot_sizes)},
        "optimizer": optim_meta,
        "tensors": manifest,
        "tensors_sha256": sha,
        "extra": meta or {},
    }
    (path / "meta.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_meta(path) -> dict:
    meta_path = Path(path) / "meta.json"
    if not meta_path.exists():
        raise CheckpointError(f"{path}: no meta.json")
    doc = json.loads(meta_path.read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema version {doc.get('schema_version')}")
    return doc


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    """Rebuild the model saved at ``path``. Returns ``(model, meta)``.

    Raises ``CheckpointError`` naming the offending tensor on a missing,
    truncated or mis-shaped tensor, and on config hash mismatch.
    """
    path = Path(path)
    doc = read_meta(path)
    config = ModelConfig.from_dict(doc["config"])
    if config.hash() != doc["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    if expected_config is not None and expected_config.hash() != doc["config_hash"]:
        raise CheckpointError(f"{path}: checkpoint config differs from the expected config")
    tensors = _read_tensors(doc["tensors"], path / "tensors.bin", doc["tensors_sha256"])
    model = SLUModel(config)
    state = model.state_dict()
    for name, ref in state.items():
        if name not in tensors:
            raise CheckpointError(f"tensor {name!r} missing from {path}")
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(tensors[name].shape)}, model expects {tuple(ref.shape)}"
            )
    model_dtype = {tensors[n].dtype for n in state}
    if len(model_dtype) == 1:
        model.to(dtype=model_dtype.pop())
    model.load_state_dict({n: tensors[n] for n in state})
    doc["optimizer_tensors"] = {n: t for n, t in tensors.items() if n.startswith("optimizer/")}
    return model, doc


def restore_optimizer(optimizer, model: SLUModel, doc: dict):
    """Load optimizer moments saved by ``save_checkpoint`` into ``optimizer``."""
    saved = doc.get("optimizer")
    if not saved:
        raise CheckpointError("checkpoint has no optimizer state")
    params = dict(model.named_parameters())
    tensors = doc["optimizer_tensors"]
    for group, saved_group in zip(optimizer.param_groups, saved["param_groups"]):
        for k, v in saved_group.items():
            if k != "params":
                group[k] = tuple(v) if isinstance(v, list) else v
    for pname, keys in saved["state_keys"].items():
        p = params[pname]
        optimizer.state[p] = {k: tensors[f"optimizer/{pname}/{k}"].clone() for k in keys}
    return optimizer
