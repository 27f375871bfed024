"""Checkpoint directories and dataset fingerprints."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .cmf import read_cmf, write_cmf
from .graph import KnnGraph

CHECKPOINT_JSON = "checkpoint.json"
KNN_FILE = "knn.npz"


class CheckpointError(RuntimeError):
    pass


def file_fingerprint(path: str | Path) -> dict:
    p = Path(path)
    h = hashlib.sha256()
    with open(p, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return {"path": str(p), "bytes": p.stat().st_size, "sha256": h.hexdigest()}


def dataset_fingerprint(data_dir: str | Path) -> dict:
    d = Path(data_dir)
    names = ["users.txt", "items.txt", "train.tsv", "val.tsv", "test.tsv"]
    return {n: {k: v for k, v in file_fingerprint(d / n).items() if k != "path"} for n in names}


def _file_name(param: str) -> str:
    return param.replace("/", "_") + ".cmf"


def save_checkpoint(
    out_dir: str | Path,
    params: Mapping[str, torch.Tensor],
    knn: tuple[KnnGraph, KnnGraph] | None,
    meta: dict,
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, t in params.items():
        arr = t.detach().cpu().numpy()
        shapes[name] = list(arr.shape)
        write_cmf(out / _file_name(name), arr.reshape(1, -1) if arr.ndim == 1 else arr)
    if knn is not None and knn[0] is not None:
        user, item = knn
        np.savez(
            out / KNN_FILE,
            user_indices=user.indices, user_weights=user.weights,
            item_indices=item.indices, item_weights=item.weights,
        )
    meta = dict(meta, params=shapes)
    (out / CHECKPOINT_JSON).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(ckpt_dir: str | Path, dtype: torch.dtype = torch.float32):
    """Return ``(params, knn_or_None, meta)``."""
    d = Path(ckpt_dir)
    meta_path = d / CHECKPOINT_JSON
    if not meta_path.exists():
        raise CheckpointError(f"{d}: no {CHECKPOINT_JSON}")
    meta = json.loads(meta_path.read_text())
    params = {}
    for name, shape in meta["params"].items():
        arr = read_cmf(d / _file_name(name))
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"{name}: stored {arr.shape}, expected {shape}")
        params[name] = torch.from_numpy(arr.reshape(shape).copy()).to(dtype).requires_grad_(True)
    knn = None
    if (d / KNN_FILE).exists():
        z = np.load(d / KNN_FILE)
        ui, uw, ii, iw = z["user_indices"], z["user_weights"], z["item_indices"], z["item_weights"]
        knn = (
            KnnGraph(ui.shape[0], ui.shape[1], ui, uw),
            KnnGraph(ii.shape[0], ii.shape[1], ii, iw),
        )
    return params, knn, meta
