"""Interaction loading, k-core filtering, per-user splitting and feature I/O."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .cmf import read_cmf, write_cmf

log = logging.getLogger(__name__)

MODALITIES = ("behavior", "textual", "visual")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class InteractionTable:
    """Deduplicated implicit-feedback pairs over dense user/item indices.

    ``pairs`` is an int64 array of shape (n, 2) holding (user, item).
    ``user_ids[k]`` is the raw id of dense user k (same for items).
    """

    pairs: np.ndarray
    user_ids: list[str]
    item_ids: list[str]
    empty_after_filter: bool = False

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def user_id_map(self) -> dict[str, int]:
        return {u: k for k, u in enumerate(self.user_ids)}

    @property
    def item_id_map(self) -> dict[str, int]:
        return {i: k for k, i in enumerate(self.item_ids)}

    def __len__(self) -> int:
        return len(self.pairs)

    def user_items(self) -> list[np.ndarray]:
        """Sorted item indices per user."""
        order = np.lexsort((self.pairs[:, 1], self.pairs[:, 0]))
        p = self.pairs[order]
        bounds = np.searchsorted(p[:, 0], np.arange(self.n_users + 1))
        return [p[bounds[u]:bounds[u + 1], 1] for u in range(self.n_users)]

    def pair_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(i)) for u, i in self.pairs}


@dataclass
class FeatureMatrix:
    modality: str
    values: np.ndarray

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class DatasetSplit:
    train: InteractionTable
    val: InteractionTable
    test: InteractionTable
    seed: int
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items


def _empty_pairs() -> np.ndarray:
    return np.zeros((0, 2), dtype=np.int64)


def _dedup(pairs: np.ndarray) -> np.ndarray:
    """Drop repeated rows, keeping first occurrences in their original order."""
    if len(pairs) == 0:
        return _empty_pairs()
    _, first = np.unique(pairs, axis=0, return_index=True)
    return pairs[np.sort(first)]


def table_from_raw(raw_pairs: Sequence[tuple[str, str]]) -> InteractionTable:
    """Build a table assigning dense indices in first-appearance order."""
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    out = np.empty((len(raw_pairs), 2), dtype=np.int64)
    for k, (u, i) in enumerate(raw_pairs):
        out[k, 0] = users.setdefault(u, len(users))
        out[k, 1] = items.setdefault(i, len(items))
    return InteractionTable(_dedup(out), list(users), list(items))


def load_interactions(path: str | Path) -> InteractionTable:
    raw: list[tuple[str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) < 2 or not fields[0] or not fields[1]:
                raise DataError(f"{path}: line {lineno}: expected at least 2 tab-separated fields")
            raw.append((fields[0], fields[1]))
    if not raw:
        raise DataError(f"{path}: no interactions")
    return table_from_raw(raw)


def _reindex(table: InteractionTable, keep: np.ndarray) -> InteractionTable:
    pairs = table.pairs[keep]
    if len(pairs) == 0:
        return InteractionTable(_empty_pairs(), [], [], empty_after_filter=True)
    # ascending old index keeps first-appearance order
    old_u = np.unique(pairs[:, 0])
    old_i = np.unique(pairs[:, 1])
    new_pairs = np.stack(
        [np.searchsorted(old_u, pairs[:, 0]), np.searchsorted(old_i, pairs[:, 1])], axis=1
    ).astype(np.int64)
    return InteractionTable(
        new_pairs,
        [table.user_ids[k] for k in old_u],
        [table.item_ids[k] for k in old_i],
    )


def kcore_filter(table: InteractionTable, k: int) -> InteractionTable:
    """Maximal bipartite k-core: peel users/items of degree < k to a fixed point."""
    if k < 1:
        raise ValueError("k must be >= 1")
    keep = np.ones(len(table.pairs), dtype=bool)
    u, i = table.pairs[:, 0], table.pairs[:, 1]
    while True:
        deg_u = np.bincount(u[keep], minlength=table.n_users)
        deg_i = np.bincount(i[keep], minlength=table.n_items)
        new_keep = keep & (deg_u[u] >= k) & (deg_i[i] >= k)
        if np.array_equal(new_keep, keep):
            break
        keep = new_keep
    out = _reindex(table, keep)
    if out.empty_after_filter:
        log.warning("%d-core filter removed every interaction", k)
    return out


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(
    table: InteractionTable,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetSplit:
    """Per-user random split.

    Each user with n interactions gets ``max(1, round(r*n))`` test and val
    items (half-up rounding), the rest go to train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive reals summing to 1, got {ratios}")
    _, val_r, test_r = ratios
    rng = np.random.default_rng(seed)
    parts: dict[str, list[np.ndarray]] = {"train": [], "val": [], "test": []}
    for u, items in enumerate(table.user_items()):
        n = len(items)
        if n < 3:
            raise DataError(f"user {table.user_ids[u]!r} has {n} interactions; at least 3 required")
        n_test = max(1, _round_half_up(test_r * n))
        n_val = max(1, _round_half_up(val_r * n))
        if n - n_test - n_val < 1:
            raise DataError(f"user {table.user_ids[u]!r}: ratios leave no training interactions")
        shuffled = rng.permutation(items)
        chunks = {
            "test": shuffled[:n_test],
            "val": shuffled[n_test:n_test + n_val],
            "train": shuffled[n_test + n_val:],
        }
        for name, chunk in chunks.items():
            parts[name].append(np.stack([np.full(len(chunk), u), np.sort(chunk)], axis=1))

    def make(name: str) -> InteractionTable:
        pairs = np.concatenate(parts[name]).astype(np.int64) if parts[name] else _empty_pairs()
        return InteractionTable(pairs, list(table.user_ids), list(table.item_ids))

    return DatasetSplit(make("train"), make("val"), make("test"), seed=seed, ratios=ratios)


def save_features(path: str | Path, features: FeatureMatrix | np.ndarray) -> None:
    values = features.values if isinstance(features, FeatureMatrix) else features
    write_cmf(path, values)


def load_features(
    path: str | Path, expected_items: int, modality: str = "textual"
) -> FeatureMatrix:
    values = read_cmf(path)
    if values.shape[0] != expected_items:
        raise DataError(
            f"{path}: feature rows ({values.shape[0]}) do not match item count ({expected_items})"
        )
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite feature values")
    return FeatureMatrix(modality, values)


def generate_synthetic(
    n_users: int,
    n_items: int,
    n_clusters: int,
    feat_dims: Sequence[int],
    interactions_per_user: int,
    noise: float,
    seed: int,
    modalities: Sequence[str] = ("textual", "visual"),
) -> tuple[InteractionTable, list[FeatureMatrix]]:
    """Planted-cluster dataset: users favour one item cluster, features encode clusters."""
    if n_clusters < 1 or n_clusters > n_items:
        raise ValueError("need 1 <= n_clusters <= n_items")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    if interactions_per_user > n_items:
        raise ValueError("interactions_per_user exceeds n_items")
    rng = np.random.default_rng(seed)
    cluster = np.arange(n_items) % n_clusters
    members = [np.flatnonzero(cluster == c) for c in range(n_clusters)]

    features = []
    for k, dim in enumerate(feat_dims):
        centroids = rng.standard_normal((n_clusters, dim))
        vals = centroids[cluster] + noise * rng.standard_normal((n_items, dim))
        name = modalities[k] if k < len(modalities) else f"modality{k}"
        features.append(FeatureMatrix(name, vals.astype(np.float32)))

    pairs = np.empty((n_users * interactions_per_user, 2), dtype=np.int64)
    row = 0
    for u in range(n_users):
        pref = members[rng.integers(n_clusters)]
        chosen: set[int] = set()
        n_pref_taken = 0
        while len(chosen) < interactions_per_user:
            if rng.random() < 0.9 and n_pref_taken < len(pref):
                item = int(pref[rng.integers(len(pref))])
            else:
                item = int(rng.integers(n_items))
            if item not in chosen:
                chosen.add(item)
                n_pref_taken += int(cluster[item] == cluster[pref[0]])
                pairs[row] = (u, item)
                row += 1
    table = InteractionTable(
        pairs, [f"u{u}" for u in range(n_users)], [f"i{i}" for i in range(n_items)]
    )
    return table, features


def noise_features(like: Sequence[FeatureMatrix], seed: int) -> list[FeatureMatrix]:
    """Pure Gaussian features with the same shapes; carries no cluster signal."""
    rng = np.random.default_rng(seed)
    return [
        FeatureMatrix(f.modality, rng.standard_normal(f.values.shape).astype(np.float32))
        for f in like
    ]


# -- on-disk split layout ---------------------------------------------------

def _write_tsv(path: Path, table: InteractionTable) -> None:
    lines = [f"{table.user_ids[u]}\t{table.item_ids[i]}\n" for u, i in table.pairs]
    path.write_text("".join(lines), encoding="utf-8")


def write_split(split: DatasetSplit, out_dir: str | Path, extra: dict | None = None) -> dict:
    """Write train/val/test TSVs, the index maps and ``split_manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "users.txt").write_text("".join(u + "\n" for u in split.train.user_ids), encoding="utf-8")
    (out / "items.txt").write_text("".join(i + "\n" for i in split.train.item_ids), encoding="utf-8")
    for name in ("train", "val", "test"):
        _write_tsv(out / f"{name}.tsv", getattr(split, name))
    manifest = {
        "seed": split.seed,
        "ratios": list(split.ratios),
        "n_users": split.n_users,
        "n_items": split.n_items,
        "counts": {n: len(getattr(split, n)) for n in ("train", "val", "test")},
        "interactions": sum(len(getattr(split, n)) for n in ("train", "val", "test")),
    }
    if extra:
        manifest.update(extra)
    (out / "split_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_split(data_dir: str | Path) -> DatasetSplit:
    d = Path(data_dir)
    user_ids = d.joinpath("users.txt").read_text(encoding="utf-8").splitlines()
    item_ids = d.joinpath("items.txt").read_text(encoding="utf-8").splitlines()
    umap = {u: k for k, u in enumerate(user_ids)}
    imap = {i: k for k, i in enumerate(item_ids)}
    manifest = json.loads(d.joinpath("split_manifest.json").read_text())

    def read(name: str) -> InteractionTable:
        rows = []
        with open(d / f"{name}.tsv", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                fields = line.rstrip("\r\n").split("\t")
                if len(fields) < 2:
                    raise DataError(f"{d / name}.tsv: line {lineno}: malformed")
                try:
                    rows.append((umap[fields[0]], imap[fields[1]]))
                except KeyError as exc:
                    raise DataError(f"{d / name}.tsv: line {lineno}: unknown id {exc}") from None
        pairs = np.array(rows, dtype=np.int64).reshape(-1, 2)
        return InteractionTable(pairs, user_ids, item_ids)

    return DatasetSplit(
        read("train"), read("val"), read("test"),
        seed=manifest["seed"], ratios=tuple(manifest["ratios"]),
    )
