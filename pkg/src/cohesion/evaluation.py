"""Full-ranking Recall@K / NDCG@K evaluation and sparsity buckets."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import DatasetSplit


class EvaluationError(ValueError):
    pass


@dataclass
class BucketRow:
    low: int  # exclusive, except the first bucket which starts at 0
    high: float  # inclusive; math.inf for the open-ended last bucket
    users: int
    recall20: float | None

    @property
    def label(self) -> str:
        lo = 0 if self.low == 0 else self.low + 1
        return f"{lo}+" if math.isinf(self.high) else f"{lo}-{int(self.high)}"


@dataclass
class MetricsReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_eval_users: int
    epoch_seconds: float = 0.0
    per_bucket: list[BucketRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "n_eval_users": self.n_eval_users,
            "epoch_seconds": self.epoch_seconds,
            "per_bucket": [dict(asdict(b), label=b.label, high=None if math.isinf(b.high) else b.high)
                           for b in self.per_bucket],
        }

    def write_json(self, path: str | Path, include_timing: bool = True) -> None:
        data = self.to_dict()
        if not include_timing:
            data.pop("epoch_seconds")
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

    def write_bucket_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bucket", "users", "recall@20"])
            for b in self.per_bucket:
                w.writerow([b.label, b.users, "" if b.recall20 is None else repr(b.recall20)])


def rank_items(scores: np.ndarray, mask: Iterable[int] = ()) -> np.ndarray:
    """Item indices by descending score; masked items last; ties to lower index."""
    s = np.array(scores, dtype=np.float64)
    mask = np.fromiter(mask, dtype=np.int64)
    s[mask] = -np.inf
    return np.argsort(-s, kind="stable")


def recall_at_k(ranked: Sequence[int], relevant: set[int] | Sequence[int], k: int) -> float:
    relevant = set(relevant)
    if not relevant:
        raise EvaluationError("recall undefined for an empty relevant set")
    hits = sum(1 for item in ranked[:k] if item in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked: Sequence[int], relevant: set[int] | Sequence[int], k: int) -> float:
    relevant = set(relevant)
    if not relevant:
        raise EvaluationError("ndcg undefined for an empty relevant set")
    dcg = sum(1.0 / math.log2(j + 2) for j, item in enumerate(ranked[:k]) if item in relevant)
    idcg = sum(1.0 / math.log2(j + 2) for j in range(min(k, len(relevant))))
    return dcg / idcg


def _per_user_metrics(
    user_emb: np.ndarray,
    item_emb: np.ndarray,
    split: DatasetSplit,
    which: str,
    ks: Sequence[int],
    mask_val: bool = False,
    chunk: int = 1024,
) -> tuple[np.ndarray, dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Vectorised per-user Recall/NDCG for every user with held-out items."""
    target = getattr(split, which)
    n_users, n_items = split.n_users, split.n_items
    relevant = target.user_items()
    users = np.array([u for u in range(n_users) if len(relevant[u])], dtype=np.int64)
    if len(users) == 0:
        raise EvaluationError(f"no users with {which} interactions")
    masks = [split.train]
    if mask_val and which == "test":
        masks.append(split.val)
    kmax = min(max(ks), n_items)
    disc = 1.0 / np.log2(np.arange(2, kmax + 2))
    idcg_cum = np.cumsum(disc)
    rec = {k: np.zeros(len(users)) for k in ks}
    ndcg = {k: np.zeros(len(users)) for k in ks}
    for start in range(0, len(users), chunk):
        batch = users[start:start + chunk]
        scores = user_emb[batch] @ item_emb.T
        row_of = np.full(n_users, -1)
        row_of[batch] = np.arange(len(batch))
        for table in masks:
            sel = row_of[table.pairs[:, 0]] >= 0
            scores[row_of[table.pairs[sel, 0]], table.pairs[sel, 1]] = -np.inf
        top = np.argsort(-scores, axis=1, kind="stable")[:, :kmax]
        truth = np.zeros((len(batch), n_items), dtype=bool)
        sel = row_of[target.pairs[:, 0]] >= 0
        truth[row_of[target.pairs[sel, 0]], target.pairs[sel, 1]] = True
        hits = np.take_along_axis(truth, top, axis=1)
        n_rel = truth.sum(axis=1)
        for k in ks:
            kk = min(k, kmax)
            h = hits[:, :kk]
            rec[k][start:start + len(batch)] = h.sum(1) / n_rel
            dcg = (h * disc[:kk]).sum(1)
            idcg = idcg_cum[np.minimum(kk, n_rel) - 1]
            ndcg[k][start:start + len(batch)] = dcg / idcg
    return users, rec, ndcg


def evaluate(
    user_emb: np.ndarray,
    item_emb: np.ndarray,
    split: DatasetSplit,
    which: str = "test",
    ks: Sequence[int] = (10, 20),
    mask_val: bool = False,
    buckets: Sequence[float] | None = None,
) -> MetricsReport:
    """Mean Recall@K / NDCG@K over users with a nonempty ``which`` set.

    Training interactions are always masked; validation interactions are
    masked for test ranking only when ``mask_val`` is set.
    """
    t0 = time.perf_counter()
    user_emb = np.asarray(user_emb, dtype=np.float64)
    item_emb = np.asarray(item_emb, dtype=np.float64)
    users, rec, ndcg = _per_user_metrics(user_emb, item_emb, split, which, ks, mask_val)
    # users are in ascending order, so the summation order is fixed
    report = MetricsReport(
        recall={k: float(np.sum(rec[k]) / len(users)) for k in ks},
        ndcg={k: float(np.sum(ndcg[k]) / len(users)) for k in ks},
        n_eval_users=len(users),
    )
    if buckets is not None:
        r20 = rec[20] if 20 in rec else _per_user_metrics(
            user_emb, item_emb, split, which, (20,), mask_val)[1][20]
        report.per_bucket = bucket_rows(split, users, r20, buckets)
    report.epoch_seconds = time.perf_counter() - t0
    return report


DEFAULT_BUCKETS = (5, 10, 15, 20, math.inf)


def bucket_rows(
    split: DatasetSplit, users: np.ndarray, recall20: np.ndarray,
    edges: Sequence[float] = DEFAULT_BUCKETS,
) -> list[BucketRow]:
    """Group users by train degree into ``[0, e0], (e0, e1], ...`` buckets."""
    edges = list(edges)
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bucket edges must be strictly ascending")
    if not math.isinf(edges[-1]):
        edges.append(math.inf)
    deg = np.bincount(split.train.pairs[:, 0], minlength=split.n_users)[users]
    rows, low = [], 0
    for high in edges:
        sel = (deg > low) & (deg <= high) if low else deg <= high
        n = int(sel.sum())
        rows.append(BucketRow(low, high, n, float(np.mean(recall20[sel])) if n else None))
        low = high
    return rows


def sparsity_buckets(
    user_emb: np.ndarray,
    item_emb: np.ndarray,
    split: DatasetSplit,
    edges: Sequence[float] = DEFAULT_BUCKETS,
    which: str = "test",
) -> list[BucketRow]:
    users, rec, _ = _per_user_metrics(
        np.asarray(user_emb, dtype=np.float64), np.asarray(item_emb, dtype=np.float64),
        split, which, (20,),
    )
    return bucket_rows(split, users, rec[20], edges)
