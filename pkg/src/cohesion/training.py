"""Triplet sampling, adaptive BPR loss, Adam and the training loop."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetSplit, FeatureMatrix, InteractionTable
from .evaluation import evaluate
from .graph import build_adjacency, normalize_sym
from .model import CohesionModel, ForwardTrace, ModelConfig

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    reg_lambda: float = 1e-4
    batch_size: int = 2048
    max_epochs: int = 1000
    patience: int = 20
    seed: int = 0
    adaptive_loss: bool = True
    fused_loss_weight: float = 1.0
    grad_through_weights: bool = False
    eval_k: int = 20

    def __post_init__(self) -> None:
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# -- sampling ----------------------------------------------------------------

class _TrainIndex:
    """Sorted (user * n_items + item) keys for fast membership tests."""

    def __init__(self, train: InteractionTable):
        self.n_items = train.n_items
        self.keys = np.unique(train.pairs[:, 0] * self.n_items + train.pairs[:, 1])
        deg = np.bincount(train.pairs[:, 0], minlength=train.n_users)
        full = np.flatnonzero(deg >= self.n_items)
        if len(full):
            raise TrainingError(
                f"user {train.user_ids[full[0]]!r} interacted with every item; no negatives exist"
            )

    def contains(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        q = users * self.n_items + items
        pos = np.searchsorted(self.keys, q)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == q


def _sample_negatives(index: _TrainIndex, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    neg = rng.integers(index.n_items, size=len(users))
    bad = index.contains(users, neg)
    while bad.any():
        neg[bad] = rng.integers(index.n_items, size=int(bad.sum()))
        bad = index.contains(users, neg)
    return neg


def sample_triplets(
    train: InteractionTable, batch_size: int, rng: np.random.Generator
) -> np.ndarray:
    """``batch_size`` (u, p, n) rows: positives uniform over train pairs,
    negatives uniform over items the user has not interacted with."""
    index = _TrainIndex(train)
    pick = rng.integers(len(train.pairs), size=batch_size)
    users, pos = train.pairs[pick, 0], train.pairs[pick, 1]
    return np.stack([users, pos, _sample_negatives(index, users, rng)], axis=1)


def epoch_batches(
    train: InteractionTable, batch_size: int, rng: np.random.Generator,
    index: _TrainIndex | None = None,
) -> Iterator[np.ndarray]:
    """One pass over a shuffled copy of the train pairs, with fresh negatives."""
    index = index or _TrainIndex(train)
    order = rng.permutation(len(train.pairs))
    for start in range(0, len(order), batch_size):
        chunk = train.pairs[order[start:start + batch_size]]
        users = chunk[:, 0]
        yield np.stack([users, chunk[:, 1], _sample_negatives(index, users, rng)], axis=1)


# -- loss ----------------------------------------------------------------------

def adaptive_weights(gaps):
    """``1 - softmax(gaps)`` over the last axis (modalities).

    Accepts numpy arrays or torch tensors of shape (M,) or (B, M).
    """
    if isinstance(gaps, torch.Tensor):
        if gaps.shape[-1] < 2:
            raise ValueError("adaptive weights need at least two modalities")
        return 1.0 - torch.softmax(gaps, dim=-1)
    g = np.asarray(gaps, dtype=np.float64)
    if g.shape[-1] < 2:
        raise ValueError("adaptive weights need at least two modalities")
    e = np.exp(g - g.max(axis=-1, keepdims=True))
    return 1.0 - e / e.sum(axis=-1, keepdims=True)


def _pair_scores(emb: torch.Tensor, nu: int, batch: torch.Tensor) -> torch.Tensor:
    """Score gap y(u,p) - y(u,n) per triplet."""
    u = emb[batch[:, 0]]
    return (u * emb[nu + batch[:, 1]]).sum(1) - (u * emb[nu + batch[:, 2]]).sum(1)


def regularizer(params: Mapping[str, torch.Tensor], batch: torch.Tensor) -> torch.Tensor:
    """Squared L2 norm of batch-touched embedding rows plus all dense weights."""
    total = torch.zeros((), dtype=params["item_id_emb"].dtype)
    for name, t in params.items():
        if name.startswith("user_emb."):
            total = total + (t[batch[:, 0]] ** 2).sum()
        elif name == "item_id_emb":
            total = total + (t[batch[:, 1]] ** 2).sum() + (t[batch[:, 2]] ** 2).sum()
        else:
            total = total + (t ** 2).sum()
    return total


@dataclass
class LossTerms:
    total: torch.Tensor
    modality: torch.Tensor  # per-triplet adaptive term
    fused: torch.Tensor  # per-triplet fused BPR term
    reg: torch.Tensor
    weights: torch.Tensor | None


def adaptive_bpr_loss(
    trace: ForwardTrace,
    batch,
    params: Mapping[str, torch.Tensor],
    config: TrainConfig,
    modalities: Sequence[str] | None = None,
) -> LossTerms:
    """Summed adaptive BPR over the batch plus a fused-score BPR term and L2."""
    batch = torch.as_tensor(np.asarray(batch), dtype=torch.long)
    nu = trace.n_users
    fused_gap = _pair_scores(trace.final, nu, batch)
    fused_term = -F.logsigmoid(fused_gap)
    reg = regularizer(params, batch)
    weights = None
    if config.adaptive_loss:
        mods = list(modalities or trace.ebar)
        gaps = torch.stack([_pair_scores(trace.ebar[m], nu, batch) for m in mods], dim=1)
        weights = adaptive_weights(gaps if config.grad_through_weights else gaps.detach())
        modality_term = -F.logsigmoid((weights * gaps).sum(1))
        total = modality_term.sum() + config.fused_loss_weight * fused_term.sum()
    else:
        modality_term = torch.zeros_like(fused_term)
        total = fused_term.sum()
    total = total + config.reg_lambda * reg
    if not torch.isfinite(total):
        bad = ~torch.isfinite(modality_term + fused_term)
        where = batch[bad][0].tolist() if bad.any() else "regularizer"
        raise TrainingError(f"non-finite loss (first offending triplet: {where})")
    return LossTerms(total, modality_term, fused_term, reg, weights)


def compute_gradients(
    loss: torch.Tensor, params: Mapping[str, torch.Tensor]
) -> dict[str, torch.Tensor]:
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return {
        n: torch.zeros_like(params[n]) if g is None else g for n, g in zip(names, grads)
    }


# -- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: AdamState,
    lr: float,
) -> None:
    """Bias-corrected Adam update, applied in place."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))


# -- loop --------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_recall: float
    val_ndcg: float
    seconds: float


@dataclass
class FitResult:
    model: CohesionModel
    best_epoch: int
    best_val_recall: float
    initial_val_recall: float
    log: list[EpochRecord]
    stopped_early: bool
    diverged: bool = False


def _val_metrics(model: CohesionModel, split: DatasetSplit, k: int) -> tuple[float, float]:
    users, items = model.embeddings()
    report = evaluate(users, items, split, which="val", ks=(k,))
    return report.recall[k], report.ndcg[k]


def build_model(
    split: DatasetSplit, features: Sequence[FeatureMatrix], config: ModelConfig, seed: int
) -> CohesionModel:
    adj = normalize_sym(build_adjacency(split.train))
    return CohesionModel(adj, split.n_users, features, config, seed=seed)


def fit(
    split: DatasetSplit,
    features: Sequence[FeatureMatrix],
    model_config: ModelConfig,
    train_config: TrainConfig,
    model: CohesionModel | None = None,
) -> FitResult:
    """Train with early stopping on validation Recall@K; returns the best checkpoint."""
    tc = train_config
    torch.manual_seed(tc.seed)
    rng = np.random.default_rng(tc.seed)
    model = model or build_model(split, features, model_config, tc.seed)
    cfg = model.config
    needs_knn = cfg.use_uu or cfg.use_ii
    if needs_knn:
        model.rebuild_knn_graphs()
    index = _TrainIndex(split.train)
    state = AdamState()

    init_recall, _ = _val_metrics(model, split, tc.eval_k)
    best = (init_recall, 0, model.snapshot(), model.knn)
    history: list[EpochRecord] = []
    bad_epochs = 0
    diverged = False
    for epoch in range(1, tc.max_epochs + 1):
        t0 = time.perf_counter()
        interval = cfg.knn_refresh_interval
        if needs_knn and interval > 0 and epoch > 1 and (epoch - 1) % interval == 0:
            model.rebuild_knn_graphs()
        epoch_loss = 0.0
        try:
            for batch in epoch_batches(split.train, tc.batch_size, rng, index):
                trace = model.forward()
                terms = adaptive_bpr_loss(trace, batch, model.params, tc, model.modalities)
                grads = compute_gradients(terms.total, model.params)
                adam_step(model.params, grads, state, tc.lr)
                epoch_loss += float(terms.total.detach())
        except TrainingError as exc:
            log.error("epoch %d: %s; restoring best checkpoint", epoch, exc)
            diverged = True
            break
        if not all(torch.isfinite(p).all() for p in model.params.values()):
            log.error("epoch %d: parameters became non-finite; restoring best checkpoint", epoch)
            diverged = True
            break
        recall, ndcg = _val_metrics(model, split, tc.eval_k)
        seconds = time.perf_counter() - t0
        history.append(EpochRecord(epoch, epoch_loss, recall, ndcg, seconds))
        log.info("epoch %d loss %.4f val recall@%d %.4f (%.2fs)", epoch, epoch_loss, tc.eval_k, recall, seconds)
        if recall > best[0]:
            best = (recall, epoch, model.snapshot(), model.knn)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= tc.patience:
                break
    stopped_early = bad_epochs >= tc.patience
    model.load_snapshot(best[2])
    model.knn = best[3]
    return FitResult(model, best[1], best[0], init_recall, history, stopped_early, diverged)
