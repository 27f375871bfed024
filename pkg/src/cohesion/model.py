"""COHESION forward pass: early and late modality fusion, heterogeneous and homogeneous propagation."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn.functional as F

from .data import FeatureMatrix
from .graph import KnnGraph, SparseAdjacency, topk_knn

log = logging.getLogger(__name__)

BEHAVIOR = "behavior"
FUSION_MODES = ("weighted_sum", "concat")
KNN_SOURCES = ("fused", "behavior")

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelConfig:
    d: int = 64
    n_layers: int = 2
    user_layers: int = 1
    item_layers: int = 1
    k_uu: int = 10
    k_ii: int = 10
    eps: float = 1e-8
    leaky_slope: float = 0.01
    no_refine: tuple[str, ...] = ()
    use_uu: bool = True
    use_ii: bool = True
    fusion_mode: str = "weighted_sum"
    knn_refresh_interval: int = 1
    knn_source: str = "fused"
    item_graph_rownorm: bool = False
    dtype: str = "float32"

    def __post_init__(self) -> None:
        self.no_refine = tuple(self.no_refine)
        if not 1 <= self.n_layers <= 4:
            raise ValueError(f"n_layers must be in [1, 4], got {self.n_layers}")
        if self.user_layers < 0 or self.item_layers < 0:
            raise ValueError("homogeneous layer counts must be >= 0")
        if self.k_uu < 1 or self.k_ii < 1:
            raise ValueError("k must be >= 1")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.knn_source not in KNN_SOURCES:
            raise ValueError(f"knn_source must be one of {KNN_SOURCES}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {tuple(_DTYPES)}")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")

    def refine_enabled(self, modality: str) -> bool:
        return modality not in self.no_refine

    def to_dict(self) -> dict:
        out = asdict(self)
        out["no_refine"] = list(self.no_refine)
        return out


# -- sparse products with autograd --------------------------------------------

class SparseOperator:
    """A fixed sparse matrix usable inside autograd graphs.

    Products run through scipy CSR kernels, which sum each output row in
    stored (ascending column) order.
    """

    def __init__(self, adj: SparseAdjacency | sp.spmatrix, dtype: torch.dtype = torch.float64):
        m = adj.to_scipy() if isinstance(adj, SparseAdjacency) else sp.csr_matrix(adj)
        np_dtype = np.float32 if dtype == torch.float32 else np.float64
        self.matrix = sp.csr_matrix(m, dtype=np_dtype)
        self.matrix.sort_indices()
        self.matrix_t = sp.csr_matrix(self.matrix.T)
        self.matrix_t.sort_indices()
        self.shape = self.matrix.shape

    def __matmul__(self, x: torch.Tensor) -> torch.Tensor:
        return _SpMM.apply(x, self)


class _SpMM(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: torch.Tensor, op: SparseOperator) -> torch.Tensor:
        if x.shape[0] != op.shape[1]:
            raise ValueError(f"dimension mismatch: {op.shape} @ {tuple(x.shape)}")
        ctx.op = op
        out = op.matrix @ x.detach().cpu().numpy()
        return torch.from_numpy(np.ascontiguousarray(out, dtype=out.dtype)).to(x.dtype)

    @staticmethod
    def backward(ctx, grad: torch.Tensor):
        g = ctx.op.matrix_t @ grad.detach().cpu().numpy()
        return torch.from_numpy(np.ascontiguousarray(g)).to(grad.dtype), None


def as_operator(adj, dtype: torch.dtype = torch.float64) -> SparseOperator:
    return adj if isinstance(adj, SparseOperator) else SparseOperator(adj, dtype)


# -- building blocks -------------------------------------------------------

def transform_features(
    raw: torch.Tensor,
    w_in: torch.Tensor,
    b_in: torch.Tensor,
    w_out: torch.Tensor,
    b_out: torch.Tensor,
    slope: float = 0.01,
) -> torch.Tensor:
    """Two-layer perceptron d_m -> 4d -> d with a leaky-ReLU hidden layer."""
    if raw.shape[1] != w_in.shape[0]:
        raise ValueError(f"feature dim {raw.shape[1]} does not match W_in {tuple(w_in.shape)}")
    hidden = F.leaky_relu(raw @ w_in + b_in, negative_slope=slope)
    return hidden @ w_out + b_out


def refine(x: torch.Tensor, id_ref: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Early fusion of a modality embedding with the behaviour embedding."""
    if x.shape != id_ref.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(id_ref.shape)}")
    return torch.sqrt(torch.abs(0.5 * (x * x + id_ref * id_ref) + eps))


def _safe_norm(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    sq = (x * x).sum(dim=1)
    nonzero = sq > 0
    return torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq))), nonzero


def row_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity, defined as 0 when either row is zero."""
    na, nz_a = _safe_norm(a)
    nb, nz_b = _safe_norm(b)
    cos = (a * b).sum(dim=1) / (na * nb)
    return torch.where(nz_a & nz_b, cos, torch.zeros_like(cos))


def hetero_propagate(
    adj_norm, e0: torch.Tensor, n_layers: int, eps: float = 1e-8
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Cosine-gated residual propagation; returns the layer sum and every layer."""
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    op = as_operator(adj_norm, e0.dtype)
    layers = [e0]
    for _ in range(n_layers):
        p = op @ layers[-1]
        gate = row_cosine(p, e0)
        layers.append((gate + eps).unsqueeze(1) * p)
    total = layers[0]
    for e in layers[1:]:
        total = total + e
    return total, layers


def late_fuse(
    ebars: Sequence[torch.Tensor], fusion_logits: torch.Tensor, mode: str = "weighted_sum"
) -> torch.Tensor:
    if len(ebars) < 2:
        raise ValueError("late fusion needs at least two modalities")
    shape = ebars[0].shape
    if any(e.shape != shape for e in ebars):
        raise ValueError("all modality embeddings must share a shape")
    if fusion_logits.shape[0] != len(ebars):
        raise ValueError("one fusion logit per modality is required")
    alpha = torch.softmax(fusion_logits, dim=0)
    if mode == "weighted_sum":
        out = alpha[0] * ebars[0]
        for a, e in zip(alpha[1:], ebars[1:]):
            out = out + a * e
        return out
    if mode == "concat":
        return torch.cat([a * e for a, e in zip(alpha, ebars)], dim=1)
    raise ValueError(f"unknown fusion mode {mode!r}")


def user_graph_layer(s_u, a_prev: torch.Tensor) -> torch.Tensor:
    """Residual softmax aggregation over retained user neighbours.

    ``s_u`` is a KnnGraph or a prebuilt operator holding the row-softmaxed
    weights (see ``KnnGraph.to_sparse("softmax")``).
    """
    op = s_u if isinstance(s_u, SparseOperator) else SparseOperator(
        s_u.to_sparse("softmax"), a_prev.dtype
    )
    return a_prev + op @ a_prev


def item_graph_layer(s_i, a_prev: torch.Tensor, rownorm: bool = False) -> torch.Tensor:
    """Weighted sum over retained item neighbours; no residual."""
    op = s_i if isinstance(s_i, SparseOperator) else SparseOperator(
        s_i.to_sparse("rownorm" if rownorm else "raw"), a_prev.dtype
    )
    return op @ a_prev


def enhance_and_assemble(
    fused: torch.Tensor,
    a_u: torch.Tensor | None,
    a_i: torch.Tensor | None,
    n_users: int,
) -> torch.Tensor:
    """Add homogeneous-graph outputs to the fused user/item rows and restack.

    Passing ``None`` for a branch leaves those rows untouched.
    """
    users, items = fused[:n_users], fused[n_users:]
    if a_u is not None:
        if a_u.shape != users.shape:
            raise ValueError("user branch shape mismatch")
        users = users + a_u
    if a_i is not None:
        if a_i.shape != items.shape:
            raise ValueError("item branch shape mismatch")
        items = items + a_i
    if a_u is None and a_i is None:
        return fused
    return torch.cat([users, items], dim=0)


def _check_index(n: int, k: int, what: str) -> None:
    if not 0 <= k < n:
        raise IndexError(f"{what} index {k} out of range [0, {n})")


def score(e_f, n_users: int, u: int, i: int) -> float:
    """Inner product of user u's and item i's final embeddings."""
    n_items = e_f.shape[0] - n_users
    _check_index(n_users, u, "user")
    _check_index(n_items, i, "item")
    return float((e_f[u] * e_f[n_users + i]).sum())


def modality_score(ebar, n_users: int, u: int, i: int) -> float:
    return score(ebar, n_users, u, i)


# -- model ---------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Intermediate tensors of one forward pass."""

    n_users: int
    transformed: dict[str, torch.Tensor]
    refined: dict[str, torch.Tensor]
    layers: dict[str, list[torch.Tensor]]
    ebar: dict[str, torch.Tensor]
    alpha: torch.Tensor
    fused: torch.Tensor
    a_u: torch.Tensor | None
    a_i: torch.Tensor | None
    final: torch.Tensor

    @property
    def user_final(self) -> torch.Tensor:
        return self.final[: self.n_users]

    @property
    def item_final(self) -> torch.Tensor:
        return self.final[self.n_users:]


@dataclass
class KnnState:
    user: KnnGraph | None = None
    item: KnnGraph | None = None
    ops: dict[str, SparseOperator] = field(default_factory=dict)


def param_names(modalities: Sequence[str]) -> list[str]:
    names = [f"user_emb.{m}" for m in modalities] + ["item_id_emb"]
    for m in modalities:
        if m != BEHAVIOR:
            names += [f"mlp.{m}.w_in", f"mlp.{m}.b_in", f"mlp.{m}.w_out", f"mlp.{m}.b_out"]
    return names + ["fusion_logits"]


def init_params(
    n_users: int,
    n_items: int,
    feature_dims: Mapping[str, int],
    config: ModelConfig,
    seed: int = 0,
) -> dict[str, torch.Tensor]:
    """Xavier-uniform tables and weights, zero biases and fusion logits."""
    dtype = _DTYPES[config.dtype]
    gen = torch.Generator().manual_seed(seed)
    d = config.d
    modalities = [BEHAVIOR, *feature_dims]

    def xavier(rows: int, cols: int) -> torch.Tensor:
        t = torch.empty(rows, cols, dtype=torch.float64)
        torch.nn.init.xavier_uniform_(t, generator=gen)
        return t.to(dtype)

    params: dict[str, torch.Tensor] = {}
    for m in modalities:
        params[f"user_emb.{m}"] = xavier(n_users, d)
    params["item_id_emb"] = xavier(n_items, d)
    for m, dm in feature_dims.items():
        params[f"mlp.{m}.w_in"] = xavier(dm, 4 * d)
        params[f"mlp.{m}.b_in"] = torch.zeros(4 * d, dtype=dtype)
        params[f"mlp.{m}.w_out"] = xavier(4 * d, d)
        params[f"mlp.{m}.b_out"] = torch.zeros(d, dtype=dtype)
    params["fusion_logits"] = torch.zeros(len(modalities), dtype=dtype)
    for t in params.values():
        t.requires_grad_(True)
    return params


class CohesionModel:
    """Holds the graph, item features, parameters and homogeneous graphs."""

    def __init__(
        self,
        adj_norm: SparseAdjacency,
        n_users: int,
        features: Sequence[FeatureMatrix],
        config: ModelConfig,
        params: dict[str, torch.Tensor] | None = None,
        seed: int = 0,
    ):
        self.config = config
        self.dtype = _DTYPES[config.dtype]
        self.n_users = n_users
        self.n_items = adj_norm.n - n_users
        self.adj = adj_norm
        self.adj_op = SparseOperator(adj_norm, self.dtype)
        self.features = {
            f.modality: torch.as_tensor(np.asarray(f.values), dtype=self.dtype) for f in features
        }
        for name, f in self.features.items():
            if f.shape[0] != self.n_items:
                raise ValueError(f"{name} features have {f.shape[0]} rows, expected {self.n_items}")
        self.modalities = [BEHAVIOR, *self.features]
        if len(self.modalities) < 2:
            raise ValueError("at least one content modality is required")
        if params is None:
            params = init_params(
                n_users, self.n_items, {m: f.shape[1] for m, f in self.features.items()},
                config, seed,
            )
        missing = set(param_names(self.modalities)) - set(params)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        self.params = params
        self.knn = KnnState()

    # -- homogeneous graphs
    def set_knn(self, user: KnnGraph, item: KnnGraph) -> None:
        self.knn = KnnState(user, item, {
            "user": SparseOperator(user.to_sparse("softmax"), self.dtype),
            "item": SparseOperator(
                item.to_sparse("rownorm" if self.config.item_graph_rownorm else "raw"), self.dtype
            ),
        })

    def rebuild_knn_graphs(self, trace: ForwardTrace | None = None) -> tuple[KnnGraph, KnnGraph]:
        """Recompute top-k graphs from the current (detached) embeddings."""
        if trace is None:
            with torch.no_grad():
                trace = self.forward(skip_homogeneous=True)
        if self.config.knn_source == "fused":
            source = trace.fused
        else:
            source = trace.ebar[BEHAVIOR]
        src = source.detach().cpu().numpy().astype(np.float64)
        user = topk_knn(src[: self.n_users], self.config.k_uu)
        item = topk_knn(src[self.n_users:], self.config.k_ii)
        self.set_knn(user, item)
        return user, item

    # -- forward
    def forward(
        self,
        params: Mapping[str, torch.Tensor] | None = None,
        skip_homogeneous: bool = False,
    ) -> ForwardTrace:
        p = self.params if params is None else params
        cfg = self.config
        nu = self.n_users
        id_emb = p["item_id_emb"]

        transformed = {BEHAVIOR: id_emb}
        for m, feats in self.features.items():
            transformed[m] = transform_features(
                feats, p[f"mlp.{m}.w_in"], p[f"mlp.{m}.b_in"],
                p[f"mlp.{m}.w_out"], p[f"mlp.{m}.b_out"], cfg.leaky_slope,
            )
        refined = {
            m: refine(x, id_emb, cfg.eps) if cfg.refine_enabled(m) else x
            for m, x in transformed.items()
        }

        layers, ebar = {}, {}
        for m in self.modalities:
            e0 = torch.cat([p[f"user_emb.{m}"], refined[m]], dim=0)
            ebar[m], layers[m] = hetero_propagate(self.adj_op, e0, cfg.n_layers, cfg.eps)

        logits = p["fusion_logits"]
        fused = late_fuse([ebar[m] for m in self.modalities], logits, cfg.fusion_mode)

        a_u = a_i = None
        if not skip_homogeneous:
            if (cfg.use_uu or cfg.use_ii) and not self.knn.ops:
                raise RuntimeError("homogeneous graphs not built; call rebuild_knn_graphs() first")
            if cfg.use_uu:
                a_u = fused[:nu]
                for _ in range(cfg.user_layers):
                    a_u = user_graph_layer(self.knn.ops["user"], a_u)
            if cfg.use_ii:
                a_i = fused[nu:]
                for _ in range(cfg.item_layers):
                    a_i = item_graph_layer(self.knn.ops["item"], a_i)
        final = enhance_and_assemble(fused, a_u, a_i, nu)
        return ForwardTrace(
            nu, transformed, refined, layers, ebar, torch.softmax(logits, dim=0),
            fused, a_u, a_i, final,
        )

    def embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        """Final user and item embeddings as float64 arrays."""
        with torch.no_grad():
            tr = self.forward()
        e = tr.final.detach().cpu().numpy().astype(np.float64)
        return e[: self.n_users], e[self.n_users:]

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.params.items()}

    def load_snapshot(self, snap: Mapping[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for k, v in snap.items():
                self.params[k].copy_(v)
