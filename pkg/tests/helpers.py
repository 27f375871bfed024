from __future__ import annotations

import numpy as np
import torch

from cohesion.data import FeatureMatrix, InteractionTable
from cohesion.graph import build_adjacency, normalize_sym
from cohesion.model import CohesionModel, ModelConfig

from . import oracle


def random_table(rng, n_users, n_items, density=0.5):
    """Random bipartite table where every user and item has an edge."""
    pairs = {(u, int(rng.integers(n_items))) for u in range(n_users)}
    pairs |= {(int(rng.integers(n_users)), i) for i in range(n_items)}
    for u in range(n_users):
        for i in range(n_items):
            if rng.random() < density:
                pairs.add((u, i))
    arr = np.array(sorted(pairs), dtype=np.int64)
    return InteractionTable(arr, [f"u{u}" for u in range(n_users)], [f"i{i}" for i in range(n_items)])


def tiny_model(rng, n_users=3, n_items=4, d=4, feat_dims=(3,), seed=0, **cfg):
    """Float64 model on a random graph plus the oracle-side view of it."""
    table = random_table(rng, n_users, n_items)
    names = ["textual", "visual"][: len(feat_dims)]
    feats = [FeatureMatrix(m, rng.standard_normal((n_items, dm))) for m, dm in zip(names, feat_dims)]
    config = ModelConfig(d=d, dtype="float64", **cfg)
    adj = normalize_sym(build_adjacency(table))
    model = CohesionModel(adj, n_users, feats, config, seed=seed)
    # spread parameters so nothing sits at a trivial point
    for t in model.params.values():
        t.data.add_(torch.from_numpy(0.3 * rng.standard_normal(tuple(t.shape))).to(t.dtype))
    dense_a = oracle.dense_normalize(oracle.dense_adjacency(n_users, n_items, table.pairs))
    ocfg = {
        "d": d, "eps": config.eps, "slope": config.leaky_slope, "L": config.n_layers,
        "k_uu": config.k_uu, "k_ii": config.k_ii, "use_uu": config.use_uu,
        "use_ii": config.use_ii, "fusion_mode": config.fusion_mode,
        "no_refine": config.no_refine, "L_u": config.user_layers, "L_i": config.item_layers,
    }
    return model, table, {f.modality: np.asarray(f.values, dtype=np.float64) for f in feats}, dense_a, ocfg


def numpy_params(model):
    return {k: v.detach().numpy().astype(np.float64).copy() for k, v in model.params.items()}
