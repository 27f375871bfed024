"""Gating criteria. Each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the verdicts are
also repeated in the terminal summary.
"""
import json
import math
import sys
import time

import numpy as np
import pytest
import torch

from cohesion.cli import main
from cohesion.data import (
    InteractionTable,
    generate_synthetic,
    kcore_filter,
    noise_features,
    save_features,
    split_dataset,
)
from cohesion.evaluation import evaluate, ndcg_at_k, recall_at_k
from cohesion.graph import build_adjacency, normalize_sym, topk_knn
from cohesion.model import ModelConfig
from cohesion.training import TrainConfig, adaptive_bpr_loss, adaptive_weights, fit

from . import oracle
from .conftest import ACCEPTANCE
from .gradcheck import CELLS, fd_check
from .helpers import numpy_params, random_table, tiny_model

SEEDS = (1, 2, 3, 4, 5)
RANDOM_BASELINE = 0.10


def verdict(name, ok, detail):
    ACCEPTANCE.append((name, bool(ok), detail))
    sys.__stdout__.write(f"\n{'PASS' if ok else 'FAIL'}  {name}: {detail}\n")
    sys.__stdout__.flush()
    assert ok, f"{name}: {detail}"


def test_gradient_correctness():
    t0 = time.perf_counter()
    worst = max(fd_check(cell) for cell in CELLS)
    secs = time.perf_counter() - t0
    verdict("gradient correctness", worst < 1e-4 and secs < 60,
            f"max rel err {worst:.2e} over {len(CELLS)} cells in {secs:.1f}s (need < 1e-4, < 60s)")


def test_dense_oracle_forward():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(20):
        nu, ni = int(rng.integers(2, 6)), int(rng.integers(2, 7))
        cell = CELLS[k % len(CELLS)]
        cfg = {key: v for key, v in cell.items() if key != "adaptive_loss"}
        model, _, feats, dense_a, ocfg = tiny_model(
            rng, nu, ni, d=int(rng.integers(2, 5)), feat_dims=(3, 2),
            k_uu=int(rng.integers(1, nu)), k_ii=int(rng.integers(1, ni)), seed=k, **cfg,
        )
        if model.config.use_uu or model.config.use_ii:
            model.rebuild_knn_graphs()
        got = model.forward().final.detach().numpy()
        want = oracle.forward(numpy_params(model), feats, dense_a, nu, ocfg)["final"]
        worst = max(worst, float(np.max(np.abs(got - want))))
    secs = time.perf_counter() - t0
    verdict("dense-oracle forward", worst <= 1e-10 and secs < 10,
            f"max abs diff {worst:.2e} on 20 instances in {secs:.1f}s (need <= 1e-10, < 10s)")


def test_graph_oracles():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    knn_ok, w_err = True, 0.0
    for _ in range(50):
        n, k = int(rng.integers(2, 65)), int(rng.integers(1, 12))
        # coarse values create exact ties and zero rows
        x = rng.integers(-2, 3, size=(n, int(rng.integers(1, 5)))).astype(float)
        g = topk_knn(x, k)
        w, mask = oracle.brute_knn(x, k)
        for r in range(n):
            knn_ok &= set(g.indices[r].tolist()) == set(np.flatnonzero(mask[r]).tolist())
            w_err = max(w_err, max(abs(s - w[r, c]) for c, s in g.neighbors(r)))
    norm_ok = True
    for _ in range(20):
        t = random_table(rng, int(rng.integers(1, 9)), int(rng.integers(1, 9)), 0.4)
        adj = build_adjacency(t)
        dense = oracle.dense_normalize(adj.to_dense())
        norm_ok &= np.array_equal(normalize_sym(adj).to_dense(), dense)
    kcore_ok = True
    for _ in range(50):
        pairs = sorted({(int(u), int(i)) for u, i in rng.integers(0, 12, size=(int(rng.integers(1, 90)), 2))})
        arr = np.array(pairs)
        t = InteractionTable(arr, [f"u{u}" for u in range(12)], [f"i{i}" for i in range(12)])
        k = int(rng.integers(1, 5))
        out = kcore_filter(t, k)
        got = {(out.user_ids[u], out.item_ids[i]) for u, i in out.pairs}
        kcore_ok &= got == {(f"u{u}", f"i{i}") for u, i in oracle.naive_kcore(pairs, k)}
    secs = time.perf_counter() - t0
    ok = knn_ok and w_err <= 1e-9 and norm_ok and kcore_ok and secs < 10
    verdict("graph oracles", ok,
            f"knn sets {'match' if knn_ok else 'differ'} (weight err {w_err:.1e}), normalize "
            f"{'exact' if norm_ok else 'inexact'}, kcore {'match' if kcore_ok else 'differ'}, {secs:.1f}s")


def test_loss_arithmetic():
    rng = np.random.default_rng(3)
    model, *_ = tiny_model(rng, use_uu=False, use_ii=False)
    with torch.no_grad():
        model.params["item_id_emb"].copy_(model.params["item_id_emb"][0].expand(4, -1))
        for m in model.modalities:
            model.params[f"user_emb.{m}"].zero_()
        model.params["mlp.textual.w_in"].zero_()
    batch = np.array([[0, 0, 1], [1, 2, 3], [2, 3, 0]])
    terms = adaptive_bpr_loss(model.forward(), batch, model.params,
                              TrainConfig(reg_lambda=0.0, fused_loss_weight=1.0), model.modalities)
    per = (terms.modality + terms.fused).detach().numpy()
    zero_err = float(np.max(np.abs(per - 2 * math.log(2))))
    sum_err = 0.0
    for _ in range(1000):
        m = int(rng.integers(2, 6))
        w = adaptive_weights(rng.standard_normal(m) * rng.uniform(0.1, 20))
        sum_err = max(sum_err, abs(float(w.sum()) - (m - 1)))
    ln2_err = float(np.max(np.abs(adaptive_weights([math.log(2), 0, 0]) - [0.5, 0.75, 0.75])))
    ok = max(zero_err, sum_err, ln2_err) <= 1e-9
    verdict("loss arithmetic", ok,
            f"zero-gap err {zero_err:.1e}, weight-sum err {sum_err:.1e}, (ln2,0,0) err {ln2_err:.1e}")


def test_metric_oracles():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        ranked = rng.permutation(n).tolist()
        rel = set(rng.choice(n, int(rng.integers(1, n + 1)), replace=False).tolist())
        k = int(rng.integers(1, n + 5))
        worst = max(worst, abs(recall_at_k(ranked, rel, k) - oracle.recall_oracle(ranked, rel, k)),
                    abs(ndcg_at_k(ranked, rel, k) - oracle.ndcg_oracle(ranked, rel, k)))
    rank2 = abs(ndcg_at_k([5, 9, 1], {9}, 20) - 1 / math.log2(3))
    verdict("metric oracles", worst <= 1e-12 and rank2 <= 1e-9,
            f"max diff {worst:.1e} on 1000 instances, rank-2 ndcg err {rank2:.1e}")


@pytest.fixture(scope="module")
def synthetic_runs():
    """Full, noise-feature and no-homogeneous-graph runs for every seed."""
    out = {"full": [], "noise": [], "ui": []}
    t0 = time.perf_counter()
    for seed in SEEDS:
        table, feats = generate_synthetic(500, 200, 5, [16, 8], 10, 0.1, seed)
        split = split_dataset(table, (0.8, 0.1, 0.1), seed)
        variants = {
            "full": (feats, ModelConfig()),
            "noise": (noise_features(feats, seed + 1000), ModelConfig()),
            "ui": (feats, ModelConfig(use_uu=False, use_ii=False)),
        }
        for name, (f, mc) in variants.items():
            res = fit(split, f, mc, TrainConfig(seed=seed))
            users, items = res.model.embeddings()
            out[name].append({
                "val": res.best_val_recall,
                "test": evaluate(users, items, split, "test").recall[20],
            })
    out["seconds"] = time.perf_counter() - t0
    return out


def test_synthetic_learning(synthetic_runs):
    full = [r["test"] for r in synthetic_runs["full"]]
    noise = [r["test"] for r in synthetic_runs["noise"]]
    wins = sum(f > n for f, n in zip(full, noise))
    mean = float(np.mean(full))
    secs = synthetic_runs["seconds"]
    ok = mean >= 1.5 * RANDOM_BASELINE and wins >= 4 and secs < 600
    verdict("synthetic learning", ok,
            f"mean test recall@20 {mean:.4f} (need >= {1.5 * RANDOM_BASELINE:.2f}), beats noise "
            f"features in {wins}/5 seeds (need >= 4); all 15 runs took {secs:.0f}s")


def test_ablation_direction(synthetic_runs):
    full = float(np.mean([r["val"] for r in synthetic_runs["full"]]))
    ui = float(np.mean([r["val"] for r in synthetic_runs["ui"]]))
    verdict("ablation direction", full >= ui,
            f"mean val recall@20 full {full:.4f} vs no homogeneous graphs {ui:.4f} (need full >= ui)")


def test_determinism(tmp_path):
    table, feats = generate_synthetic(80, 50, 4, [6, 4], 8, 0.1, seed=5)
    raw = tmp_path / "inter.tsv"
    raw.write_text("".join(f"{table.user_ids[u]}\t{table.item_ids[i]}\n" for u, i in table.pairs))
    for f in feats:
        save_features(tmp_path / f"{f.modality}.cmf", f)
    assert main(["prepare", "--interactions", str(raw), "--kcore", "1", "--out", str(tmp_path / "prep")]) == 0
    args = ["--data", str(tmp_path / "prep"), "--features", f"textual={tmp_path / 'textual.cmf'}",
            "--features", f"visual={tmp_path / 'visual.cmf'}", "--d", "16", "--max-epochs", "5",
            "--batch-size", "128", "--seed", "3"]
    assert main(["train", *args, "--out", str(tmp_path / "a")]) == 0
    manifest = tmp_path / "a" / "manifest.json"
    assert main(["train", "--config", str(manifest), "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "metrics_val.json").read_bytes()
    b = (tmp_path / "b" / "metrics_val.json").read_bytes()
    recall = json.loads(a)["recall"]["20"]
    verdict("determinism", a == b,
            f"metrics_val.json {'bit-identical' if a == b else 'differs'} across two runs "
            f"(val recall@20 {recall:.4f})")


@pytest.mark.skip(reason="optional long run on the full Baby dataset; not part of the gate")
def test_baby_long_run():
    pass
