"""Command-line entry point: prepare, synth, train, evaluate, ablate, grid, export."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import multiprocessing
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

import torch

from .checkpoint import dataset_fingerprint, file_fingerprint, load_checkpoint, save_checkpoint
from .cmf import write_cmf
from .data import (
    generate_synthetic,
    kcore_filter,
    load_features,
    load_interactions,
    load_split,
    save_features,
    split_dataset,
    write_split,
)
from .evaluation import DEFAULT_BUCKETS, evaluate
from .model import BEHAVIOR, CohesionModel, ModelConfig
from .graph import build_adjacency, normalize_sym
from .training import TrainConfig, fit

log = logging.getLogger("cohesion.cli")

MANIFEST = "manifest.json"
TRAIN_LOG = "train_log.csv"
CHECKPOINT_DIR = "checkpoint"

MODALITY_LETTERS = {"i": BEHAVIOR, "t": "textual", "v": "visual"}
DEFAULT_GRID = {"lr": [1e-1, 1e-2, 1e-3, 1e-4], "reg": [1e-1, 1e-2, 1e-3, 1e-4], "layers": [1, 2, 3, 4]}


class UsageError(Exception):
    pass


# -- configuration --------------------------------------------------------

def default_config() -> dict:
    flat = {f"model.{k}": v for k, v in ModelConfig().to_dict().items()}
    flat.update({f"train.{k}": v for k, v in TrainConfig().to_dict().items()})
    flat["data.dir"] = None
    flat["data.features"] = {}
    return flat


# (flag dest, config key)
_FLAG_KEYS = [
    ("d", "model.d"), ("layers", "model.n_layers"), ("user_layers", "model.user_layers"),
    ("item_layers", "model.item_layers"), ("k_uu", "model.k_uu"), ("k_ii", "model.k_ii"),
    ("eps", "model.eps"), ("leaky_slope", "model.leaky_slope"),
    ("fusion_mode", "model.fusion_mode"), ("knn_refresh", "model.knn_refresh_interval"),
    ("knn_source", "model.knn_source"), ("dtype", "model.dtype"),
    ("lr", "train.lr"), ("reg", "train.reg_lambda"), ("batch_size", "train.batch_size"),
    ("max_epochs", "train.max_epochs"), ("patience", "train.patience"), ("seed", "train.seed"),
    ("fused_loss_weight", "train.fused_loss_weight"), ("data", "data.dir"),
]


def apply_ablation(flat: dict, tokens: list[str]) -> dict:
    """Map variant tokens (no-uu, no-ii, no-refine-t, plain-bpr, ...) onto config keys."""
    flat = dict(flat)
    no_refine = set(flat["model.no_refine"])
    for tok in (t.strip() for t in tokens):
        if not tok or tok == "full":
            continue
        if tok == "no-uu":
            flat["model.use_uu"] = False
        elif tok == "no-ii":
            flat["model.use_ii"] = False
        elif tok == "plain-bpr":
            flat["train.adaptive_loss"] = False
        elif tok == "item-rownorm":
            flat["model.item_graph_rownorm"] = True
        elif tok.startswith("no-refine-"):
            letters = tok[len("no-refine-"):]
            if not letters or any(c not in MODALITY_LETTERS for c in letters):
                raise UsageError(f"unknown ablation {tok!r}")
            no_refine |= {MODALITY_LETTERS[c] for c in letters}
        else:
            raise UsageError(f"unknown ablation {tok!r}")
    flat["model.no_refine"] = sorted(no_refine)
    return flat


def _parse_features(items: list[str] | None) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--features expects modality=path, got {item!r}")
        out[name] = path
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults < --config file < explicit flags."""
    flat = default_config()
    if getattr(args, "config", None):
        loaded = json.loads(Path(args.config).read_text())
        loaded = loaded.get("config", loaded)  # a run manifest works as a config
        unknown = set(loaded) - set(flat)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        flat.update(loaded)
    for dest, key in _FLAG_KEYS:
        val = getattr(args, dest, None)
        if val is not None:
            flat[key] = val
    feats = _parse_features(getattr(args, "features", None))
    if feats:
        flat["data.features"] = feats
    tokens = []
    for v in getattr(args, "ablate", None) or []:
        tokens += v.split(",")
    for letter in "itv":
        if getattr(args, f"no_refine_{letter}", False):
            tokens.append(f"no-refine-{letter}")
    for flag, tok in (("no_uu", "no-uu"), ("no_ii", "no-ii"), ("plain_bpr", "plain-bpr"),
                      ("item_rownorm", "item-rownorm")):
        if getattr(args, flag, False):
            tokens.append(tok)
    return apply_ablation(flat, tokens)


def split_configs(flat: dict) -> tuple[ModelConfig, TrainConfig]:
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    mk = {k[6:]: v for k, v in flat.items() if k.startswith("model.") and k[6:] in model_keys}
    tk = {k[6:]: v for k, v in flat.items() if k.startswith("train.") and k[6:] in train_keys}
    mk["no_refine"] = tuple(mk.get("no_refine", ()))
    return ModelConfig(**mk), TrainConfig(**tk)


def _git_describe() -> str | None:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
            timeout=5, cwd=Path(__file__).parent,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _set_threads() -> None:
    n = os.environ.get("COHESION_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


# -- pipeline pieces shared by commands -----------------------------------

def _load_inputs(flat: dict):
    if not flat.get("data.dir"):
        raise UsageError("a prepared data directory is required (--data)")
    split = load_split(flat["data.dir"])
    feats = [
        load_features(path, split.n_items, modality=name)
        for name, path in flat["data.features"].items()
    ]
    if not feats:
        raise UsageError("at least one --features modality=path is required")
    return split, feats


def run_train(flat: dict, out_dir: str | Path) -> dict:
    """Train one configuration into ``out_dir``; returns a summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    manifest = {
        "config": flat,
        "seed": flat["train.seed"],
        "git": _git_describe(),
        "started": started,
        "status": "running",
    }
    try:
        model_cfg, train_cfg = split_configs(flat)
        split, feats = _load_inputs(flat)
        manifest["fingerprints"] = {
            "dataset": dataset_fingerprint(flat["data.dir"]),
            "features": {n: file_fingerprint(p) for n, p in flat["data.features"].items()},
        }
        _set_threads()
        result = fit(split, feats, model_cfg, train_cfg)
    except Exception as exc:
        manifest.update(status="failed", error=str(exc), finished=_now())
        (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        raise

    with open(out / TRAIN_LOG, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "val_recall@20", "val_ndcg@20", "seconds"])
        for r in result.log:
            w.writerow([r.epoch, repr(r.loss), repr(r.val_recall), repr(r.val_ndcg), f"{r.seconds:.4f}"])

    model = result.model
    users, items = model.embeddings()
    report = evaluate(users, items, split, which="val", ks=(10, 20))
    report.write_json(out / "metrics_val.json", include_timing=False)
    knn = (model.knn.user, model.knn.item) if model.knn.user is not None else None
    save_checkpoint(out / CHECKPOINT_DIR, model.params, knn, {
        "epoch": result.best_epoch,
        "val_recall@20": result.best_val_recall,
        "n_users": split.n_users,
        "n_items": split.n_items,
        "modalities": model.modalities,
        "model": model_cfg.to_dict(),
        "dataset": manifest["fingerprints"]["dataset"],
    })
    manifest.update(
        status="diverged" if result.diverged else "ok",
        finished=_now(),
        best_epoch=result.best_epoch,
        epochs_run=len(result.log),
    )
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    summary = {
        "best_epoch": result.best_epoch,
        "val_recall@20": report.recall[20],
        "val_ndcg@20": report.ndcg[20],
        "epochs": len(result.log),
        "status": manifest["status"],
    }
    if result.diverged:
        raise RuntimeError(f"training diverged; best checkpoint (epoch {result.best_epoch}) kept in {out}")
    return summary


def load_run(run_dir: str | Path, data_dir: str | None = None, features: dict | None = None):
    """Rebuild a trained model and its split from a run directory."""
    run = Path(run_dir)
    manifest_path = run / MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"{run}: no {MANIFEST}")
    flat = json.loads(manifest_path.read_text())["config"]
    if data_dir:
        flat["data.dir"] = data_dir
    if features:
        flat["data.features"] = features
    model_cfg, _ = split_configs(flat)
    split, feats = _load_inputs(flat)
    params, knn, meta = load_checkpoint(
        run / CHECKPOINT_DIR, torch.float64 if model_cfg.dtype == "float64" else torch.float32
    )
    if (meta["n_users"], meta["n_items"]) != (split.n_users, split.n_items):
        raise ValueError(
            f"checkpoint is for {meta['n_users']} users / {meta['n_items']} items, "
            f"data has {split.n_users} / {split.n_items}"
        )
    if meta.get("dataset") and meta["dataset"] != dataset_fingerprint(flat["data.dir"]):
        raise ValueError("dataset fingerprint does not match the checkpoint")
    adj = normalize_sym(build_adjacency(split.train))
    model = CohesionModel(adj, split.n_users, feats, model_cfg, params=params)
    if knn is not None:
        model.set_knn(*knn)
    return model, split, flat


# -- commands -----------------------------------------------------------------

def _parse_ratios(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid ratios {text!r}") from None
    if len(vals) != 3 or min(vals) <= 0 or abs(sum(vals) - 1) > 1e-9:
        raise argparse.ArgumentTypeError("ratios must be three positive numbers summing to 1")
    return vals


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid list {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid list {text!r}") from None


def cmd_prepare(args) -> int:
    table = load_interactions(args.interactions)
    raw_count = len(table)
    table = kcore_filter(table, args.kcore)
    if table.empty_after_filter:
        raise RuntimeError(f"{args.kcore}-core filtering left no interactions")
    split = split_dataset(table, args.ratios, args.seed)
    manifest = write_split(split, args.out, extra={
        "kcore": args.kcore,
        "raw_interactions": raw_count,
        "source": str(args.interactions),
    })
    log.info("prepared %d users, %d items, %d interactions -> %s",
             manifest["n_users"], manifest["n_items"], manifest["interactions"], args.out)
    return 0


def cmd_synth(args) -> int:
    table, feats = generate_synthetic(
        args.users, args.items, args.clusters, args.dims, args.per_user, args.noise, args.seed
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "interactions.tsv", "w", encoding="utf-8") as fh:
        for u, i in table.pairs:
            fh.write(f"{table.user_ids[u]}\t{table.item_ids[i]}\n")
    for f in feats:
        save_features(out / f"{f.modality}.cmf", f)
    log.info("wrote %d interactions and %d feature files to %s", len(table), len(feats), out)
    return 0


def cmd_train(args) -> int:
    flat = resolve_config(args)
    summary = run_train(flat, args.out)
    log.info("best epoch %d, val recall@20 %.4f", summary["best_epoch"], summary["val_recall@20"])
    return 0


def cmd_evaluate(args) -> int:
    model, split, _ = load_run(args.run, args.data, _parse_features(args.features) or None)
    users, items = model.embeddings()
    buckets = args.bucket_edges if args.buckets else None
    report = evaluate(users, items, split, which=args.split, ks=(10, 20),
                      mask_val=args.mask_val, buckets=buckets)
    out = Path(args.out or args.run)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / f"metrics_{args.split}.json", include_timing=False)
    if args.buckets:
        report.write_bucket_csv(out / f"buckets_{args.split}.csv")
    log.info("%s recall@20 %.4f ndcg@20 %.4f (%.2fs)", args.split, report.recall[20],
             report.ndcg[20], report.epoch_seconds)
    return 0


def cmd_export(args) -> int:
    model, _, _ = load_run(args.run, args.data, _parse_features(args.features) or None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        trace = model.forward()
    write_cmf(out / "user_final.cmf", trace.user_final.numpy())
    write_cmf(out / "item_final.cmf", trace.item_final.numpy())
    for m, e in trace.ebar.items():
        write_cmf(out / f"ebar_{m}.cmf", e.numpy())
    log.info("exported %d modality embeddings to %s", len(trace.ebar), out)
    return 0


def _run_cell(flat: dict, out_dir: str) -> dict:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    try:
        return run_train(flat, out_dir)
    except Exception as exc:  # a failed cell is recorded, the sweep continues
        return {"status": "failed", "error": str(exc)}


def _run_cells(cells: list[tuple[str, dict]], out: Path, jobs: int) -> list[dict]:
    dirs = [str(out / "cells" / name) for name, _ in cells]
    if jobs <= 1:
        return [_run_cell(flat, d) for (_, flat), d in zip(cells, dirs)]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
        return list(pool.map(_run_cell, [flat for _, flat in cells], dirs))


def _sort_key(row: dict):
    r = row.get("val_recall@20")
    return (r is None, -(r or 0.0))


def cmd_grid(args) -> int:
    base = resolve_config(args)
    cells = []
    for lr in args.lrs:
        for reg in args.regs:
            for n_layers in args.grid_layers:
                flat = dict(base, **{"train.lr": lr, "train.reg_lambda": reg, "model.n_layers": n_layers})
                cells.append((f"lr{lr:g}_reg{reg:g}_L{n_layers}", flat))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = _run_cells(cells, out, args.jobs)
    rows = []
    for (name, flat), res in zip(cells, results):
        rows.append({
            "cell": name, "lr": flat["train.lr"], "reg": flat["train.reg_lambda"],
            "layers": flat["model.n_layers"], "val_recall@20": res.get("val_recall@20"),
            "val_ndcg@20": res.get("val_ndcg@20"), "best_epoch": res.get("best_epoch"),
            "status": res.get("status"), "error": res.get("error", ""),
        })
    rows.sort(key=_sort_key)
    with open(out / "grid.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    ok = [r for r in rows if r["val_recall@20"] is not None]
    best = ok[0] if ok else None
    (out / "best.json").write_text(json.dumps(
        {"best": best, "run_dir": str(out / "cells" / best["cell"]) if best else None},
        indent=2, sort_keys=True) + "\n")
    if best is None:
        log.error("every grid cell failed")
        return 1
    log.info("best cell %s: val recall@20 %.4f", best["cell"], best["val_recall@20"])
    return 0


DEFAULT_VARIANTS = [
    "full", "no-refine-itv", "no-refine-tv", "no-refine-iv", "no-refine-it",
    "no-refine-v", "no-refine-t", "no-refine-i", "no-uu", "no-ii", "no-uu,no-ii", "plain-bpr",
]


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    variants = args.variant or DEFAULT_VARIANTS
    cells = [(v.replace(",", "+"), apply_ablation(base, v.split(","))) for v in variants]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = _run_cells(cells, out, args.jobs)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "val_recall@20", "val_ndcg@20", "best_epoch", "status"])
        for (name, _), res in zip(cells, results):
            w.writerow([name, res.get("val_recall@20"), res.get("val_ndcg@20"),
                        res.get("best_epoch"), res.get("status")])
    return 0 if all(r.get("status") == "ok" for r in results) else 1


# -- parser --------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="prepared split directory")
    p.add_argument("--features", action="append", metavar="MODALITY=PATH",
                   help="CMF1 item features, repeatable (e.g. textual=t.cmf)")
    p.add_argument("--config", help="JSON config with dotted keys, or a run manifest")
    g = p.add_argument_group("model")
    g.add_argument("--d", type=int)
    g.add_argument("--layers", type=int, help="heterogeneous GCN layers L")
    g.add_argument("--user-layers", type=int)
    g.add_argument("--item-layers", type=int)
    g.add_argument("--k-uu", type=int)
    g.add_argument("--k-ii", type=int)
    g.add_argument("--eps", type=float)
    g.add_argument("--leaky-slope", type=float)
    g.add_argument("--fusion-mode", choices=["weighted_sum", "concat"])
    g.add_argument("--knn-refresh", type=int, help="rebuild kNN graphs every N epochs (0 = once)")
    g.add_argument("--knn-source", choices=["fused", "behavior"])
    g.add_argument("--dtype", choices=["float32", "float64"])
    g.add_argument("--no-refine-i", action="store_true")
    g.add_argument("--no-refine-t", action="store_true")
    g.add_argument("--no-refine-v", action="store_true")
    g.add_argument("--no-uu", action="store_true")
    g.add_argument("--no-ii", action="store_true")
    g.add_argument("--item-rownorm", action="store_true")
    g.add_argument("--ablate", action="append", help="comma list, e.g. no-uu,no-ii")
    t = p.add_argument_group("training")
    t.add_argument("--lr", type=float)
    t.add_argument("--reg", type=float, help="L2 weight lambda")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--plain-bpr", action="store_true")
    t.add_argument("--fused-loss-weight", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cohesion", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="k-core filter and split an interaction TSV")
    p.add_argument("--interactions", required=True)
    p.add_argument("--kcore", type=int, default=5)
    p.add_argument("--ratios", type=_parse_ratios, default=(0.8, 0.1, 0.1))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="write a planted-cluster synthetic dataset")
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--items", type=int, default=200)
    p.add_argument("--clusters", type=int, default=5)
    p.add_argument("--dims", type=_int_list, default=[16, 8])
    p.add_argument("--per-user", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one configuration")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a trained run")
    p.add_argument("--run", required=True, help="run directory written by train")
    p.add_argument("--data")
    p.add_argument("--features", action="append", metavar="MODALITY=PATH")
    p.add_argument("--split", choices=["test", "val"], default="test")
    p.add_argument("--mask-val", action="store_true", help="also mask validation items when ranking test")
    p.add_argument("--buckets", action="store_true", help="write per-degree recall@20 CSV")
    p.add_argument("--bucket-edges", type=_float_list, default=list(DEFAULT_BUCKETS))
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="grid search over lr, lambda and L")
    _add_config_flags(p)
    p.add_argument("--lrs", type=_float_list, default=DEFAULT_GRID["lr"])
    p.add_argument("--regs", type=_float_list, default=DEFAULT_GRID["reg"])
    p.add_argument("--grid-layers", type=_int_list, default=DEFAULT_GRID["layers"])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("ablate", help="train ablation variants")
    _add_config_flags(p)
    p.add_argument("--variant", action="append", help="comma list of ablation tokens; repeatable")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export", help="export final and per-modality embeddings as CMF1")
    p.add_argument("--run", required=True)
    p.add_argument("--data")
    p.add_argument("--features", action="append", metavar="MODALITY=PATH")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if not args.verbose:
        log.setLevel(logging.INFO)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cohesion: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
