"""Command-line entry point for dataset generation, training, evaluation,
sampling and the stability experiment.

Every stochastic command requires --seed and is reproducible from it; output
files are written atomically (temp file, then rename).  Exit codes: 0 on
success, 1 on usage errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import torch

from .data import (
    DataSplit,
    Dataset,
    SplitSpec,
    dataset_digest,
    load_dataset,
    make_dataset,
    save_dataset,
    split,
)
from .decoder import (
    LOSS_LOG_HEADER,
    TrainConfig,
    VsgaeModel,
    train_vsgae,
)
from .encoder import EncoderConfig
from .evaluation import (
    DEFAULT_FRACTIONS,
    METRIC_CSV_HEADER,
    StabilityConfig,
    eval_prior_validity,
    eval_reconstruction,
    run_sampling_stability,
)
from .graphs import SearchSpaceLimits
from .predictor import (
    METRICS_HEADER,
    PredTrainConfig,
    ZeroShotSpec,
    rmse,
    train_joint,
    zero_shot,
)
from .sampling import (
    fit_pca,
    latent_bin_sample,
    pca_report_rows,
    reduce,
    sample_edit_uniform,
    sample_uniform_per_size,
)


def _atomic_write(path: Path, text: str) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_json(path: Path, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(x) for x in row))
    _atomic_write(path, "\n".join(lines) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _enc_cfg(args, variational: bool) -> EncoderConfig:
    return EncoderConfig(
        d_n=args.d_n, d_g=args.d_g, rounds=args.rounds, variational=variational
    )


def _split_from_args(ds: Dataset, args) -> DataSplit:
    ratios = tuple(float(x) for x in args.split.split("/"))
    if len(ratios) != 3:
        raise ValueError("--split needs three ratios, e.g. 0.7/0.2/0.1")
    spec = SplitSpec(ratios=ratios, method=args.split_method, seed=args.split_seed)
    return split(ds, spec)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_dataset(args) -> int:
    out = _out_dir(args)
    limits = SearchSpaceLimits(max_nodes=args.max_nodes, max_edges=args.max_edges)
    if args.sample_k is not None:
        ds = make_dataset(limits, "sample_k", args.sample_k, seed=args.seed, dedup=args.dedup)
        mode = "sample_k"
    else:
        ds = make_dataset(
            limits, "enumerate_upto_n", args.max_nodes, seed=args.seed, dedup=args.dedup
        )
        mode = "enumerate_upto_n"
    path = out / "dataset.jsonl"
    save_dataset(ds, path)
    by_size: dict[int, int] = {}
    for r in ds.records:
        by_size[r.graph.n] = by_size.get(r.graph.n, 0) + 1
    _write_json(
        out / "summary.json",
        {
            "records": len(ds),
            "by_size": {str(k): v for k, v in sorted(by_size.items())},
            "mode": mode,
            "dedup": args.dedup,
            "seed": args.seed,
            "digest": dataset_digest(ds),
            "path": str(path),
        },
    )
    print(f"wrote {len(ds)} records to {path}")
    return 0


def cmd_train_vsgae(args) -> int:
    out = _out_dir(args)
    ds = load_dataset(args.dataset)
    cfg = TrainConfig(
        alpha=args.alpha,
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    enc_cfg = _enc_cfg(args, variational=True)
    started = time.time()
    last = {"epoch": -1}

    def progress(stats):
        last["epoch"] = stats.epoch
        if args.verbose and (stats.epoch % 10 == 0 or stats.epoch == cfg.epochs - 1):
            print(
                f"epoch {stats.epoch}: total {stats.total:.4f} "
                f"(node {stats.node_loss:.4f}, edge {stats.edge_loss:.4f}, "
                f"kl {stats.kl:.4f}) lr {stats.lr:g}"
            )

    model, log = train_vsgae(ds, cfg, enc_cfg, progress=progress)
    ckpt = out / "checkpoint.bin"
    model.save(
        ckpt,
        {
            "train_config": asdict(cfg),
            "dataset_digest": dataset_digest(ds),
            "epoch": cfg.epochs - 1,
        },
    )
    _write_csv(
        out / "loss_log.csv",
        LOSS_LOG_HEADER,
        [(s.epoch, s.node_loss, s.edge_loss, s.kl, s.total, s.lr) for s in log],
    )
    _write_json(
        out / "summary.json",
        {
            "checkpoint": str(ckpt),
            "epochs": cfg.epochs,
            "final_total_loss": log[-1].total,
            "final_node_loss": log[-1].node_loss,
            "final_edge_loss": log[-1].edge_loss,
            "final_kl": log[-1].kl,
            "records": len(ds),
            "seconds": round(time.time() - started, 3),
            "seed": args.seed,
        },
    )
    print(f"trained {cfg.epochs} epochs; final loss {log[-1].total:.4f}; wrote {ckpt}")
    return 0


def cmd_train_predictor(args) -> int:
    out = _out_dir(args)
    ds = load_dataset(args.dataset)
    parts = _split_from_args(ds, args)
    cfg = PredTrainConfig(
        lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed
    )
    result = train_joint(ds, parts, cfg, _enc_cfg(args, variational=False))
    preds = result.model.predict_graphs([ds.records[i].graph for i in parts.test])
    test_rmse = rmse(preds, ds.accuracies()[list(parts.test)])
    ckpt = out / "checkpoint.bin"
    result.model.save(
        ckpt,
        {
            "train_config": asdict(cfg),
            "dataset_digest": dataset_digest(ds),
            "best_epoch": result.best_epoch,
        },
    )
    _write_csv(
        out / "metrics.csv",
        METRICS_HEADER,
        [(s.epoch, s.train_rmse, s.val_rmse) for s in result.log],
    )
    _write_json(
        out / "summary.json",
        {
            "test_rmse": test_rmse,
            "best_epoch": result.best_epoch,
            "best_val_rmse": result.best_val_rmse,
            "spec": {
                "split": args.split,
                "split_method": args.split_method,
                "split_seed": args.split_seed,
                "epochs": cfg.epochs,
                "lr": cfg.lr,
                "seed": args.seed,
            },
        },
    )
    print(f"test RMSE {test_rmse:.5f} (best epoch {result.best_epoch}); wrote {ckpt}")
    return 0


def cmd_zero_shot(args) -> int:
    out = _out_dir(args)
    ds = load_dataset(args.dataset)
    cfg = PredTrainConfig(
        lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed
    )
    res = zero_shot(ds, ZeroShotSpec(holdout_n=args.holdout_n), cfg, _enc_cfg(args, False))
    _write_csv(
        out / "metrics.csv",
        METRICS_HEADER,
        [(s.epoch, s.train_rmse, s.val_rmse) for s in res.result.log],
    )
    _write_json(
        out / "summary.json",
        {
            "test_rmse": res.test_rmse,
            "best_epoch": res.result.best_epoch,
            "spec": {"holdout_n": args.holdout_n, "epochs": cfg.epochs, "seed": args.seed},
        },
    )
    print(f"zero-shot test RMSE on size {args.holdout_n}: {res.test_rmse:.5f}")
    return 0


def cmd_sample(args) -> int:
    out = _out_dir(args)
    ds = load_dataset(args.dataset)
    if args.k is not None:
        k = args.k
    elif args.fraction is not None:
        k = round(args.fraction * len(ds))
    else:
        raise ValueError("one of --k or --fraction is required")
    if args.method == "latent-bin":
        if not args.checkpoint:
            raise ValueError("--checkpoint is required for the latent-bin method")
        model, _ = VsgaeModel.load(args.checkpoint)
        emb, _ = model.encode_graphs(ds.graphs())
        reduced = reduce(fit_pca(emb), emb, dims=min(args.dims, emb.shape[1]))
        result = latent_bin_sample(reduced, k, args.seed)
    elif args.method == "size-uniform":
        result = sample_uniform_per_size(ds, k, args.seed)
    else:
        result = sample_edit_uniform(ds, k, args.seed)
    path = out / "sample.json"
    _atomic_write(path, result.to_json() + "\n")
    print(f"sampled {k} of {len(ds)} records with {args.method}; wrote {path}")
    return 0


def cmd_eval_recon(args) -> int:
    out = _out_dir(args)
    ds = load_dataset(args.dataset)
    model, _ = VsgaeModel.load(args.checkpoint)
    accuracy = eval_reconstruction(
        model.encode_graphs,
        lambda z, rng: model.decode_latents(z, rng),
        ds.graphs(),
        seed=args.seed,
        z_samples=args.z_samples,
        decodes_per_z=args.decodes,
    )
    _write_json(
        out / "summary.json",
        {
            "reconstruction_accuracy": accuracy,
            "num_graphs": len(ds),
            "z_samples": args.z_samples,
            "decodes_per_z": args.decodes,
            "seed": args.seed,
        },
    )
    print(f"reconstruction accuracy: {accuracy:.4f} over {len(ds)} graphs")
    return 0


def cmd_eval_prior(args) -> int:
    out = _out_dir(args)
    model, _ = VsgaeModel.load(args.checkpoint)
    validity = eval_prior_validity(
        lambda z, rng: model.decode_latents(z, rng),
        latent_dim=model.enc_cfg.d_g,
        seed=args.seed,
        num_latents=args.num_latents,
        decodes_per_latent=args.decodes,
    )
    _write_json(
        out / "summary.json",
        {
            "prior_validity": validity,
            "num_latents": args.num_latents,
            "decodes_per_latent": args.decodes,
            "seed": args.seed,
        },
    )
    print(f"prior validity: {validity:.4f}")
    return 0


def cmd_pca_report(args) -> int:
    out = _out_dir(args)
    ds = load_dataset(args.dataset)
    model, _ = VsgaeModel.load(args.checkpoint)
    emb, _ = model.encode_graphs(ds.graphs())
    rows = pca_report_rows(fit_pca(emb))
    path = out / "pca_report.csv"
    _write_csv(path, ("component", "eigenvalue", "ratio", "cumulative_ratio"), rows)
    significant = sum(1 for _, _, ratio, _ in rows if ratio >= 0.01)
    _write_json(
        out / "summary.json",
        {
            "components": len(rows),
            "significant_components_1pct": significant,
            "top_ratio": rows[0][2],
            "csv": str(path),
        },
    )
    print(f"wrote {len(rows)} components to {path}")
    return 0


def cmd_sampling_stability(args) -> int:
    out = _out_dir(args)
    ds = load_dataset(args.dataset)
    parts = _split_from_args(ds, args)
    enc_cfg = _enc_cfg(args, variational=False)
    if args.checkpoint:
        model, _ = VsgaeModel.load(args.checkpoint)
    else:
        vs_cfg = TrainConfig(epochs=args.vsgae_epochs, seed=args.seed, batch_size=args.batch_size)
        model, _ = train_vsgae(ds, vs_cfg, _enc_cfg(args, variational=True))
    emb, _ = model.encode_graphs([ds.records[i].graph for i in parts.train])
    cfg = StabilityConfig(
        fractions=tuple(float(f) for f in args.fractions.split(",")),
        num_seeds=args.num_seeds,
        epochs=args.epochs,
        base_seed=args.seed,
    )
    pred_cfg = PredTrainConfig(lr=args.lr, batch_size=args.batch_size, seed=args.seed)

    def progress(row):
        if args.verbose:
            print(f"{row.method} f={row.fraction} seed={row.seed}: {row.value:.5f}")

    rows, summary = run_sampling_stability(
        ds, parts, emb, cfg, pred_cfg, enc_cfg, progress=progress
    )
    _write_csv(
        out / "metrics.csv",
        METRIC_CSV_HEADER,
        [(r.experiment, r.method, r.fraction, r.seed, r.metric, r.value) for r in rows],
    )
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d-n", type=int, default=32, help="node embedding dimension")
    p.add_argument("--d-g", type=int, default=16, help="graph embedding dimension")
    p.add_argument("--rounds", type=int, default=2, help="message-passing rounds")


def _add_split_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split", default="0.7/0.2/0.1", help="train/test/validation ratios")
    p.add_argument(
        "--split-method", choices=("random", "size-stratified"), default="random"
    )
    p.add_argument("--split-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vsgae",
        description="Graph autoencoder, accuracy predictor and sampling experiments "
        "over cell-graph search spaces.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="enumerate or sample a labeled synthetic dataset")
    p.add_argument("--max-nodes", type=int, default=5)
    p.add_argument("--max-edges", type=int, default=9)
    p.add_argument("--sample-k", type=int, default=None, help="sample k graphs instead")
    p.add_argument("--dedup", action="store_true", help="drop isomorphic duplicates")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train-vsgae", help="train the variational autoencoder unsupervised")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--alpha", type=float, default=0.005)
    p.add_argument("--batch-size", type=int, default=32)
    _add_model_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train_vsgae)

    p = sub.add_parser("train-predictor", help="train encoder + accuracy predictor jointly")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=32)
    _add_model_flags(p)
    _add_split_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_predictor)

    p = sub.add_parser("zero-shot", help="hold out one graph size, test prediction on it")
    p.add_argument("--dataset", required=True)
    p.add_argument("--holdout-n", type=int, required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=32)
    _add_model_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_zero_shot)

    p = sub.add_parser("sample", help="down-sample a dataset with one of the three methods")
    p.add_argument("--dataset", required=True)
    p.add_argument(
        "--method", choices=("size-uniform", "edit-uniform", "latent-bin"), required=True
    )
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--checkpoint", help="autoencoder checkpoint (latent-bin only)")
    p.add_argument("--dims", type=int, default=4, help="reduced dimensions for latent-bin")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval-recon", help="reconstruction accuracy of a trained autoencoder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--z-samples", type=int, default=10)
    p.add_argument("--decodes", type=int, default=10)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_recon)

    p = sub.add_parser("eval-prior", help="prior validity of a trained autoencoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--num-latents", type=int, default=1000)
    p.add_argument("--decodes", type=int, default=10)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_prior)

    p = sub.add_parser("pca-report", help="explained variance of the latent space")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pca_report)

    p = sub.add_parser("sampling-stability", help="test-error stability across sampling methods")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", help="autoencoder checkpoint; trained inline if omitted")
    p.add_argument("--vsgae-epochs", type=int, default=100)
    p.add_argument("--fractions", default=",".join(str(f) for f in DEFAULT_FRACTIONS))
    p.add_argument("--num-seeds", type=int, default=3)
    p.add_argument("--epochs", type=int, default=100)
    # desk-scale default: small sampled training sets need the larger rate
    # to fit within the 100-epoch budget
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)
    _add_model_flags(p)
    _add_split_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_sampling_stability)

    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except Exception as exc:  # runtime failure, distinct from usage errors
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
