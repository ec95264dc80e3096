"""Command-line interface.

Subcommands: gen-corpus, train-moe, trace, train-predictor, probe-sparsity,
serve, bench. Options can come from flags or a YAML config file (nested
key-value; flags win). The environment variable SIDA_SEED overrides any
configured seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from .bench import merge_config, run_benchmark
from .corpus import CorpusSpec, generate_corpus, load_corpus, save_corpus
from .moe import MoEConfig, load_moe, model_forward, save_moe, train_toy_moe
from .offload import MemoryBudget
from .pipeline import fidelity, serve_sida, serve_standard
from .predictor import (
    PredictorConfig,
    load_predictor,
    save_predictor,
    train_predictor,
)
from .sparsity import estimate_c, measure_p_hat


def _load_yaml(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return data or {}


def _seed(args_seed: int | None, cfg: dict) -> int:
    env = os.environ.get("SIDA_SEED")
    if env is not None:
        return int(env)
    if args_seed is not None:
        return args_seed
    return int(cfg.get("seed", 0))


def cmd_gen_corpus(args) -> int:
    cfg = _load_yaml(args.config)
    spec_kwargs = dict(cfg.get("corpus", {}))
    for name in ("vocab_size", "num_sequences", "min_len", "max_len",
                 "num_classes", "beta"):
        val = getattr(args, name)
        if val is not None:
            spec_kwargs[name] = val
    spec_kwargs["seed"] = _seed(args.seed, cfg)
    corpus = generate_corpus(CorpusSpec(**spec_kwargs))
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} sequences to {args.out}")
    return 0


def cmd_train_moe(args) -> int:
    cfg = _load_yaml(args.config)
    corpus = load_corpus(args.corpus)
    moe_kwargs = dict(cfg.get("moe", {}))
    moe_kwargs.setdefault("vocab_size", corpus.spec.vocab_size)
    moe_kwargs.setdefault("num_classes", corpus.spec.num_classes)
    if args.num_experts is not None:
        moe_kwargs["num_experts"] = args.num_experts
    train_kwargs = dict(cfg.get("train_moe", {}))
    if args.epochs is not None:
        train_kwargs["epochs"] = args.epochs
    if args.lr is not None:
        train_kwargs["lr"] = args.lr
    seed = _seed(args.seed, cfg)
    model, history = train_toy_moe(
        MoEConfig(**moe_kwargs), corpus.items(), seed=seed, **train_kwargs
    )
    save_moe(model, args.out)
    print(
        f"trained MoE (K={model.config.num_experts}) seed={seed} "
        f"final_loss={history['loss'][-1]:.4f} "
        f"train_acc={history['final_train_accuracy']:.4f} -> {args.out}"
    )
    return 0


def cmd_trace(args) -> int:
    model = load_moe(args.checkpoint)
    corpus = load_corpus(args.corpus)
    probs, selected, lengths = [], [], []
    for batch in corpus.batches(batch_size=args.batch_size):
        _, trace = model_forward(model, batch, mode="router")
        probs.append(trace.probs)
        selected.append(trace.selected)
        lengths.extend(trace.lengths)
    np.savez(
        args.out,
        probs=np.concatenate(probs, axis=1),
        selected=np.concatenate(selected, axis=1),
        lengths=np.asarray(lengths, dtype=np.int64),
    )
    print(f"wrote traces for {len(lengths)} sequences to {args.out}")
    return 0


def cmd_train_predictor(args) -> int:
    cfg = _load_yaml(args.config)
    teacher = load_moe(args.checkpoint)
    corpus = load_corpus(args.corpus)
    pred_kwargs = dict(cfg.get("predictor", {}))
    for name in ("lr", "batch_size", "max_steps", "top_t"):
        val = getattr(args, name)
        if val is not None:
            pred_kwargs[name] = val
    seed = _seed(args.seed, cfg)
    net, report = train_predictor(
        PredictorConfig(**pred_kwargs), corpus.items(), teacher, seed=seed
    )
    save_predictor(net, args.out)
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report, fh, indent=2)
    print(
        f"trained predictor seed={seed} top1={report['hit_rate_top1']:.4f} "
        f"top3={report['hit_rate_top3']:.4f} -> {args.out}"
    )
    return 0


def cmd_probe_sparsity(args) -> int:
    cfg = _load_yaml(args.config)
    model = load_moe(args.checkpoint)
    corpus = load_corpus(args.corpus)
    seed = _seed(args.seed, cfg)
    p_grid = [float(x) for x in args.p_grid.split(",")]
    items = corpus.items()
    results = {"mode": args.mode, "probe_layer": args.probe_layer,
               "p_grid": p_grid, "positions": [], "seed": seed}
    length = len(items[args.sequence_index][0])
    for pos in range(min(args.positions, length)):
        p_hats = [
            measure_p_hat(
                model, items, pos, p, args.trials, mode=args.mode,
                probe_layer=args.probe_layer, seed=seed,
                vocab_size=model.config.vocab_size,
                sequence_index=args.sequence_index,
            )
            for p in p_grid
        ]
        results["positions"].append(
            {"i": pos, "p_hat": p_hats, "c_hat": estimate_c(p_grid, p_hats, length)}
        )
    with open(args.out, "w") as fh:
        json.dump(results, fh, indent=2)
    print(f"wrote probe results for {len(results['positions'])} positions to {args.out}")
    return 0


def cmd_serve(args) -> int:
    cfg = _load_yaml(args.config)
    model = load_moe(args.checkpoint)
    corpus = load_corpus(args.corpus)
    seed = _seed(args.seed, cfg)
    batches = corpus.batches(batch_size=args.batch_size, max_batches=args.max_batches)
    budget_bytes = args.budget_bytes
    if budget_bytes is None:
        budget_bytes = model.total_expert_bytes()
    budget = MemoryBudget(
        fast_tier_bytes=budget_bytes,
        bandwidth_bytes_per_s=args.bandwidth,
        per_transfer_latency_s=args.latency,
    )
    if args.mode == "standard":
        report = serve_standard(
            model, batches, budget,
            selection_overhead_s=args.selection_overhead, seed=seed,
        )
    else:
        predictor = None
        if args.mode == "sida":
            if not args.predictor:
                print("--predictor is required for --mode sida", file=sys.stderr)
                return 2
            predictor = load_predictor(args.predictor)
        report = serve_sida(
            model, predictor, batches, budget,
            eval_top_k=args.top_k, queue_capacity=args.queue_capacity, seed=seed,
        )
    report.save_json(args.report)
    if args.csv:
        report.save_csv(args.csv)
    agg = report.to_json_dict()["aggregate"]
    print(json.dumps({"mode": args.mode, **agg}, indent=2))
    return 0


def cmd_bench(args) -> int:
    overrides = _load_yaml(args.config)
    env = os.environ.get("SIDA_SEED")
    if env is not None:
        overrides["seed"] = int(env)
    elif args.seed is not None:
        overrides["seed"] = args.seed
    bundle = run_benchmark(overrides, args.out)
    n_cells = len(bundle["cells"])
    n_err = len(bundle["errors"])
    print(f"bench complete: {n_cells} cells, {n_err} errors -> {args.out}/bundle.json")
    return 0 if n_err == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sida")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a planted synthetic corpus")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--num-sequences", dest="num_sequences", type=int)
    p.add_argument("--min-len", dest="min_len", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--beta", type=float)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train-moe", help="train the toy MoE on a corpus")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--num-experts", dest="num_experts", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train_moe)

    p = sub.add_parser("trace", help="dump router activation traces for a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=1)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("train-predictor", help="train the hash function")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--top-t", dest="top_t", type=int)
    p.set_defaults(func=cmd_train_predictor)

    p = sub.add_parser("probe-sparsity", help="corruption probe and c estimation")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["token", "position"], default="token")
    p.add_argument("--probe-layer", dest="probe_layer", type=int, default=0)
    p.add_argument("--p-grid", dest="p_grid", default="0.2,0.4,0.6,0.8")
    p.add_argument("--positions", type=int, default=8)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--sequence-index", dest="sequence_index", type=int, default=0)
    p.set_defaults(func=cmd_probe_sparsity)

    p = sub.add_parser("serve", help="run a serving mode over a corpus stream")
    p.add_argument("--config")
    p.add_argument("--mode", choices=["sida", "standard", "oracle"], required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--predictor")
    p.add_argument("--corpus", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--csv")
    p.add_argument("--seed", type=int)
    p.add_argument("--budget-bytes", dest="budget_bytes", type=int)
    p.add_argument("--bandwidth", type=float, default=16e9)
    p.add_argument("--latency", type=float, default=50e-6)
    p.add_argument("--top-k", dest="top_k", type=int, default=1)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=1)
    p.add_argument("--max-batches", dest="max_batches", type=int)
    p.add_argument("--queue-capacity", dest="queue_capacity", type=int, default=8)
    p.add_argument("--selection-overhead", dest="selection_overhead",
                   type=float, default=0.0)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("bench", help="run the full benchmark grid")
    p.add_argument("--config")
    p.add_argument("--out", default="bench_out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
