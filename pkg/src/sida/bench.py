"""Benchmark orchestration: corpora, training, serving grid, report bundle.

A bench config is a nested mapping (see DEFAULT_CONFIG for the full key
set). ``run_benchmark`` executes, per expert-count grid value: corpus
generation, teacher training, optional predictor training, a
{standard, oracle, sida} x budget-fraction serving grid, sparsity and
memory-reduction series, and optionally the corruption probe. Everything is
written under an output directory: one JSON+CSV per serving cell plus a
bundle.json that validates against schemas/report_bundle.schema.json.

Stage failures are recorded in the bundle's error manifest and the
remaining stages continue where their inputs exist.
"""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

import numpy as np

from .corpus import Corpus, CorpusSpec, generate_corpus
from .errors import ContractError
from .moe import MoEConfig, MoEModel, model_forward, sequence_sparsity, train_toy_moe
from .offload import MemoryBudget, memory_reduction
from .pipeline import ServingReport, fidelity, serve_sida, serve_standard
from .predictor import OracleHasher, PredictorConfig, PredictorHasher, train_predictor
from .sparsity import estimate_c, expected_change_prob, measure_p_hat

BUNDLE_SCHEMA_VERSION = 1

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "k_grid": [8],
    "corpus": {
        "vocab_size": 512,
        "num_sequences": 600,
        "min_len": 8,
        "max_len": 16,
        "num_classes": 4,
        "beta": 0.9,
    },
    "eval_corpus": {"num_sequences": 200},
    "moe": {
        "d_model": 64,
        "num_layers": 2,
        "expert_hidden": 128,
        "max_seq_len": 64,
        "routing_k": 1,
    },
    "train_moe": {"epochs": 4, "lr": 3e-3, "balance_coeff": 0.01, "batch_size": 16},
    "predictor": {
        "compress_dim": 32,
        "lstm_hidden": 48,
        "top_t": 30,
        "lambda_ce": 0.005,
        "lr": 2e-3,
        "batch_size": 32,
        "max_steps": 2000,
    },
    "serve": {
        "modes": ["standard", "oracle", "sida"],
        "budget_fracs": [0.25, 0.5, 1.0],
        "eval_top_k": 1,
        "batch_size": 1,
        "max_batches": None,
        "selection_overhead_s": 0.0,
        "bandwidth_bytes_per_s": 16e9,
        "per_transfer_latency_s": 50e-6,
        "queue_capacity": 8,
    },
    "sparsity_probe": {
        "enabled": False,
        "mode": "token",
        "probe_layer": 0,
        "p_grid": [0.2, 0.4, 0.6, 0.8],
        "positions": 8,
        "trials": 200,
    },
}


def merge_config(overrides: dict | None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)

    def merge(dst, src):
        for key, val in src.items():
            if key not in dst:
                raise ContractError(f"unknown config key {key!r}")
            if isinstance(val, dict) and isinstance(dst[key], dict):
                merge(dst[key], val)
            else:
                dst[key] = val

    if overrides:
        merge(cfg, overrides)
    return cfg


def load_bundle_schema() -> dict:
    with resources.files("sida.schemas").joinpath("report_bundle.schema.json").open() as fh:
        return json.load(fh)


def _length_bucket(length: int) -> int:
    for edge in (8, 16, 32, 64, 128):
        if length <= edge:
            return edge
    return 256


def run_benchmark(config: dict | None = None, out_dir: str | Path = "bench_out") -> dict:
    cfg = merge_config(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle: dict = {
        "schema_version": BUNDLE_SCHEMA_VERSION,
        "seed": cfg["seed"],
        "config": cfg,
        "cells": [],
        "series": {
            "throughput_vs_budget": [],
            "reduction_vs_length": [],
            "latency_breakdown": [],
            "sequence_sparsity": [],
        },
        "sparsity_probe": None,
        "errors": [],
    }

    for num_experts in cfg["k_grid"]:
        tag = f"k{num_experts}"
        try:
            artifacts = _prepare_models(cfg, num_experts)
        except Exception as exc:  # stage failure: record and skip this K
            bundle["errors"].append({"stage": f"{tag}.prepare", "error": repr(exc)})
            continue
        teacher, predictor, eval_corpus = artifacts
        serve_cfg = cfg["serve"]
        stream = eval_corpus.batches(
            batch_size=serve_cfg["batch_size"], max_batches=serve_cfg["max_batches"]
        )
        _reduction_series(bundle, teacher, stream, num_experts, serve_cfg, out, tag)
        reference: ServingReport | None = None
        for frac in serve_cfg["budget_fracs"]:
            budget = MemoryBudget(
                fast_tier_bytes=int(frac * teacher.total_expert_bytes()),
                bandwidth_bytes_per_s=serve_cfg["bandwidth_bytes_per_s"],
                per_transfer_latency_s=serve_cfg["per_transfer_latency_s"],
            )
            for mode in serve_cfg["modes"]:
                try:
                    report = _serve_cell(
                        teacher, predictor, stream, budget, mode, serve_cfg, cfg["seed"]
                    )
                except Exception as exc:
                    bundle["errors"].append(
                        {"stage": f"{tag}.serve.{mode}@{frac}", "error": repr(exc)}
                    )
                    continue
                if mode == "standard" and frac == max(serve_cfg["budget_fracs"]):
                    reference = report
                stem = f"{tag}_{mode}_b{int(frac * 100)}"
                report.save_json(out / f"{stem}.json")
                report.save_csv(out / f"{stem}.csv")
                cell = {
                    "mode": mode,
                    "num_experts": num_experts,
                    "budget_frac": frac,
                    "budget_bytes": budget.fast_tier_bytes,
                    "aggregate": report.to_json_dict()["aggregate"],
                    "report_json": f"{stem}.json",
                    "report_csv": f"{stem}.csv",
                    "fidelity": None,
                    "mean_memory_reduction": None,
                }
                bundle["cells"].append(cell)
                bundle["series"]["throughput_vs_budget"].append(
                    {
                        "num_experts": num_experts,
                        "mode": mode,
                        "budget_frac": frac,
                        "throughput_samples_per_s": report.throughput_samples_per_s,
                    }
                )
                recs = report.batch_records
                bundle["series"]["latency_breakdown"].append(
                    {
                        "num_experts": num_experts,
                        "mode": mode,
                        "budget_frac": frac,
                        "compute_s": float(np.mean([r["compute_s"] for r in recs])),
                        "transfer_s": float(np.mean([r["transfer_s"] for r in recs])),
                        "selection_s": float(np.mean([r["selection_s"] for r in recs])),
                    }
                )
        # fidelity against the most permissive standard run
        if reference is not None and reference.accuracy:
            for cell in bundle["cells"]:
                if cell["num_experts"] == num_experts and cell["fidelity"] is None:
                    acc = cell["aggregate"].get("accuracy")
                    if acc is not None:
                        cell["fidelity"] = acc / reference.accuracy
        if cfg["sparsity_probe"]["enabled"]:
            try:
                bundle["sparsity_probe"] = _run_probe(cfg, teacher, eval_corpus)
            except Exception as exc:
                bundle["errors"].append({"stage": f"{tag}.probe", "error": repr(exc)})

    bundle_path = out / "bundle.json"
    with open(bundle_path, "w") as fh:
        json.dump(bundle, fh, indent=2, default=float)
    _write_series_csvs(bundle, out)
    return bundle


def _prepare_models(cfg: dict, num_experts: int):
    corpus_spec = CorpusSpec(seed=cfg["seed"], **cfg["corpus"])
    train_corpus = generate_corpus(corpus_spec)
    eval_kwargs = dict(cfg["corpus"])
    eval_kwargs.update(cfg["eval_corpus"])
    eval_corpus = generate_corpus(CorpusSpec(seed=cfg["seed"] + 1, **eval_kwargs))
    moe_cfg = MoEConfig(
        vocab_size=cfg["corpus"]["vocab_size"],
        num_experts=num_experts,
        num_classes=cfg["corpus"]["num_classes"],
        **cfg["moe"],
    )
    teacher, _ = train_toy_moe(
        moe_cfg, train_corpus.items(), seed=cfg["seed"], **cfg["train_moe"]
    )
    predictor = None
    if "sida" in cfg["serve"]["modes"]:
        pred_cfg = PredictorConfig(**cfg["predictor"])
        predictor, _ = train_predictor(
            pred_cfg, train_corpus.items(), teacher, seed=cfg["seed"]
        )
    return teacher, predictor, eval_corpus


def _serve_cell(teacher, predictor, stream, budget, mode, serve_cfg, seed):
    if mode == "standard":
        return serve_standard(
            teacher,
            stream,
            budget,
            selection_overhead_s=serve_cfg["selection_overhead_s"],
            seed=seed,
        )
    if mode == "oracle":
        return serve_sida(
            teacher, None, stream, budget,
            eval_top_k=serve_cfg["eval_top_k"],
            queue_capacity=serve_cfg["queue_capacity"], seed=seed,
        )
    if mode == "sida":
        if predictor is None:
            raise ContractError("sida mode requires a trained predictor")
        return serve_sida(
            teacher, predictor, stream, budget,
            eval_top_k=serve_cfg["eval_top_k"],
            queue_capacity=serve_cfg["queue_capacity"], seed=seed,
        )
    raise ContractError(f"unknown serve mode {mode!r}")


def _reduction_series(bundle, teacher, stream, num_experts, serve_cfg, out, tag):
    """Memory reduction and idle-expert series from oracle tables/traces."""
    hasher = OracleHasher(teacher)
    buckets: dict[int, list[float]] = {}
    idle_buckets: dict[int, list[float]] = {}
    reductions = []
    for batch in stream:
        table = hasher.build_table(batch, serve_cfg["eval_top_k"])
        red = memory_reduction(table, teacher)
        reductions.append(red)
        _, trace = model_forward(teacher, batch, mode="router")
        idle = float(np.mean(sequence_sparsity(trace, teacher.config.num_experts)))
        mean_len = float(np.mean(batch.lengths))
        buckets.setdefault(_length_bucket(int(mean_len)), []).append(red)
        idle_buckets.setdefault(_length_bucket(int(mean_len)), []).append(idle)
    for cell in bundle["cells"]:
        if cell["num_experts"] == num_experts and cell["mode"] in ("oracle", "sida"):
            cell["mean_memory_reduction"] = float(np.mean(reductions))
    for edge in sorted(buckets):
        bundle["series"]["reduction_vs_length"].append(
            {
                "num_experts": num_experts,
                "mean_length": edge,
                "mean_reduction": float(np.mean(buckets[edge])),
            }
        )
        bundle["series"]["sequence_sparsity"].append(
            {
                "num_experts": num_experts,
                "length_bucket": edge,
                "mean_idle_fraction": float(np.mean(idle_buckets[edge])),
            }
        )
    # also fill reduction for standard cells (router-activated set equals oracle top-1)
    for cell in bundle["cells"]:
        if cell["num_experts"] == num_experts and cell["mean_memory_reduction"] is None:
            cell["mean_memory_reduction"] = float(np.mean(reductions)) if reductions else None


def _run_probe(cfg: dict, teacher, eval_corpus: Corpus) -> dict:
    probe_cfg = cfg["sparsity_probe"]
    items = eval_corpus.items()
    length = len(items[0][0])
    points = []
    c_hats = []
    for pos in range(min(probe_cfg["positions"], length)):
        p_hats = []
        for p in probe_cfg["p_grid"]:
            ph = measure_p_hat(
                teacher, items, pos, p, probe_cfg["trials"],
                mode=probe_cfg["mode"], probe_layer=probe_cfg["probe_layer"],
                seed=cfg["seed"], vocab_size=cfg["corpus"]["vocab_size"],
            )
            p_hats.append(ph)
            points.append({"position": pos, "p": p, "p_hat": ph})
        c_hats.append(estimate_c(probe_cfg["p_grid"], p_hats, length))
    return {
        "probe_layer": probe_cfg["probe_layer"],
        "mode": probe_cfg["mode"],
        "points": points,
        "c_hat": c_hats,
        "expected_curves": {
            str(c): [expected_change_prob(length, c, p) for p in probe_cfg["p_grid"]]
            for c in sorted(set(c_hats))
        },
    }


def _write_series_csvs(bundle: dict, out: Path) -> None:
    import csv as _csv

    for name, rows in bundle["series"].items():
        if not rows:
            continue
        path = out / f"series_{name}.csv"
        with open(path, "w", newline="") as fh:
            writer = _csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
