"""Two-worker serving loop: hash building and inference coupled by a queue.

The hash worker builds an expert hash table per incoming batch and enqueues
it; the inference worker dequeues tables in batch order, plans expert
placement against the byte budget, overlaps next-layer loads with the
current layer's compute, and forwards batches in external-hash mode (the
routers never run). Simulated transfer seconds are realized as real waits in
the serving loop, so wall-clock latency and throughput integrate the cost
model while the report still decomposes measured compute from simulated
transfer.

Output logits are a pure function of (weights, hash tables, batch): queue
timing, budgets, and worker interleaving only move time around.
"""

from __future__ import annotations

import csv
import json
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, UnservableError
from .moe import MoEModel, SequenceBatch, model_forward
from .offload import (
    MemoryBudget,
    PlanGroup,
    ResidencyState,
    apply_group_inplace,
    ensure_layer_resident,
    plan_placement,
)
from .predictor import (
    ExpertHashTable,
    OracleHasher,
    PredictorHasher,
    PredictorNet,
    hash_hit_rate,
)

REPORT_SCHEMA_VERSION = 1


class _WorkerFailure:
    def __init__(self, exc: BaseException):
        self.exc = exc


class HashTableQueue:
    """Bounded FIFO of hash tables; dequeue order must equal batch-id order."""

    def __init__(self, capacity: int = 8):
        if capacity < 1:
            raise ContractError("queue capacity must be >= 1")
        self.capacity = capacity
        self._q: queue.Queue = queue.Queue(maxsize=capacity)
        self._last_put_id: int | None = None

    def put(self, table: ExpertHashTable, timeout: float | None = None) -> None:
        if not isinstance(table, _WorkerFailure):
            if self._last_put_id is not None and table.batch_id <= self._last_put_id:
                raise ContractError("hash tables must be enqueued in batch_id order")
            self._last_put_id = table.batch_id
        self._q.put(table, timeout=timeout)

    def get(self, expected_batch_id: int, timeout: float = 120.0) -> ExpertHashTable:
        try:
            item = self._q.get(timeout=timeout)
        except queue.Empty:
            raise RuntimeError(
                f"timed out waiting for hash table {expected_batch_id}"
            ) from None
        if isinstance(item, _WorkerFailure):
            raise item.exc
        if item.batch_id != expected_batch_id:
            raise ContractError(
                f"queue order violation: expected batch {expected_batch_id}, "
                f"got {item.batch_id}"
            )
        return item


@dataclass
class ServingReport:
    """Per-batch timings plus aggregate serving metrics."""

    mode: str
    seed: int
    budget_bytes: int
    eval_top_k: int | None
    batch_records: list[dict] = field(default_factory=list)
    logits: list[np.ndarray] = field(default_factory=list)
    labels: list[list[int]] | None = None
    accuracy: float | None = None
    hit_rate: float | None = None
    throughput_samples_per_s: float = 0.0
    total_wall_s: float = 0.0
    total_samples: int = 0
    mean_effective_utilization: float | None = None
    peak_fast_tier_bytes: int = 0

    def to_json_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "mode": self.mode,
            "seed": self.seed,
            "budget_bytes": self.budget_bytes,
            "eval_top_k": self.eval_top_k,
            "batches": self.batch_records,
            "aggregate": {
                "throughput_samples_per_s": self.throughput_samples_per_s,
                "total_wall_s": self.total_wall_s,
                "total_samples": self.total_samples,
                "accuracy": self.accuracy,
                "hash_hit_rate": self.hit_rate,
                "mean_effective_utilization": self.mean_effective_utilization,
                "peak_fast_tier_bytes": self.peak_fast_tier_bytes,
            },
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)

    def save_csv(self, path) -> None:
        cols = [
            "batch_id", "num_samples", "latency_s", "queue_wait_s",
            "transfer_s", "compute_s", "selection_s",
        ]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for rec in self.batch_records:
                writer.writerow({k: rec.get(k, 0.0) for k in cols})


def _sleep_until(deadline: float) -> None:
    while True:
        remaining = deadline - time.perf_counter()
        if remaining <= 0:
            return
        time.sleep(remaining)


def _resolve_hasher(model: MoEModel, predictor):
    if predictor is None:
        return OracleHasher(model)
    if isinstance(predictor, PredictorNet):
        return PredictorHasher(predictor, model.embed)
    return predictor  # anything exposing build_table(batch, eval_top_k)


def _batch_accuracy(logits_list, batches):
    correct = total = 0
    for logits, batch in zip(logits_list, batches):
        if batch.labels is None:
            return None
        preds = np.argmax(logits, axis=1)
        correct += int(np.sum(preds == np.asarray(batch.labels)))
        total += len(batch.labels)
    return correct / total if total else None


def serve_sida(
    model: MoEModel,
    predictor,
    batches: list[SequenceBatch],
    budget: MemoryBudget,
    eval_top_k: int = 1,
    queue_capacity: int = 8,
    prefetch: str = "layer",
    seed: int = 0,
    compute_hit_rate: bool = True,
) -> ServingReport:
    """Serve a batch stream with the hash-building/inference worker pair.

    ``predictor`` may be a PredictorNet, any object with
    ``build_table(batch, eval_top_k)``, or None for the oracle (teacher
    router as hash function).
    """
    if prefetch not in ("layer", "batch"):
        raise ContractError(f"unknown prefetch mode {prefetch!r}")
    batches = list(batches)
    if not batches:
        raise ContractError("empty batch stream")
    ids = [b.batch_id for b in batches]
    if ids != sorted(ids) or len(set(ids)) != len(ids):
        raise ContractError("batch_id must be strictly increasing")
    if model.expert_bytes_each() > budget.fast_tier_bytes:
        raise UnservableError("budget cannot hold a single expert")

    hasher = _resolve_hasher(model, predictor)
    q = HashTableQueue(queue_capacity)
    tables: list[ExpertHashTable] = []
    records: list[dict] = []
    logits_out: list[np.ndarray] = []
    errors: list[BaseException] = []
    state = ResidencyState()
    expert_bytes = model.expert_bytes_each()
    peak = 0
    utilizations: list[float] = []
    num_layers = model.config.num_layers

    def hash_worker():
        try:
            for batch in batches:
                table = hasher.build_table(batch, eval_top_k)
                tables.append(table)
                q.put(table)
        except BaseException as exc:  # propagate into the inference worker
            q.put(_WorkerFailure(exc))

    def inference_worker():
        nonlocal peak
        try:
            for batch in batches:
                t_wait0 = time.perf_counter()
                table = q.get(batch.batch_id)
                t_start = time.perf_counter()
                queue_wait = t_start - t_wait0
                plan = plan_placement(table, state, budget, expert_bytes)
                ready = [t_start] * max(num_layers, 1)
                issued = [False] * num_layers

                def issue(idx: int):
                    nonlocal peak
                    apply_group_inplace(state, plan.groups[idx],
                                        budget.fast_tier_bytes, expert_bytes)
                    ready[idx] = time.perf_counter() + plan.groups[idx].transfer_s
                    issued[idx] = True
                    peak = max(peak, state.used_bytes)

                compute_s = 0.0
                if prefetch == "batch":
                    for idx in range(num_layers):
                        issue(idx)
                t_c0 = time.perf_counter()
                xs = [model.embed(s) for s in batch.sequences]
                compute_s += time.perf_counter() - t_c0
                offsets = np.cumsum([0] + batch.lengths)
                for layer in range(num_layers):
                    if not issued[layer]:
                        issue(layer)
                    if (
                        prefetch == "layer"
                        and layer + 1 < num_layers
                        and plan.groups[layer + 1].prefetchable
                    ):
                        issue(layer + 1)
                    _sleep_until(ready[layer])
                    t_c0 = time.perf_counter()
                    for si, x in enumerate(xs):
                        ids_sl, alpha_sl = table.sequence_slice(
                            int(offsets[si]), batch.lengths[si]
                        )
                        x = model.attention_mix(layer, x)
                        xs[si] = model.moe_apply(layer, x, ids_sl[layer], alpha_sl[layer])
                    compute_s += time.perf_counter() - t_c0
                t_c0 = time.perf_counter()
                batch_logits = np.stack([model.pool_classify(x) for x in xs])
                compute_s += time.perf_counter() - t_c0
                t_end = time.perf_counter()
                logits_out.append(batch_logits)
                resident_req = [
                    k for k in table.required_experts() if k in state.resident
                ]
                util = (
                    sum(state.resident[k] for k in resident_req) / state.used_bytes
                    if state.used_bytes
                    else 1.0
                )
                utilizations.append(util)
                records.append(
                    {
                        "batch_id": batch.batch_id,
                        "num_samples": len(batch.sequences),
                        "latency_s": t_end - t_start,
                        "queue_wait_s": queue_wait,
                        "transfer_s": plan.estimated_transfer_s,
                        "compute_s": compute_s,
                        "selection_s": 0.0,
                    }
                )
        except BaseException as exc:
            errors.append(exc)

    t_run0 = time.perf_counter()
    workers = [
        threading.Thread(target=hash_worker, name="sida-hash"),
        threading.Thread(target=inference_worker, name="sida-infer"),
    ]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    total_wall = time.perf_counter() - t_run0
    if errors:
        raise errors[0]

    total_samples = sum(len(b.sequences) for b in batches)
    report = ServingReport(
        mode="sida" if not isinstance(hasher, OracleHasher) else "oracle",
        seed=seed,
        budget_bytes=budget.fast_tier_bytes,
        eval_top_k=eval_top_k,
        batch_records=records,
        logits=logits_out,
        labels=[list(b.labels) for b in batches] if batches[0].labels is not None else None,
        throughput_samples_per_s=total_samples / total_wall,
        total_wall_s=total_wall,
        total_samples=total_samples,
        mean_effective_utilization=float(np.mean(utilizations)) if utilizations else None,
        peak_fast_tier_bytes=peak,
    )
    report.accuracy = _batch_accuracy(logits_out, batches)
    if compute_hit_rate:
        traces = [model_forward(model, b, mode="router")[1] for b in batches]
        report.hit_rate = hash_hit_rate(tables, traces, min(eval_top_k, tables[0].eval_top_k))
    return report


def serve_standard(
    model: MoEModel,
    batches: list[SequenceBatch],
    budget: MemoryBudget,
    selection_overhead_s: float = 0.0,
    seed: int = 0,
) -> ServingReport:
    """Sequential router-mode serving with reactive expert loads.

    Experts load only after each layer's router output is known, so
    selection and transfer sit on the critical path. An optional synthetic
    per-router-call overhead (sleep) models expensive expert selection.
    """
    batches = list(batches)
    if not batches:
        raise ContractError("empty batch stream")
    if model.expert_bytes_each() > budget.fast_tier_bytes:
        raise UnservableError("budget cannot hold a single expert")
    from .numkit import softmax as _softmax, topk_rows as _topk_rows

    state = ResidencyState()
    expert_bytes = model.expert_bytes_each()
    records: list[dict] = []
    logits_out: list[np.ndarray] = []
    utilizations: list[float] = []
    peak = 0
    routing_k = model.config.routing_k

    t_run0 = time.perf_counter()
    for batch in batches:
        t_start = time.perf_counter()
        compute_s = selection_s = transfer_s = 0.0
        t_c0 = time.perf_counter()
        xs = [model.embed(s) for s in batch.sequences]
        compute_s += time.perf_counter() - t_c0
        batch_required: set = set()
        for layer in range(model.config.num_layers):
            t_c0 = time.perf_counter()
            xs = [model.attention_mix(layer, x) for x in xs]
            compute_s += time.perf_counter() - t_c0
            t_s0 = time.perf_counter()
            sels, alphas = [], []
            w_r = model.params[f"block{layer}.w_r"]
            for x in xs:
                probs = _softmax(x @ w_r)
                sel = _topk_rows(probs, routing_k)
                sels.append(sel)
                alphas.append(np.take_along_axis(probs, sel, axis=1))
            if selection_overhead_s > 0.0:
                time.sleep(selection_overhead_s)
            selection_s += time.perf_counter() - t_s0
            layer_req = {int(e) for sel in sels for e in np.unique(sel)}
            batch_required |= {(layer, e) for e in layer_req}
            group = ensure_layer_resident(state, layer, layer_req, budget, expert_bytes)
            peak = max(peak, state.used_bytes)
            if group.transfer_s > 0.0:
                time.sleep(group.transfer_s)
            transfer_s += group.transfer_s
            t_c0 = time.perf_counter()
            xs = [
                model.moe_apply(layer, x, sel, alpha)
                for x, sel, alpha in zip(xs, sels, alphas)
            ]
            compute_s += time.perf_counter() - t_c0
        t_c0 = time.perf_counter()
        batch_logits = np.stack([model.pool_classify(x) for x in xs])
        compute_s += time.perf_counter() - t_c0
        t_end = time.perf_counter()
        logits_out.append(batch_logits)
        resident_req = [k for k in batch_required if k in state.resident]
        utilizations.append(
            sum(state.resident[k] for k in resident_req) / state.used_bytes
            if state.used_bytes
            else 1.0
        )
        records.append(
            {
                "batch_id": batch.batch_id,
                "num_samples": len(batch.sequences),
                "latency_s": t_end - t_start,
                "queue_wait_s": 0.0,
                "transfer_s": transfer_s,
                "compute_s": compute_s,
                "selection_s": selection_s,
            }
        )
    total_wall = time.perf_counter() - t_run0
    total_samples = sum(len(b.sequences) for b in batches)
    report = ServingReport(
        mode="standard",
        seed=seed,
        budget_bytes=budget.fast_tier_bytes,
        eval_top_k=None,
        batch_records=records,
        logits=logits_out,
        labels=[list(b.labels) for b in batches] if batches[0].labels is not None else None,
        throughput_samples_per_s=total_samples / total_wall,
        total_wall_s=total_wall,
        total_samples=total_samples,
        mean_effective_utilization=float(np.mean(utilizations)) if utilizations else None,
        peak_fast_tier_bytes=peak,
    )
    report.accuracy = _batch_accuracy(logits_out, batches)
    return report


def fidelity(report_sida: ServingReport, report_reference: ServingReport) -> float:
    """Ratio of task accuracies on the same labeled evaluation split."""
    if report_sida.accuracy is None or report_reference.accuracy is None:
        raise ContractError("fidelity requires labeled runs on both sides")
    if report_reference.accuracy == 0.0:
        raise ContractError("reference accuracy is zero")
    return report_sida.accuracy / report_reference.accuracy
