"""Desk-scale stacked MoE transformer with hand-derived gradients.

Each block mixes tokens with single-head scaled dot-product self-attention,
then applies a top-k routed MoE layer; residual connections wrap both
sublayers (no layernorm or dropout, which keeps finite-difference gradient
checks clean). Sequence logits come from a mean-pool over tokens followed by
a linear classifier head.

Two forward modes exist. In ``router`` mode each block's router computes
softmax scores and selects experts. In ``external`` mode the routers are
bypassed entirely and expert ids plus scaling factors are taken from a
supplied hash table, so router weights never participate in the pass.

Traces and hash tables share one layout: tokens of a batch are concatenated
sequence by sequence into a single global token axis, and per-layer arrays
are indexed (layer, global_token, rank).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import checkpoint
from .errors import ContractError, TrainingDiverged
from .numkit import (
    Rng,
    check_finite,
    relu,
    relu_backward,
    softmax,
    softmax_backward,
    topk_rows,
)
from .optim import AdamW


@dataclass
class MoEConfig:
    vocab_size: int = 512
    d_model: int = 64
    num_layers: int = 2
    num_experts: int = 32
    expert_hidden: int = 128
    max_seq_len: int = 64
    routing_k: int = 1
    num_classes: int = 4

    def __post_init__(self):
        for name in (
            "vocab_size", "d_model", "num_layers", "num_experts",
            "expert_hidden", "max_seq_len", "routing_k", "num_classes",
        ):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.routing_k > self.num_experts:
            raise ContractError("routing_k must not exceed num_experts")


@dataclass
class SequenceBatch:
    """Token-id sequences flowing through both workers.

    batch_id is assigned by the stream builder and must be strictly
    increasing in arrival order.
    """

    batch_id: int
    sequences: list[np.ndarray]
    labels: list[int] | None = None

    @property
    def lengths(self) -> list[int]:
        return [len(s) for s in self.sequences]

    @property
    def num_tokens(self) -> int:
        return sum(self.lengths)


@dataclass
class ActivationTrace:
    """Per (layer, global token): router probabilities and the selected set.

    In external mode ``probs`` is None (routers did not run) and
    ``selected``/``alphas`` echo the supplied hash table.
    """

    lengths: list[int]
    selected: np.ndarray          # (num_layers, total_tokens, k) int64
    alphas: np.ndarray            # (num_layers, total_tokens, k) float64
    probs: np.ndarray | None      # (num_layers, total_tokens, K) or None

    @property
    def num_layers(self) -> int:
        return self.selected.shape[0]

    @property
    def offsets(self) -> list[int]:
        out = [0]
        for n in self.lengths:
            out.append(out[-1] + n)
        return out


def router_scores(x: np.ndarray, w_r: np.ndarray) -> np.ndarray:
    """Softmax over the router's per-expert linear scores for one embedding."""
    x = check_finite(x, "router input")
    if x.shape[0] != w_r.shape[0]:
        raise ContractError(
            f"dimension mismatch: x has {x.shape[0]}, router expects {w_r.shape[0]}"
        )
    return softmax(w_r.T @ x)


def moe_layer_forward(
    x: np.ndarray,
    selected: np.ndarray,
    alphas: np.ndarray,
    experts: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    eval_counts: np.ndarray | None = None,
) -> np.ndarray:
    """Weighted sum of expert MLP outputs for one embedding.

    Only experts listed in ``selected`` are evaluated; that is the sparsity
    contract, and ``eval_counts`` (length K) records each evaluation.
    """
    w1, b1, w2, b2 = experts
    num_experts = w1.shape[0]
    selected = np.asarray(selected, dtype=np.int64)
    alphas = np.asarray(alphas, dtype=np.float64)
    if selected.size == 0:
        raise ContractError("selected expert set is empty")
    if np.any(selected < 0) or np.any(selected >= num_experts):
        raise ContractError("expert index out of range")
    if np.any(alphas < 0):
        raise ContractError("scaling factors must be non-negative")
    out = np.zeros(w2.shape[2])
    for idx, alpha in zip(selected, alphas):
        h = relu(x @ w1[idx] + b1[idx])
        out += alpha * (h @ w2[idx] + b2[idx])
        if eval_counts is not None:
            eval_counts[idx] += 1
    return out


class MoEModel:
    """Embeddings, mixing-attention blocks, routers, experts, classifier head.

    Parameters live in an ordered name -> array dict (the checkpoint's
    declared order). Expert parameters are stacked along a leading expert
    axis per layer, so every expert in a layer occupies an identical number
    of bytes.
    """

    def __init__(self, config: MoEConfig, rng: Rng | None = None):
        self.config = config
        c = config
        rng = rng if rng is not None else Rng(0)
        d, h, k_exp = c.d_model, c.expert_hidden, c.num_experts
        emb_scale = 1.0 / np.sqrt(d)
        xavier_dd = np.sqrt(1.0 / d)
        xavier_dh = np.sqrt(2.0 / (d + h))

        p: dict[str, np.ndarray] = {}
        p["tok_emb"] = rng.normal(0.0, emb_scale, (c.vocab_size, d))
        p["pos_emb"] = rng.normal(0.0, emb_scale, (c.max_seq_len, d))
        for layer in range(c.num_layers):
            pre = f"block{layer}."
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + name] = rng.normal(0.0, xavier_dd, (d, d))
            p[pre + "w_r"] = rng.normal(0.0, xavier_dd, (d, k_exp))
            p[pre + "w1"] = rng.normal(0.0, xavier_dh, (k_exp, d, h))
            p[pre + "b1"] = np.zeros((k_exp, h))
            p[pre + "w2"] = rng.normal(0.0, xavier_dh, (k_exp, h, d))
            p[pre + "b2"] = np.zeros((k_exp, d))
        p["wc"] = rng.normal(0.0, xavier_dd, (d, c.num_classes))
        self.params = p
        self.expert_eval_counts = np.zeros((c.num_layers, k_exp), dtype=np.int64)

    # -- parameter bookkeeping -------------------------------------------------

    def reset_eval_counts(self) -> None:
        self.expert_eval_counts[:] = 0

    def expert_bytes_each(self) -> int:
        c = self.config
        count = c.d_model * c.expert_hidden * 2 + c.expert_hidden + c.d_model
        return count * 8

    def total_expert_bytes(self) -> int:
        return self.expert_bytes_each() * self.config.num_layers * self.config.num_experts

    def non_expert_bytes(self) -> int:
        total = sum(v.size for v in self.params.values()) * 8
        return total - self.total_expert_bytes()

    def block(self, layer: int) -> dict[str, np.ndarray]:
        pre = f"block{layer}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    # -- forward pieces --------------------------------------------------------

    def embed(self, tokens: np.ndarray) -> np.ndarray:
        """Token + position embeddings for one sequence."""
        tokens = np.asarray(tokens, dtype=np.int64)
        c = self.config
        if tokens.size == 0:
            raise ContractError("empty sequence")
        if tokens.size > c.max_seq_len:
            raise ContractError(
                f"sequence length {tokens.size} exceeds max_seq_len {c.max_seq_len}"
            )
        if np.any(tokens < 0) or np.any(tokens >= c.vocab_size):
            raise ContractError("token id out of vocabulary")
        return self.params["tok_emb"][tokens] + self.params["pos_emb"][: tokens.size]

    def attention_mix(self, layer: int, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
        p = self.params
        pre = f"block{layer}."
        d = self.config.d_model
        q = x @ p[pre + "wq"]
        k = x @ p[pre + "wk"]
        v = x @ p[pre + "wv"]
        scores = (q @ k.T) / np.sqrt(d)
        attn = softmax(scores)
        ctx = attn @ v
        out = x + ctx @ p[pre + "wo"]
        if cache is not None:
            cache.update(x_in=x, q=q, k=k, v=v, attn=attn, ctx=ctx)
        return out

    def moe_apply(
        self,
        layer: int,
        x: np.ndarray,
        selected: np.ndarray,
        alphas: np.ndarray,
        cache: dict | None = None,
    ) -> np.ndarray:
        """Routed MoE sublayer over all tokens of one sequence (gathered experts)."""
        p = self.params
        pre = f"block{layer}."
        w1, b1 = p[pre + "w1"], p[pre + "b1"]
        w2, b2 = p[pre + "w2"], p[pre + "b2"]
        if np.any(selected < 0) or np.any(selected >= self.config.num_experts):
            raise ContractError("expert index out of range")
        out = np.zeros_like(x)
        rank_caches = []
        for r in range(selected.shape[1]):
            ids = selected[:, r]
            a1 = np.einsum("td,tdh->th", x, w1[ids]) + b1[ids]
            hidden = relu(a1)
            f_out = np.einsum("th,thd->td", hidden, w2[ids]) + b2[ids]
            out += alphas[:, r][:, None] * f_out
            rank_caches.append((ids, a1, hidden, f_out))
            np.add.at(self.expert_eval_counts[layer], ids, 1)
        if cache is not None:
            cache.update(x_moe=x, selected=selected, alphas=alphas, ranks=rank_caches)
        return x + out

    def pool_classify(self, x: np.ndarray) -> np.ndarray:
        pooled = x.mean(axis=0)
        return pooled @ self.params["wc"]

    def expert_selection(self, tokens: np.ndarray, layer: int) -> np.ndarray:
        """Top-1 routed expert per position at one layer (router mode)."""
        if not 0 <= layer < self.config.num_layers:
            raise ContractError(f"layer {layer} out of range")
        _, _, sels, _, _ = self.forward_sequence(tokens, mode="router")
        return sels[layer][:, 0]

    def forward_sequence(
        self,
        tokens: np.ndarray,
        mode: str = "router",
        table_slice: tuple[np.ndarray, np.ndarray] | None = None,
        collect_cache: bool = False,
        timings: dict | None = None,
    ):
        """Run one sequence through all blocks.

        Returns (logits, layer_probs, layer_selected, layer_alphas, caches).
        ``table_slice`` supplies (ids, alphas) arrays of shape
        (num_layers, T, k) in external mode.
        """
        c = self.config
        x = self.embed(tokens)
        t_len = x.shape[0]
        layer_probs, layer_sel, layer_alpha, caches = [], [], [], []
        for layer in range(c.num_layers):
            cache: dict | None = {} if collect_cache else None
            x = self.attention_mix(layer, x, cache)
            if mode == "router":
                t0 = time.perf_counter() if timings is not None else 0.0
                z = x @ self.params[f"block{layer}.w_r"]
                probs = softmax(z)
                sel = topk_rows(probs, c.routing_k)
                alphas = np.take_along_axis(probs, sel, axis=1)
                if timings is not None:
                    timings["selection"] = timings.get("selection", 0.0) + (
                        time.perf_counter() - t0
                    )
                layer_probs.append(probs)
            elif mode == "external":
                if table_slice is None:
                    raise ContractError("external mode requires a hash table")
                ids_all, alphas_all = table_slice
                if ids_all.shape[0] <= layer or ids_all.shape[1] != t_len:
                    raise ContractError(
                        f"missing hash entry for (layer {layer}, token "
                        f"{min(t_len - 1, ids_all.shape[1]) if ids_all.shape[0] > layer else 0})"
                    )
                sel = ids_all[layer]
                alphas = alphas_all[layer]
                probs = None
            else:
                raise ContractError(f"unknown forward mode {mode!r}")
            if cache is not None:
                cache["probs"] = probs
            x = self.moe_apply(layer, x, sel, alphas, cache)
            layer_sel.append(sel)
            layer_alpha.append(alphas)
            caches.append(cache)
        logits = self.pool_classify(x)
        if collect_cache:
            caches.append({"x_final": x, "t_len": t_len, "tokens": np.asarray(tokens, dtype=np.int64)})
        return logits, layer_probs, layer_sel, layer_alpha, caches

    # -- backward --------------------------------------------------------------

    def backward_sequence(
        self,
        caches: list,
        dlogits: np.ndarray,
        grads: dict[str, np.ndarray],
        dprob_extra: list[np.ndarray] | None = None,
    ) -> None:
        """Accumulate gradients for one cached router-mode forward.

        ``dprob_extra`` optionally adds an upstream gradient directly on each
        layer's router probabilities (used by the load-balance loss; selection
        indices are treated as constants).
        """
        c = self.config
        p = self.params
        tail = caches[-1]
        x_final, t_len = tail["x_final"], tail["t_len"]
        pooled = x_final.mean(axis=0)
        grads["wc"] += np.outer(pooled, dlogits)
        dpool = p["wc"] @ dlogits
        dx = np.tile(dpool / t_len, (t_len, 1))

        for layer in range(c.num_layers - 1, -1, -1):
            cache = caches[layer]
            pre = f"block{layer}."
            # MoE sublayer: x_out = x_moe + sum_r alpha_r * f_r(x_moe)
            x_moe = cache["x_moe"]
            selected, alphas = cache["selected"], cache["alphas"]
            dx_moe = dx.copy()
            dalpha = np.zeros_like(alphas)
            for r, (ids, a1, hidden, f_out) in enumerate(cache["ranks"]):
                dfr = alphas[:, r][:, None] * dx
                dalpha[:, r] = np.sum(f_out * dx, axis=1)
                dh = np.einsum("td,thd->th", dfr, p[pre + "w2"][ids])
                np.add.at(grads[pre + "w2"], ids, np.einsum("th,td->thd", hidden, dfr))
                np.add.at(grads[pre + "b2"], ids, dfr)
                da = relu_backward(a1, dh)
                dx_moe += np.einsum("th,tdh->td", da, p[pre + "w1"][ids])
                np.add.at(grads[pre + "w1"], ids, np.einsum("td,th->tdh", x_moe, da))
                np.add.at(grads[pre + "b1"], ids, da)
            probs = cache["probs"]
            if probs is not None:
                dprobs = np.zeros_like(probs)
                np.put_along_axis(dprobs, selected, dalpha, axis=1)
                if dprob_extra is not None:
                    dprobs += dprob_extra[layer]
                dz = softmax_backward(probs, dprobs)
                grads[pre + "w_r"] += x_moe.T @ dz
                dx_moe += dz @ p[pre + "w_r"].T
            # attention sublayer: x_moe = x_in + (attn @ v) @ wo
            x_in, q, k, v = cache["x_in"], cache["q"], cache["k"], cache["v"]
            attn, ctx = cache["attn"], cache["ctx"]
            dx_in = dx_moe.copy()
            dctx = dx_moe @ p[pre + "wo"].T
            grads[pre + "wo"] += ctx.T @ dx_moe
            dattn = dctx @ v.T
            dv = attn.T @ dctx
            dscores = softmax_backward(attn, dattn) / np.sqrt(c.d_model)
            dq = dscores @ k
            dk = dscores.T @ q
            dx_in += dq @ p[pre + "wq"].T + dk @ p[pre + "wk"].T + dv @ p[pre + "wv"].T
            grads[pre + "wq"] += x_in.T @ dq
            grads[pre + "wk"] += x_in.T @ dk
            grads[pre + "wv"] += x_in.T @ dv
            dx = dx_in

        tokens = tail["tokens"]
        np.add.at(grads["tok_emb"], tokens, dx)
        grads["pos_emb"][:t_len] += dx

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


def model_forward(
    model: MoEModel,
    batch: SequenceBatch,
    mode: str = "router",
    table=None,
    timings: dict | None = None,
) -> tuple[np.ndarray, ActivationTrace]:
    """Forward a whole batch; returns per-sequence logits and the trace."""
    c = model.config
    if mode == "external" and table is None:
        raise ContractError("external mode requires a hash table")
    all_logits = []
    sel_rows, alpha_rows, prob_rows = [], [], []
    offset = 0
    for seq_idx, tokens in enumerate(batch.sequences):
        t_len = len(tokens)
        table_slice = None
        if mode == "external":
            table_slice = table.sequence_slice(offset, t_len)
        logits, probs, sels, alphas, _ = model.forward_sequence(
            tokens, mode=mode, table_slice=table_slice, timings=timings
        )
        all_logits.append(logits)
        sel_rows.append(np.stack(sels))          # (L, T, k)
        alpha_rows.append(np.stack(alphas))
        if mode == "router":
            prob_rows.append(np.stack(probs))
        offset += t_len
    selected = np.concatenate(sel_rows, axis=1)
    alphas = np.concatenate(alpha_rows, axis=1)
    probs = np.concatenate(prob_rows, axis=1) if prob_rows else None
    trace = ActivationTrace(
        lengths=batch.lengths, selected=selected, alphas=alphas, probs=probs
    )
    return np.stack(all_logits), trace


def sequence_sparsity(trace: ActivationTrace, num_experts: int) -> np.ndarray:
    """Per-layer ratio of idle experts: 1 - |distinct activated| / K."""
    ratios = np.empty(trace.num_layers)
    for layer in range(trace.num_layers):
        distinct = np.unique(trace.selected[layer]).size
        ratios[layer] = 1.0 - distinct / num_experts
    return ratios


def balance_loss_value(probs: np.ndarray, selected: np.ndarray, num_experts: int) -> float:
    """Load-balance auxiliary loss K * sum_i f_i * P_i for one layer's tokens."""
    n_tok, k = selected.shape
    counts = np.bincount(selected.ravel(), minlength=num_experts).astype(np.float64)
    frac = counts / (n_tok * k)
    mean_probs = probs.mean(axis=0)
    return float(num_experts * np.sum(frac * mean_probs))


def train_toy_moe(
    config: MoEConfig,
    corpus,
    epochs: int = 4,
    lr: float = 3e-3,
    balance_coeff: float = 0.01,
    seed: int = 0,
    batch_size: int = 16,
    weight_decay: float = 0.01,
) -> tuple[MoEModel, dict]:
    """Train on a labeled corpus with CE plus the load-balance auxiliary loss.

    ``corpus`` is a sequence of (tokens, label) pairs. Returns the model and
    a history dict with per-step loss decomposition and final train accuracy.
    """
    rng = Rng(seed)
    init_rng, order_rng = rng.split(2)
    model = MoEModel(config, init_rng)
    opt = AdamW(model.params, lr=lr, weight_decay=weight_decay)
    items = list(corpus)
    if not items:
        raise ContractError("corpus is empty")
    history = {"loss": [], "ce": [], "balance": [], "seed": seed}
    step = 0
    for _epoch in range(epochs):
        order = order_rng.permutation(len(items))
        for start in range(0, len(items), batch_size):
            batch_items = [items[i] for i in order[start : start + batch_size]]
            loss, ce, bal = _train_step(model, opt, batch_items, balance_coeff)
            if not np.isfinite(loss):
                raise TrainingDiverged("MoE training loss is not finite", seed, step)
            history["loss"].append(loss)
            history["ce"].append(ce)
            history["balance"].append(bal)
            step += 1
    correct = 0
    for tokens, label in items:
        logits, _, _, _, _ = model.forward_sequence(tokens)
        correct += int(np.argmax(logits) == label)
    history["final_train_accuracy"] = correct / len(items)
    return model, history


def _train_step(model: MoEModel, opt: AdamW, batch_items, balance_coeff: float):
    c = model.config
    grads = model.zero_grads()
    n_seq = len(batch_items)
    ce_total = 0.0
    fwd = []
    layer_probs_all: list[list[np.ndarray]] = [[] for _ in range(c.num_layers)]
    layer_sel_all: list[list[np.ndarray]] = [[] for _ in range(c.num_layers)]
    for tokens, label in batch_items:
        logits, probs, sels, _, caches = model.forward_sequence(
            tokens, collect_cache=True
        )
        sm = softmax(logits)
        ce_total += -np.log(max(sm[label], 1e-300))
        fwd.append((logits, label, caches, sm))
        for layer in range(c.num_layers):
            layer_probs_all[layer].append(probs[layer])
            layer_sel_all[layer].append(sels[layer])

    balance_total = 0.0
    dprob_layer = []
    n_tok_total = sum(len(t) for t, _ in batch_items)
    for layer in range(c.num_layers):
        probs_cat = np.concatenate(layer_probs_all[layer], axis=0)
        sel_cat = np.concatenate(layer_sel_all[layer], axis=0)
        balance_total += balance_loss_value(probs_cat, sel_cat, c.num_experts)
        counts = np.bincount(sel_cat.ravel(), minlength=c.num_experts).astype(np.float64)
        frac = counts / (sel_cat.shape[0] * sel_cat.shape[1])
        # d(balance)/dP[t, i] = K * f_i / n_tokens, averaged over layers
        dprob_layer.append(
            balance_coeff * c.num_experts * frac / (n_tok_total * c.num_layers)
        )
    balance_mean = balance_total / c.num_layers
    ce_mean = ce_total / n_seq
    loss = ce_mean + balance_coeff * balance_mean

    offset = 0
    for tokens_label, record in zip(batch_items, fwd):
        tokens, label = tokens_label
        _, _, caches, sm = record
        dlogits = sm.copy()
        dlogits[label] -= 1.0
        dlogits /= n_seq
        t_len = len(tokens)
        dprob_extra = [
            np.tile(dprob_layer[layer], (t_len, 1)) for layer in range(c.num_layers)
        ]
        model.backward_sequence(caches, dlogits, grads, dprob_extra)
        offset += t_len
    opt.step(grads)
    return float(loss), float(ce_mean), float(balance_mean)


def selection_overhead_probe(
    model: MoEModel, batch: SequenceBatch, repetitions: int = 10
) -> tuple[float, float]:
    """Mean (total inference seconds, routing+selection seconds) per pass.

    Wall-clock decomposition with a monotone clock; the selection segment
    covers router score computation, softmax, and top-k per layer.
    """
    totals, selections = [], []
    for _ in range(repetitions):
        timings: dict = {}
        t0 = time.perf_counter()
        for tokens in batch.sequences:
            model.forward_sequence(tokens, mode="router", timings=timings)
        totals.append(time.perf_counter() - t0)
        selections.append(timings.get("selection", 0.0))
    return float(np.mean(totals)), float(np.mean(selections))


# -- checkpointing --------------------------------------------------------------


def save_moe(model: MoEModel, path) -> None:
    checkpoint.save_container(
        path, checkpoint.MOE_MAGIC, asdict(model.config), model.params
    )


def load_moe(path) -> MoEModel:
    cfg, tensors = checkpoint.load_container(path, checkpoint.MOE_MAGIC)
    model = MoEModel(MoEConfig(**cfg))
    if set(tensors) != set(model.params):
        raise ContractError("checkpoint parameter names do not match config")
    for name, arr in tensors.items():
        if arr.shape != model.params[name].shape:
            raise ContractError(f"checkpoint tensor {name} has wrong shape")
        model.params[name] = arr
    return model
