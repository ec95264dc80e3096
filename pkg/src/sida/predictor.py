"""Offline-trained expert-activation predictor (the serving-time hash function).

Architecture: one fully connected layer compresses the input embeddings,
a 2-layer LSTM runs over the compressed sequence, a dot-product attention
layer with sparsemax weights pools the LSTM outputs, a residual connection
adds the LSTM output back right before per-MoE-layer linear heads that emit
logits over the K experts.

Training minimizes lambda * CE(student, teacher argmax) + TKD(T), where TKD
is the KL divergence between the teacher's and student's distributions, each
restricted to the teacher's top-T experts and renormalized.

The predictor consumes only the model's input embeddings (token + position),
never any internal model state, so hash tables can be built concurrently
with inference on other batches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import checkpoint
from .errors import ContractError, CoverageError, TrainingDiverged
from .moe import ActivationTrace, MoEModel, SequenceBatch, model_forward
from .numkit import (
    Rng,
    check_finite,
    sigmoid,
    softmax,
    softmax_backward,
    sparsemax,
    sparsemax_backward,
    topk_rows,
)
from .optim import AdamW


@dataclass
class PredictorConfig:
    compress_dim: int = 24
    lstm_hidden: int = 48
    lstm_layers: int = 2
    top_t: int = 30
    lambda_ce: float = 0.005
    lr: float = 5e-5
    batch_size: int = 64
    max_steps: int = 2000

    def __post_init__(self):
        if self.lstm_layers != 2:
            raise ContractError("the predictor trunk is fixed at 2 LSTM layers")
        if self.top_t < 1:
            raise ContractError("top_t must be >= 1")
        if self.lambda_ce < 0:
            raise ContractError("lambda_ce must be >= 0")


@dataclass
class ExpertHashTable:
    """Predicted (expert id, alpha) lists per (layer, token) for one batch.

    Tokens are indexed globally: the batch's sequences concatenated in order.
    Entries are sorted by alpha descending with index tie-break, ids are
    distinct within an entry, and alphas are the predictor's softmax values
    at those ids.
    """

    batch_id: int
    lengths: list[int]
    ids: np.ndarray       # (num_layers, total_tokens, eval_top_k) int64
    alphas: np.ndarray    # (num_layers, total_tokens, eval_top_k) float64

    @property
    def num_layers(self) -> int:
        return self.ids.shape[0]

    @property
    def eval_top_k(self) -> int:
        return self.ids.shape[2]

    def sequence_slice(self, offset: int, t_len: int):
        if offset + t_len > self.ids.shape[1]:
            raise ContractError("hash table does not cover the requested tokens")
        return self.ids[:, offset : offset + t_len], self.alphas[:, offset : offset + t_len]

    def required_experts(self) -> set[tuple[int, int]]:
        out: set[tuple[int, int]] = set()
        for layer in range(self.num_layers):
            for e in np.unique(self.ids[layer]):
                out.add((layer, int(e)))
        return out

    def required_by_layer(self) -> list[set[int]]:
        return [
            {int(e) for e in np.unique(self.ids[layer])}
            for layer in range(self.num_layers)
        ]

    def to_json(self) -> str:
        entries = []
        for layer in range(self.num_layers):
            for tok in range(self.ids.shape[1]):
                pairs = [
                    [int(e), float(a)]
                    for e, a in zip(self.ids[layer, tok], self.alphas[layer, tok])
                ]
                entries.append([layer, tok, pairs])
        return json.dumps({"batch_id": self.batch_id, "lengths": self.lengths,
                           "entries": entries})

    @classmethod
    def from_json(cls, text: str) -> "ExpertHashTable":
        obj = json.loads(text)
        lengths = [int(x) for x in obj["lengths"]]
        total = sum(lengths)
        layers = 1 + max(e[0] for e in obj["entries"])
        k = len(obj["entries"][0][2])
        ids = np.zeros((layers, total, k), dtype=np.int64)
        alphas = np.zeros((layers, total, k))
        for layer, tok, pairs in obj["entries"]:
            ids[layer, tok] = [p[0] for p in pairs]
            alphas[layer, tok] = [p[1] for p in pairs]
        return cls(batch_id=int(obj["batch_id"]), lengths=lengths, ids=ids, alphas=alphas)


class PredictorNet:
    """Compress FC -> 2-layer LSTM -> sparsemax attention -> residual -> heads."""

    def __init__(
        self,
        config: PredictorConfig,
        d_model: int,
        num_moe_layers: int,
        num_experts: int,
        rng: Rng | None = None,
    ):
        self.config = config
        self.d_model = d_model
        self.num_moe_layers = num_moe_layers
        self.num_experts = num_experts
        rng = rng if rng is not None else Rng(0)
        cd, hid = config.compress_dim, config.lstm_hidden

        def xavier(n_in, n_out, shape):
            return rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), shape)

        p: dict[str, np.ndarray] = {}
        p["compress_w"] = xavier(d_model, cd, (d_model, cd))
        p["compress_b"] = np.zeros(cd)
        for i, n_in in ((1, cd), (2, hid)):
            scale = 1.0 / np.sqrt(hid)
            p[f"lstm{i}_wx"] = rng.uniform(-scale, scale, (n_in, 4 * hid))
            p[f"lstm{i}_wh"] = rng.uniform(-scale, scale, (hid, 4 * hid))
            b = np.zeros(4 * hid)
            b[hid : 2 * hid] = 1.0  # forget-gate bias
            p[f"lstm{i}_b"] = b
        for name in ("attn_wq", "attn_wk", "attn_wv"):
            p[name] = xavier(hid, hid, (hid, hid))
        p["head_w"] = xavier(hid, num_experts, (num_moe_layers, hid, num_experts))
        p["head_b"] = np.zeros((num_moe_layers, num_experts))
        self.params = p

    def param_bytes(self) -> int:
        return sum(v.size for v in self.params.values()) * 8

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- forward ----------------------------------------------------------------

    def _lstm_forward(self, idx: int, x: np.ndarray):
        """x: (B, T, n_in) -> outputs (B, T, H) plus per-step cache."""
        p = self.params
        wx, wh, b = p[f"lstm{idx}_wx"], p[f"lstm{idx}_wh"], p[f"lstm{idx}_b"]
        bsz, t_len, _ = x.shape
        hid = wh.shape[0]
        h = np.zeros((bsz, hid))
        c = np.zeros((bsz, hid))
        outs = np.empty((bsz, t_len, hid))
        steps = []
        for t in range(t_len):
            gates = x[:, t] @ wx + h @ wh + b
            i = sigmoid(gates[:, :hid])
            f = sigmoid(gates[:, hid : 2 * hid])
            g = np.tanh(gates[:, 2 * hid : 3 * hid])
            o = sigmoid(gates[:, 3 * hid :])
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            tanh_c = np.tanh(c)
            h = o * tanh_c
            outs[:, t] = h
            steps.append((i, f, g, o, c_prev, h_prev, tanh_c))
        return outs, steps

    def _lstm_backward(self, idx: int, x: np.ndarray, steps, d_out: np.ndarray, grads):
        p = self.params
        wx, wh = p[f"lstm{idx}_wx"], p[f"lstm{idx}_wh"]
        bsz, t_len, _ = x.shape
        hid = wh.shape[0]
        dh_next = np.zeros((bsz, hid))
        dc_next = np.zeros((bsz, hid))
        dx = np.zeros_like(x)
        g_wx = grads[f"lstm{idx}_wx"]
        g_wh = grads[f"lstm{idx}_wh"]
        g_b = grads[f"lstm{idx}_b"]
        for t in range(t_len - 1, -1, -1):
            i, f, g, o, c_prev, h_prev, tanh_c = steps[t]
            dh = d_out[:, t] + dh_next
            do = dh * tanh_c
            dc = dc_next + dh * o * (1.0 - tanh_c**2)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dc_next = dc * f
            dpre = np.concatenate(
                [
                    di * i * (1.0 - i),
                    df * f * (1.0 - f),
                    dg * (1.0 - g**2),
                    do * o * (1.0 - o),
                ],
                axis=1,
            )
            dx[:, t] = dpre @ wx.T
            dh_next = dpre @ wh.T
            g_wx += x[:, t].T @ dpre
            g_wh += h_prev.T @ dpre
            g_b += dpre.sum(axis=0)
        return dx

    def forward(self, embeddings: np.ndarray, cache: dict | None = None) -> np.ndarray:
        """Embeddings (T, d) or (B, T, d) -> logits (layers, [B,] T, K)."""
        emb = check_finite(embeddings, "predictor input")
        squeeze = emb.ndim == 2
        if squeeze:
            emb = emb[None]
        if emb.shape[1] < 1:
            raise ContractError("empty sequence")
        p = self.params
        compressed = emb @ p["compress_w"] + p["compress_b"]
        h1, steps1 = self._lstm_forward(1, compressed)
        h2, steps2 = self._lstm_forward(2, h1)
        q = h2 @ p["attn_wq"]
        k = h2 @ p["attn_wk"]
        v = h2 @ p["attn_wv"]
        scores = np.einsum("bth,bsh->bts", q, k)
        weights = sparsemax(scores)
        ctx = np.einsum("bts,bsh->bth", weights, v)
        resid = ctx + h2
        logits = np.einsum("bth,lhk->lbtk", resid, p["head_w"]) + p["head_b"][:, None, None, :]
        if cache is not None:
            cache.update(
                emb=emb, compressed=compressed, h1=h1, steps1=steps1, h2=h2,
                steps2=steps2, q=q, k=k, v=v, weights=weights, ctx=ctx, resid=resid,
            )
        return logits[:, 0] if squeeze else logits

    def backward(self, cache: dict, dlogits: np.ndarray, grads: dict) -> None:
        """Accumulate parameter gradients; dlogits is (layers, B, T, K)."""
        p = self.params
        resid, h2 = cache["resid"], cache["h2"]
        grads["head_w"] += np.einsum("bth,lbtk->lhk", resid, dlogits)
        grads["head_b"] += dlogits.sum(axis=(1, 2))
        dresid = np.einsum("lbtk,lhk->bth", dlogits, p["head_w"])
        dctx = dresid
        dh2 = dresid.copy()
        weights, q, k, v = cache["weights"], cache["q"], cache["k"], cache["v"]
        dweights = np.einsum("bth,bsh->bts", dctx, v)
        dv = np.einsum("bts,bth->bsh", weights, dctx)
        dscores = sparsemax_backward(weights, dweights)
        dq = np.einsum("bts,bsh->bth", dscores, k)
        dk = np.einsum("bts,bth->bsh", dscores, q)
        dh2 += dq @ p["attn_wq"].T + dk @ p["attn_wk"].T + dv @ p["attn_wv"].T
        grads["attn_wq"] += np.einsum("bth,btj->hj", h2, dq)
        grads["attn_wk"] += np.einsum("bth,btj->hj", h2, dk)
        grads["attn_wv"] += np.einsum("bth,btj->hj", h2, dv)
        dh1 = self._lstm_backward(2, cache["h1"], cache["steps2"], dh2, grads)
        dcompressed = self._lstm_backward(1, cache["compressed"], cache["steps1"], dh1, grads)
        emb = cache["emb"]
        emb2 = emb.reshape(-1, emb.shape[-1])
        dc2 = dcompressed.reshape(-1, dcompressed.shape[-1])
        grads["compress_w"] += emb2.T @ dc2
        grads["compress_b"] += dc2.sum(axis=0)


# -- losses -----------------------------------------------------------------------


def tkd_loss(student_logits: np.ndarray, teacher_probs: np.ndarray, top_t: int) -> float:
    """Truncated KD loss for one (layer, token) position.

    KL( renormalize(teacher restricted to its top-T) ||
        renormalize(softmax(student) restricted to the same set) ).
    """
    student_logits = check_finite(student_logits, "student logits")
    teacher_probs = check_finite(teacher_probs, "teacher probs")
    if top_t > teacher_probs.shape[-1]:
        raise ContractError("top_t exceeds number of experts")
    value, _ = _tkd_batch(student_logits[None], teacher_probs[None], top_t)
    return float(value[0])


def _tkd_batch(student_logits: np.ndarray, teacher_probs: np.ndarray, top_t: int):
    """Vectorized TKD over rows. Returns (per-row loss, per-row dlogits)."""
    sel = topk_rows(teacher_probs, top_t)
    p_sel = np.take_along_axis(teacher_probs, sel, axis=-1)
    p_mass = p_sel.sum(axis=-1, keepdims=True)
    if np.any(p_mass <= 0.0):
        raise ContractError("degenerate renormalization: teacher mass on top-T is zero")
    p_tilde = p_sel / p_mass
    s = softmax(student_logits)
    s_sel = np.take_along_axis(s, sel, axis=-1)
    s_mass = s_sel.sum(axis=-1, keepdims=True)
    if np.any(s_mass <= 0.0):
        raise ContractError("degenerate renormalization: student mass on top-T is zero")
    q_tilde = s_sel / s_mass
    log_ratio = np.where(p_tilde > 0.0, np.log(np.maximum(p_tilde, 1e-300)) - np.log(q_tilde), 0.0)
    loss = np.sum(p_tilde * log_ratio, axis=-1)
    dlogits = np.zeros_like(student_logits)
    np.put_along_axis(dlogits, sel, q_tilde - p_tilde, axis=-1)
    return loss, dlogits


def predictor_loss(
    student_logits: np.ndarray,
    teacher_probs: np.ndarray,
    lambda_ce: float,
    top_t: int,
) -> tuple[float, dict]:
    """lambda * mean CE(student, teacher argmax) + mean TKD over (layer, token) pairs.

    ``student_logits`` and ``teacher_probs`` have matching shape (..., K);
    every leading position is one (layer, token) pair. Returns the loss and a
    decomposition {"ce": ..., "tkd": ...}.
    """
    loss, parts, _ = _predictor_loss_grad(student_logits, teacher_probs, lambda_ce, top_t)
    return loss, parts


def _predictor_loss_grad(student_logits, teacher_probs, lambda_ce, top_t):
    if student_logits.shape != teacher_probs.shape:
        raise CoverageError("student and teacher grids differ")
    k = student_logits.shape[-1]
    flat_s = student_logits.reshape(-1, k)
    flat_t = teacher_probs.reshape(-1, k)
    n = flat_s.shape[0]
    tkd_vals, tkd_grads = _tkd_batch(flat_s, flat_t, top_t)
    targets = topk_rows(flat_t, 1)[:, 0]
    s = softmax(flat_s)
    picked = s[np.arange(n), targets]
    ce_vals = -np.log(np.maximum(picked, 1e-300))
    ce_grads = s
    ce_grads[np.arange(n), targets] -= 1.0
    ce_mean = float(ce_vals.mean())
    tkd_mean = float(tkd_vals.mean())
    loss = lambda_ce * ce_mean + tkd_mean
    dflat = (lambda_ce * ce_grads + tkd_grads) / n
    return loss, {"ce": ce_mean, "tkd": tkd_mean}, dflat.reshape(student_logits.shape)


# -- trace utilities ----------------------------------------------------------------


def teacher_probs_for_sequence(model: MoEModel, tokens: np.ndarray) -> np.ndarray:
    """Router probabilities for every (layer, token) of one sequence: (L, T, K)."""
    _, probs, _, _, _ = model.forward_sequence(tokens, mode="router")
    return np.stack(probs)


def build_hash_table(
    predictor: PredictorNet,
    batch: SequenceBatch,
    eval_top_k: int,
    embed_fn,
) -> ExpertHashTable:
    """Predict top-k expert ids and scaling factors per (layer, token).

    ``embed_fn`` maps a token-id sequence to input embeddings, typically
    ``model.embed``. Alphas are the raw softmax probabilities at the selected
    ids (not renormalized over the selected set).
    """
    if eval_top_k < 1:
        raise ContractError("eval_top_k must be >= 1")
    ids_rows, alpha_rows = [], []
    for tokens in batch.sequences:
        logits = predictor.forward(embed_fn(tokens))       # (L, T, K)
        probs = softmax(logits)
        sel = topk_rows(probs, eval_top_k)
        ids_rows.append(sel)
        alpha_rows.append(np.take_along_axis(probs, sel, axis=-1))
    return ExpertHashTable(
        batch_id=batch.batch_id,
        lengths=batch.lengths,
        ids=np.concatenate(ids_rows, axis=1),
        alphas=np.concatenate(alpha_rows, axis=1),
    )


class PredictorHasher:
    """Binds a trained predictor to an embedding source for the hash worker."""

    def __init__(self, predictor: PredictorNet, embed_fn):
        self.predictor = predictor
        self.embed_fn = embed_fn

    def build_table(self, batch: SequenceBatch, eval_top_k: int) -> ExpertHashTable:
        return build_hash_table(self.predictor, batch, eval_top_k, self.embed_fn)


class OracleHasher:
    """Teacher router used as the hash function (upper-bounds hit rate/fidelity)."""

    def __init__(self, model: MoEModel):
        self.model = model

    def build_table(self, batch: SequenceBatch, eval_top_k: int) -> ExpertHashTable:
        _, trace = model_forward(self.model, batch, mode="router")
        sel = topk_rows(trace.probs.reshape(-1, trace.probs.shape[-1]), eval_top_k)
        sel = sel.reshape(trace.probs.shape[0], trace.probs.shape[1], eval_top_k)
        alphas = np.take_along_axis(trace.probs, sel, axis=-1)
        return ExpertHashTable(
            batch_id=batch.batch_id, lengths=batch.lengths, ids=sel, alphas=alphas
        )


def hash_hit_rate(tables: list[ExpertHashTable], traces: list[ActivationTrace], k: int) -> float:
    """Fraction of (layer, token) whose teacher top-1 expert is in the predicted top-k."""
    if len(tables) != len(traces):
        raise CoverageError("table/trace counts differ")
    if k < 1:
        raise ContractError("k must be >= 1")
    hits = 0
    total = 0
    for table, trace in zip(tables, traces):
        if table.lengths != list(trace.lengths):
            raise CoverageError("table and trace cover different sequences")
        if table.num_layers != trace.num_layers:
            raise CoverageError("table and trace cover different layer counts")
        if k > table.eval_top_k:
            raise CoverageError(f"k={k} exceeds table width {table.eval_top_k}")
        top1 = trace.selected[:, :, 0]
        hits += int(np.sum(np.any(table.ids[:, :, :k] == top1[:, :, None], axis=-1)))
        total += top1.size
    if total == 0:
        raise CoverageError("empty coverage")
    return hits / total


# -- training ------------------------------------------------------------------------


def train_predictor(
    config: PredictorConfig,
    corpus,
    teacher: MoEModel,
    seed: int = 0,
    holdout_frac: float = 0.1,
) -> tuple[PredictorNet, dict]:
    """Train the predictor against teacher traces with AdamW.

    ``corpus`` is a sequence of (tokens, label) pairs; labels are unused.
    Returns the net and a report with the loss curve, held-out top-1/top-3
    hit rates, and the hyperparameters actually used.
    """
    tc = teacher.config
    top_t = min(config.top_t, tc.num_experts)
    rng = Rng(seed)
    init_rng, split_rng, batch_rng = rng.split(3)
    net = PredictorNet(config, tc.d_model, tc.num_layers, tc.num_experts, init_rng)
    opt = AdamW(net.params, lr=config.lr)

    sequences = [np.asarray(tokens, dtype=np.int64) for tokens, _ in corpus]
    if not sequences:
        raise ContractError("corpus is empty")
    embeddings = [teacher.embed(toks) for toks in sequences]
    teacher_probs = [teacher_probs_for_sequence(teacher, toks) for toks in sequences]

    order = split_rng.permutation(len(sequences))
    n_hold = max(1, int(round(holdout_frac * len(sequences))))
    hold_idx = order[:n_hold]
    train_idx = order[n_hold:]
    if train_idx.size == 0:
        raise ContractError("holdout fraction leaves no training data")

    buckets: dict[int, list[int]] = {}
    for i in train_idx:
        buckets.setdefault(len(sequences[i]), []).append(int(i))
    bucket_lens = sorted(buckets)
    bucket_weights = np.array([len(buckets[t]) for t in bucket_lens], dtype=np.float64)
    bucket_weights /= bucket_weights.sum()

    loss_curve = []
    for step in range(config.max_steps):
        t_len = bucket_lens[int(batch_rng.choice(len(bucket_lens), p=bucket_weights))]
        pool = buckets[t_len]
        pick = batch_rng.integers(0, len(pool), size=min(config.batch_size, len(pool)))
        idxs = [pool[j] for j in pick]
        emb = np.stack([embeddings[i] for i in idxs])                 # (B, T, d)
        tprobs = np.stack([teacher_probs[i] for i in idxs], axis=1)   # (L, B, T, K)
        cache: dict = {}
        logits = net.forward(emb, cache)                              # (L, B, T, K)
        loss, _parts, dlogits = _predictor_loss_grad(
            logits, tprobs, config.lambda_ce, top_t
        )
        if not np.isfinite(loss):
            raise TrainingDiverged("predictor loss is not finite", seed, step)
        grads = net.zero_grads()
        net.backward(cache, dlogits, grads)
        opt.step(grads)
        loss_curve.append(float(loss))

    hit1, hit3 = _holdout_hit_rates(net, [sequences[i] for i in hold_idx],
                                    [embeddings[i] for i in hold_idx],
                                    [teacher_probs[i] for i in hold_idx])
    report = {
        "loss_curve": loss_curve,
        "hit_rate_top1": hit1,
        "hit_rate_top3": hit3,
        "lambda_ce": config.lambda_ce,
        "top_t": top_t,
        "lr": config.lr,
        "batch_size": config.batch_size,
        "max_steps": config.max_steps,
        "seed": seed,
        "holdout_size": int(n_hold),
    }
    return net, report


def _holdout_hit_rates(net: PredictorNet, sequences, embeddings, teacher_probs):
    hits1 = hits3 = total = 0
    for emb, tprobs in zip(embeddings, teacher_probs):
        logits = net.forward(emb)                       # (L, T, K)
        k_top = min(3, logits.shape[-1])
        flat = logits.reshape(-1, logits.shape[-1])
        pred = topk_rows(flat, k_top)
        truth = topk_rows(tprobs.reshape(-1, tprobs.shape[-1]), 1)[:, 0]
        hits1 += int(np.sum(pred[:, 0] == truth))
        hits3 += int(np.sum(np.any(pred == truth[:, None], axis=1)))
        total += truth.size
    return hits1 / total, hits3 / total


# -- checkpointing --------------------------------------------------------------------


def save_predictor(net: PredictorNet, path) -> None:
    cfg = asdict(net.config)
    cfg.update(
        d_model=net.d_model,
        num_moe_layers=net.num_moe_layers,
        num_experts=net.num_experts,
    )
    checkpoint.save_container(path, checkpoint.PREDICTOR_MAGIC, cfg, net.params)


def load_predictor(path) -> PredictorNet:
    cfg, tensors = checkpoint.load_container(path, checkpoint.PREDICTOR_MAGIC)
    d_model = cfg.pop("d_model")
    num_moe_layers = cfg.pop("num_moe_layers")
    num_experts = cfg.pop("num_experts")
    net = PredictorNet(PredictorConfig(**cfg), d_model, num_moe_layers, num_experts)
    if set(tensors) != set(net.params):
        raise ContractError("checkpoint parameter names do not match config")
    for name, arr in tensors.items():
        if arr.shape != net.params[name].shape:
            raise ContractError(f"checkpoint tensor {name} has wrong shape")
        net.params[name] = arr
    return net
