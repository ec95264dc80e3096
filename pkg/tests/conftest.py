import numpy as np
import pytest

from sida.corpus import CorpusSpec, generate_corpus
from sida.moe import MoEConfig, MoEModel, train_toy_moe
from sida.numkit import Rng
from sida.predictor import PredictorConfig, train_predictor


@pytest.fixture(scope="session")
def small_planted_run():
    """Small planted-corpus training run shared by moe/pipeline tests."""
    spec = CorpusSpec(
        vocab_size=64, num_sequences=400, min_len=6, max_len=10,
        num_classes=3, beta=0.95, seed=42,
    )
    corpus = generate_corpus(spec)
    cfg = MoEConfig(
        vocab_size=64, d_model=32, num_layers=2, num_experts=8,
        expert_hidden=32, max_seq_len=16, routing_k=1, num_classes=3,
    )
    model, history = train_toy_moe(
        cfg, corpus.items(), epochs=10, lr=5e-3, balance_coeff=0.01,
        seed=3, batch_size=16,
    )
    return model, history, corpus


@pytest.fixture(scope="session")
def separable_teacher():
    """K=2 teacher whose routing is a pure function of the token id: position
    embeddings are zeroed and the attention output map is zero, so block
    inputs never mix across tokens."""
    cfg = MoEConfig(
        vocab_size=16, d_model=16, num_layers=2, num_experts=2,
        expert_hidden=8, max_seq_len=8, routing_k=1, num_classes=2,
    )
    teacher = MoEModel(cfg, Rng(11))
    teacher.params["pos_emb"][:] = 0.0
    for layer in range(cfg.num_layers):
        teacher.params[f"block{layer}.wo"][:] = 0.0
    rng = Rng(5)
    corpus = []
    for _ in range(300):
        t_len = int(rng.integers(4, 9))
        corpus.append((rng.integers(0, 16, size=t_len), 0))
    return teacher, corpus


@pytest.fixture(scope="session")
def separable_predictor(separable_teacher):
    teacher, corpus = separable_teacher
    pcfg = PredictorConfig(
        compress_dim=8, lstm_hidden=16, top_t=2, lambda_ce=0.005,
        lr=3e-3, batch_size=16, max_steps=800,
    )
    net, report = train_predictor(pcfg, corpus, teacher, seed=3)
    return net, report
