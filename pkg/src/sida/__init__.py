"""SiDA at desk scale: predicted expert activations driving budgeted MoE serving."""

from .errors import ContractError, CoverageError, TrainingDiverged, UnservableError
from .numkit import Rng, grad_check, softmax, sparsemax, topk
from .moe import (
    ActivationTrace,
    MoEConfig,
    MoEModel,
    SequenceBatch,
    model_forward,
    moe_layer_forward,
    router_scores,
    selection_overhead_probe,
    sequence_sparsity,
    train_toy_moe,
)
from .predictor import (
    ExpertHashTable,
    OracleHasher,
    PredictorConfig,
    PredictorHasher,
    PredictorNet,
    build_hash_table,
    hash_hit_rate,
    predictor_loss,
    tkd_loss,
    train_predictor,
)
from .offload import (
    MemoryBudget,
    PlacementPlan,
    ResidencyState,
    apply_plan,
    effective_utilization,
    memory_reduction,
    plan_placement,
)
from .pipeline import HashTableQueue, ServingReport, fidelity, serve_sida, serve_standard
from .corpus import Corpus, CorpusSpec, generate_corpus
from .sparsity import (
    CriticalSetModel,
    SparsityProbe,
    corrupt_positions,
    corrupt_tokens,
    estimate_c,
    expected_change_prob,
    measure_p_hat,
)

__version__ = "0.1.0"
