"""blockgrow: a desk-scale lab for growing decoder depth after pretraining.

Expand a trained byte-level decoder with zero-initialized identity blocks,
continue pretraining only those blocks, and measure what that buys over full
fine-tuning, low-rank adapters, and width-style expert expansion.
"""

__version__ = "0.1.0"

from .artifacts import (CheckpointError, ExperimentConfig, load_checkpoint,
                        save_checkpoint)
from .data import (BOS_ID, EOS_ID, VOCAB_SIZE, Corpus, derive_rng, detokenize,
                   load_corpus, mixture_sampler, synthetic_suite, tokenize)
from .evaluation import (CompareReport, ShiftReport, base_rank,
                         compare_strategies, greedy_decode, perplexity,
                         shift_analysis)
from .expansion import (ExpansionPlan, FreezeMask, PlanError,
                        expand_model, make_identity_copy, make_norm_zero_copy,
                        moe_expand, plan_expansion, verify_preservation)
from .model import (BlockWeights, DecoderModel, ModelConfig, init_model)
from .tensor import (Grad, NonFiniteError, ShapeError, Tensor, backward,
                     no_grad)
from .training import (AdamW, LoraModel, StrategySpec, TrainConfig,
                       TrainingDivergedError, attach_lora, clip_gradients,
                       lr_at, matched_lora_rank, prepare_strategy, train)

__all__ = [
    "AdamW", "BOS_ID", "BlockWeights", "CheckpointError", "CompareReport",
    "Corpus", "DecoderModel", "EOS_ID", "ExperimentConfig", "ExpansionPlan",
    "FreezeMask", "Grad", "LoraModel", "ModelConfig", "NonFiniteError",
    "PlanError", "ShapeError", "ShiftReport", "StrategySpec", "Tensor",
    "TrainConfig", "TrainingDivergedError", "VOCAB_SIZE", "attach_lora",
    "backward", "base_rank", "clip_gradients", "compare_strategies",
    "derive_rng", "detokenize", "expand_model", "greedy_decode",
    "init_model", "load_checkpoint", "load_corpus", "lr_at",
    "make_identity_copy", "make_norm_zero_copy", "matched_lora_rank",
    "mixture_sampler", "moe_expand", "no_grad", "perplexity",
    "plan_expansion", "prepare_strategy", "save_checkpoint",
    "shift_analysis", "synthetic_suite", "tokenize", "train",
    "verify_preservation", "__version__",
]
