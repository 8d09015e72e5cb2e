"""probekv: a desk-scale decoder-only transformer with pluggable KV-cache
eviction policies and trainable attention-probe tokens."""

__version__ = "0.1.0"

from .config import ModelConfig, toy_config
from .engine import (
    AttentionRecord,
    KVCache,
    PrefillResult,
    decode_step,
    greedy_generate,
    prefill,
)
from .eviction import (
    BudgetSchedule,
    EvictionPlan,
    ImportanceScores,
    allocate_pyramid,
    compact_cache,
    full_plan,
    hit_rate,
    plan_streaming,
    score_h2o,
    score_response,
    score_snapkv,
    score_soft,
    select_topk,
    uniform_schedule,
)
from .model import Weights, checksum_base, init_model, reset_soft_bank
from .sequences import TokenSequence, prompt_sequence, with_response, with_soft_block
from .tokenizer import BOS_ID, EOS_ID, byte_detokenize, byte_tokenize
from .trainer import (
    OptimizerState,
    TrainConfig,
    TrainingSample,
    adam_step,
    attention_maps_pair,
    backward_soft,
    loss_mse,
    make_dataset,
    train,
)
