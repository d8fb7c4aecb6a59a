"""Streaming token-cache engine and benchmark simulator.

Core pieces: an interleaved FIFO cache mixing visual and text tokens, an
incremental attention engine with exact flop accounting, an online
verbalizer with a dedup window, a cross-attention connector with box-query
losses, and a synthetic-stream harness comparing caching strategies.
"""

__version__ = "0.1.0"

from .attention import (AttentionEngine, AttentionWeights, append_flop_cost,
                        full_recompute, init_weights, lm_logits,
                        recompute_flop_cost)
from .cache import CacheEvent, CacheStructureError, InterleavedCache
from .config import ConfigError, SimConfig, config_from_dict, load_config, validate_config
from .connector import (BOS_ID, CaptionDecoder, ConnectorOutput, ConnectorWeights,
                        PatchGrid, QuerySet, Scene, TrainingDivergence, TrainResult,
                        connector_forward, connector_weights, giou, giou_batch,
                        grad_check, hungarian_match, init_caption_decoder,
                        init_connector, load_scene, loss_ho, loss_lm, loss_total,
                        make_scene, query_set, save_scene, stage1_losses,
                        stage1_value_and_grads, train_toy)
from .harness import (GrowthFit, OraclePredictor, StrategyAbort, StrategyKind,
                      StrategyTrace, SyntheticStream, fit_growth, generate_stream,
                      oracle_predict, run_strategy, spike_ratio, temporal_variance)
from .types import BBox, PositionClock, StepRecord, Token, TokenFactory, TokenKind
from .verbalize import (EmbeddingTable, PredictionLog, TokenBudgetReport, Verbalizer,
                        budget_report, group_consecutive, should_verbalize,
                        step_text_vocab_ids)
