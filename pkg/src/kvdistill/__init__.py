"""Tiny decoder-only inference engine with intermediate-layer prompt token
selection, KV-cache truncation and exact attention cost accounting."""

from .cache import CacheSet, LayerKVCache, cache_entry_count, truncate_prefix_layers
from .costs import CostLedger, CostPrediction, audit, predict
from .model import ModelBundle, ModelConfig, init_random, load_bundle, save_bundle
from .pipelines import (
    GenerationResult,
    PipelineConfig,
    compare_runs,
    generate_loop,
    prefill_allkv,
    prefill_promptdistill,
    run_gemfilter,
    run_pipeline,
)
from .selection import SelectionOutcome, SelectionSchedule, select, validate_schedule

__version__ = "0.1.0"
