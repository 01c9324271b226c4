"""Chunked flow-matching policy with configurable torque integration."""
from .config import (
    AGGREGATORS,
    TORQUE_MODES,
    PolicyConfig,
    TrainConfig,
    format_config,
    load_config,
    parse_config,
)
from .data import ChunkSampler
from .estimator import FlowMatchingPolicy
from .evaluation import EvalResult, ExpertPlanner, closed_loop_eval
from .flow import LossBreakdown, NoisyChunk, flow_loss, integrate, make_noisy, sample_chunks
from .network import FlowNetwork, Perturbation, TorqueAdapter, expand_output_head

__all__ = [
    "AGGREGATORS", "TORQUE_MODES", "PolicyConfig", "TrainConfig", "format_config", "load_config",
    "parse_config", "ChunkSampler", "FlowMatchingPolicy", "EvalResult", "ExpertPlanner",
    "closed_loop_eval", "LossBreakdown", "NoisyChunk", "flow_loss", "integrate", "make_noisy",
    "sample_chunks", "FlowNetwork", "Perturbation", "TorqueAdapter", "expand_output_head",
]
