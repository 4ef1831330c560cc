"""Chunked streaming transducer ASR with attention sinks, on NumPy and Xarray."""

__version__ = "0.1.0"

from . import accessors
from .accessors import create_mask_da
from .config import RunConfig, load_run_config, parse_run_config
from .core import ModelConfig, TransducerModel
from .data import SyntheticTaskConfig, gen_synthetic, load_checkpoint, save_checkpoint
from .evaluation import CostReport, WerReport, cost_report, sweep_table, wer
from .geometry import MaskSpec, allowed, attended_count, build_mask
from .search import (
    DecodeConfig,
    beam_search,
    greedy_decode,
    stream_finalize,
    stream_open,
    stream_push,
    stream_push_frames,
)
from .trainer import TrainConfig, Trainer
from .transducer import Vocab, rnnt_loss

__all__ = [
    "accessors",
    "create_mask_da",
    "RunConfig",
    "load_run_config",
    "parse_run_config",
    "ModelConfig",
    "TransducerModel",
    "SyntheticTaskConfig",
    "gen_synthetic",
    "load_checkpoint",
    "save_checkpoint",
    "CostReport",
    "WerReport",
    "cost_report",
    "sweep_table",
    "wer",
    "MaskSpec",
    "allowed",
    "attended_count",
    "build_mask",
    "DecodeConfig",
    "beam_search",
    "greedy_decode",
    "stream_finalize",
    "stream_open",
    "stream_push",
    "stream_push_frames",
    "TrainConfig",
    "Trainer",
    "Vocab",
    "rnnt_loss",
    ]
