"""Dual-band (sub-6 GHz to mmWave) channel extrapolation with a sparse
mixture-of-experts transformer, built on a small numpy autodiff engine."""

from .channel import (BandConfig, DualBandSample, SystemConfig, apply_awgn, freq_to_time,
                      generate_dataset, generate_sample, read_dataset, time_to_freq,
                      write_dataset)
from .config import RunConfig
from .evaluation import EvalReport, evaluate, flops_per_sample
from .model import MdfceModel, ModelConfig, load_checkpoint, mdfce_forward, save_checkpoint
from .pilots import LSBaseline, PilotConfig, pilot_overhead
from .training import TrainConfig, nmse_db, nmse_loss, train

__version__ = "0.1.0"

__all__ = [
    "BandConfig", "DualBandSample", "SystemConfig", "apply_awgn", "freq_to_time",
    "generate_dataset", "generate_sample", "read_dataset", "time_to_freq", "write_dataset",
    "RunConfig", "EvalReport", "evaluate", "flops_per_sample", "MdfceModel", "ModelConfig",
    "load_checkpoint", "mdfce_forward", "save_checkpoint", "LSBaseline", "PilotConfig",
    "pilot_overhead", "TrainConfig", "nmse_db", "nmse_loss", "train",
]
