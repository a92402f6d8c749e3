"""MIMO-GAN - generative MIMO channel models learned from impulse-probing measurements."""

__version__ = "0.1.0"

from mimogan.channel import ChannelRealizationConfig, CorrelationConfig, TdlProfile, sample_channel, sample_channels
from mimogan.dataset import ProbingDataset, ProbingMode, generate_dataset, load_dataset, save_dataset
from mimogan.gan import ArchitectureMode, MimoGan, TrainConfig, train
from mimogan.metrics import compare_channels, pdp_mae, pdp_stats

__all__ = [
    "ArchitectureMode",
    "ChannelRealizationConfig",
    "CorrelationConfig",
    "MimoGan",
    "ProbingDataset",
    "ProbingMode",
    "TdlProfile",
    "TrainConfig",
    "compare_channels",
    "generate_dataset",
    "load_dataset",
    "pdp_mae",
    "pdp_stats",
    "sample_channel",
    "sample_channels",
    "save_dataset",
    "train",
]
