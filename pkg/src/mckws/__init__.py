"""Multi-channel keyword spotting toolkit.

Soft channel attention over a microphone array, a GRU encoder with
per-frame keyword posteriors, spectral-mapping auxiliary tasks, transfer
fine-tuning, synthetic corpus generation with SNR-exact mixing, and
FA-per-hour / wake-up-rate evaluation.
"""

from .autodiff import GradTape, Tensor, backward
from .datagen import (
    ArrayGeometry,
    CorpusSpec,
    MixSpec,
    UtteranceRecord,
    build_corpus,
    delay_and_sum,
    make_multitarget,
    mix_at_snr,
    synth_filler,
    synth_keyword,
)
from .decode import RocCurve, SmoothingConfig, detect, evaluate, roc_sweep, smooth
from .errors import ConfigError, DataError, DivergenceError
from .features import FeatureTensor, FrameConfig, PcenParams, frame_and_filterbank, pcen
from .losses import LossWeights, combine_multi, combine_single, kws_loss, map_loss
from .model import ModelConfig, ModelParams, attend, forward_utterance, gru_step
from .training import Checkpoint, TrainConfig, adam_step, load_checkpoint, \
    save_checkpoint, train, transfer_init

__version__ = "0.1.0"

__all__ = [
    "ArrayGeometry", "Checkpoint", "ConfigError", "CorpusSpec", "DataError",
    "DivergenceError", "FeatureTensor", "FrameConfig", "GradTape",
    "LossWeights", "MixSpec", "ModelConfig", "ModelParams", "PcenParams",
    "RocCurve", "SmoothingConfig", "Tensor", "TrainConfig", "UtteranceRecord",
    "adam_step", "attend", "backward", "build_corpus", "combine_multi",
    "combine_single", "delay_and_sum", "detect", "evaluate",
    "forward_utterance", "frame_and_filterbank", "gru_step", "kws_loss",
    "load_checkpoint", "make_multitarget", "map_loss", "mix_at_snr", "pcen",
    "roc_sweep", "save_checkpoint", "smooth", "synth_filler", "synth_keyword",
    "train", "transfer_init",
]
