"""Weakly-supervised multisensory temporal event localization in long videos."""

from .datamodel import EventAnnotation, SplitData, VideoSample, load_split
from .evaluation import MetricsReport, compute_metrics, evaluate
from .model import EventCentricModel, ModelConfig
from .pmt import PMTConfig
from .synthgen import GeneratorConfig, generate_dataset
from .training import TrainConfig, train

__version__ = "0.1.0"
