"""Generative-classifier intrusion detection for CAN bus traffic."""

from .can_ingest import CanFrame, ClassLabel, LogFormat, parse_log, read_log
from .features import FeatureConfig, extract, extract_stream
from .gen_classifier import GenClassifier, ModelConfig, Mode, TrainConfig, predict, predict_proba, train

__version__ = "0.1.0"
