"""Replay, training, evaluation, racing, metrics, export, and the CLI."""
from .buffer import Episode, EpisodeRecorder, ReplayBuffer, prefill, quantize_image
from .config import TrainConfig, load_config, profile
from .metrics import metric_cosine, metric_ssim

__all__ = ["Episode", "EpisodeRecorder", "ReplayBuffer", "TrainConfig", "load_config", "metric_cosine",
           "metric_ssim", "prefill", "profile", "quantize_image"]
