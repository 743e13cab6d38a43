"""Figure-skating jump air time from tracked 2D skater poses.

Poses are embedded per frame by a graph convolution over the COCO skeleton,
contextualised by a Transformer encoder and tagged O/B/I/E by a linear-chain
CRF whose transitions only allow O->B->I->E->O. Air time of a flight is its
I-frame count divided by the video's frame rate.
"""

__version__ = "0.1.0"

from .dataset import (
    FlightSpan, PoseSequence, VideoRecord, air_time, augment, intervals_to_tags, normalize_pose,
    parse_pose_output, read_jsonl, tags_to_intervals, track_skater, write_jsonl,
)
from .metrics import MetricsReport, evaluate
from .model import AirTimeModel, ModelConfig, crf_log_partition, crf_nll, crf_score, viterbi_decode
from .synthetic import SynthConfig, generate_synthetic
from .training import TrainConfig, fine_tune, load_checkpoint, save_checkpoint, train

__all__ = [
    "AirTimeModel", "FlightSpan", "MetricsReport", "ModelConfig", "PoseSequence", "SynthConfig", "TrainConfig",
    "VideoRecord", "air_time", "augment", "crf_log_partition", "crf_nll", "crf_score", "evaluate", "fine_tune",
    "generate_synthetic", "intervals_to_tags", "load_checkpoint", "normalize_pose", "parse_pose_output",
    "read_jsonl", "save_checkpoint", "tags_to_intervals", "track_skater", "train", "viterbi_decode",
    "write_jsonl",
]
