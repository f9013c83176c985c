"""Temporal graph embeddings for video object identification.

Per-frame keypoint graphs (Delaunay adjacency over normalized positions) are
encoded with a two-layer graph-attention network and a two-head sparsity
module, then aggregated across frames by a length-1 temporal convolution and
sequence average pooling into a unit-norm object descriptor. Includes the
training losses, a half-split matching benchmark, and a CLI.
"""

__version__ = "0.1.0"

from .evaluation import EvalConfig, EvalReport, run_benchmark
from .feature_store import (
    ObjectTrack,
    SynthConfig,
    TrackSet,
    generate_synthetic,
    load_tracks,
    save_tracks,
    split_track,
)
from .graph_encoder import EncoderParams, ModelConfig, encode_frame, init_encoder_params
from .temporal_encoder import (
    TemporalParams,
    airobject_descriptor,
    init_temporal_params,
)
from .topo_graph import FrameGraph, build_frame_graph, delaunay
from .training import TrainConfig, train_stage1, train_stage2

__all__ = [
    "EvalConfig",
    "EvalReport",
    "run_benchmark",
    "ObjectTrack",
    "SynthConfig",
    "TrackSet",
    "generate_synthetic",
    "load_tracks",
    "save_tracks",
    "split_track",
    "EncoderParams",
    "ModelConfig",
    "encode_frame",
    "init_encoder_params",
    "TemporalParams",
    "airobject_descriptor",
    "init_temporal_params",
    "FrameGraph",
    "build_frame_graph",
    "delaunay",
    "TrainConfig",
    "train_stage1",
    "train_stage2",
    "__version__",
]
