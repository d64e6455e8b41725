"""Cross-modal (RGB/NIR) object tracking with a reliability-gated multi-modal
prototype: tracker, training, synthetic benchmark generation, and evaluation."""

from .core import BoundingBox, Encoding, Frame, ModalityLabel, Sequence
from .proto import (CropConfig, MultiModalPrototype, PrototypeSample, PrototypeState,
                    UpdateDecision, UpdatePolicy, UpdateTrigger)
from .model import ModelConfig, ProtoTrackNet, TrackOutput, build_model

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "Encoding", "Frame", "ModalityLabel", "Sequence",
    "CropConfig", "MultiModalPrototype", "PrototypeSample", "PrototypeState",
    "UpdateDecision", "UpdatePolicy", "UpdateTrigger",
    "ModelConfig", "ProtoTrackNet", "TrackOutput", "build_model",
    "__version__",
]
