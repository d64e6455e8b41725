import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

from prototrack.core import BoundingBox, Encoding, Frame, ModalityLabel, Sequence
from prototrack.data import SynthSpec, generate_sequence
from prototrack.model import ModelConfig


def make_frame(index: int = 0, size: int = 64, modality=ModalityLabel.RGB,
               box: BoundingBox | None = None, visible: bool = True,
               fill: float = 0.5) -> Frame:
    image = np.full((size, size, 3), fill, dtype=np.float32)
    if box is None:
        box = BoundingBox(size / 4, size / 4, size / 4, size / 4)
    return Frame(image=image, modality=modality, index=index, gt_box=box,
                 visible=visible)


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    """Smallest config that still exercises every shape relationship."""
    return ModelConfig(patch_size=16, embed_dim=16, depth=1, num_heads=2,
                       mlp_ratio=2.0, template_size=32, search_size=64,
                       box_head_hidden=8, score_head_hidden=8, seed=0,
                       template_factor=2.0, search_factor=4.0)


@pytest.fixture(scope="session")
def mini_config() -> ModelConfig:
    """Config small enough to train on one CPU core in seconds."""
    return ModelConfig(patch_size=16, embed_dim=48, depth=2, num_heads=2,
                       mlp_ratio=2.0, template_size=48, search_size=96,
                       box_head_hidden=32, score_head_hidden=24, seed=0,
                       template_factor=2.2, search_factor=4.0)


@pytest.fixture(scope="session")
def cross_modal_sequence() -> Sequence:
    """120 frames with one RGB->NIR switch and a short occlusion."""
    from prototrack.data import OcclusionEvent
    spec = SynthSpec(num_frames=120, image_size=96, seed=11, texture_seed=3,
                     switch_indices=(60,), occlusions=(OcclusionEvent(90, 8),),
                     velocity=(1.0, 0.6), name="fixture_cross")
    return generate_sequence(spec)


@pytest.fixture(scope="session")
def rgb_only_sequence() -> Sequence:
    spec = SynthSpec(num_frames=60, image_size=96, seed=5, texture_seed=9,
                     velocity=(0.9, -0.7), name="fixture_rgb")
    return generate_sequence(spec)
