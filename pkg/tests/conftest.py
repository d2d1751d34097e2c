import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

from vlaad.datakit import ClipRecord
from vlaad.embeddings import StubEncoder
from vlaad.model import init_checkpoint


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_encoder():
    return StubEncoder(dim=16, seed=7)


@pytest.fixture
def small_ckpt():
    return init_checkpoint(dim=16, hidden=8, gamma=10.0, seed=3,
                           zero_first_layer=False)


def make_clip(clip_id="clip0", n_frames=40, feat_dim=6, label=0,
              collision_frame=None, seed=0, caption="the car drives on",
              source="external"):
    rng = np.random.default_rng(seed)
    return ClipRecord(
        clip_id=clip_id,
        features=rng.standard_normal((n_frames, feat_dim)).astype(np.float32),
        caption=caption, label=label, collision_frame=collision_frame,
        source=source)


@pytest.fixture
def clip_factory():
    return make_clip
