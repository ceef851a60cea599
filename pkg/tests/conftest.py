import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cardrefine.volgrid import LabelGrid, VolumeGrid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_volume(rng, dims=(6, 5, 4), spacing=(1.25, 1.25, 2.0), origin=(0.0, 0.0, 0.0)):
    return VolumeGrid(rng.random(dims, dtype=np.float32), spacing, origin)


def random_labels(rng, dims=(6, 5, 4), class_count=5, spacing=(1.25, 1.25, 2.0),
                  origin=(0.0, 0.0, 0.0), ensure_all=False):
    labels = rng.integers(0, class_count, size=dims, dtype=np.uint8)
    if ensure_all:
        flat = labels.reshape(-1)
        positions = rng.choice(flat.size, size=class_count, replace=False)
        for k in range(class_count):
            flat[positions[k]] = k
    return LabelGrid(labels, spacing, origin, class_count=class_count)
