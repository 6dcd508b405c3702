import math
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from steerclone.expert import drive_and_record  # noqa: E402
from steerclone.simworld import TrackSpec, _turtle, build_track  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tracks():
    return {k: build_track(k) for k in ("ellipse", "o", "s")}


@pytest.fixture(scope="session")
def stadium():
    """Long straights joined by wide turns; the straights are far apart so a
    camera on one sees nothing but straight road."""
    pts, _ = _turtle((0.0, 0.0), 0.0, [("line", 6.0), ("arc", 4.0, math.pi), ("line", 6.0), ("arc", 4.0, math.pi)], 0.004)
    pts[-1] = pts[0]
    track = TrackSpec("stadium", pts, extent=(20.0, 20.0))
    track.validate()
    return track


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ellipse_small")
    return drive_and_record(build_track("ellipse"), 40, 0.3, 0.02, 5, root)


@pytest.fixture(scope="session")
def small_frames(small_dataset):
    return small_dataset.load_arrays()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
