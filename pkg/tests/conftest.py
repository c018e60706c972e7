import numpy as np
import pytest

from ivit.config import IViTConfig
from ivit.instances import Nucleus, RoiRecord


def make_nucleus(cx, cy, kind="grade1", area=10.0, major=4.0, minor=3.0, mask=None):
    return Nucleus(cx, cy, kind, area, major, minor, mask)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_roi(rng):
    """80x80 ROI with a handful of tumor nuclei and one endothelial nucleus."""
    image = rng.uniform(size=(3, 80, 80))
    nuclei = [
        make_nucleus(10.5, 12.2, "grade1", 20),
        make_nucleus(40.0, 40.0, "grade3", 35),
        make_nucleus(60.7, 20.1, "grade2", 25),
        make_nucleus(70.0, 70.0, "endothelial", 40),
        make_nucleus(25.0, 65.0, "grade2", 30),
    ]
    return RoiRecord(image, nuclei, "type2", "roi_small")


@pytest.fixture
def tiny_cfg():
    return IViTConfig(P=16, N=6, D=8, heads=2, layers=1, grid_w=4, grid_h=4)
