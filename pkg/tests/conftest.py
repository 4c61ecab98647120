import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from scaleguide.scale_math import ScaleConfig  # noqa: E402
from scaleguide.scenegen import Annotation, Scene  # noqa: E402

D = 640 / 7


@pytest.fixture
def cfg():
    return ScaleConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_scene(boxes, viewport=(640, 480), image_id="1"):
    anns = [Annotation(tuple(b), b[2] * b[3], f"{image_id}:{i}", image_id) for i, b in enumerate(boxes)]
    return Scene(tuple(viewport), [], anns, [], image_id)
