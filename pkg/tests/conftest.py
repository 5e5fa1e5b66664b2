import json

import pytest

from occanomaly.fixtures import write_fixture
from occanomaly.geometry import GridMeta

# same extent as the default grid at half the resolution
SMALL_META = GridMeta((128, 128, 16), 0.4, (0.0, -25.6, -2.0))


@pytest.fixture(scope="session")
def small_fixture(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    cfg_path = write_fixture(root, seed=0, meta=SMALL_META)
    return cfg_path


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return path
