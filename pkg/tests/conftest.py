import pytest

from tabletop.grasping import load_tool_db
from tabletop.orchestrator import Pipeline, RunConfig
from tabletop.perception import Perception, cage_cameras
from tabletop.scenes import random_scene


@pytest.fixture(scope="session")
def tool_db():
    return load_tool_db()


@pytest.fixture(scope="session")
def perception():
    return Perception(cage_cameras())


@pytest.fixture(scope="session")
def pipeline(tool_db):
    return Pipeline(RunConfig(), tool_db=tool_db)


@pytest.fixture
def scoop_scene():
    return random_scene(["scoop", "candy", "bowl"], seed=3)
