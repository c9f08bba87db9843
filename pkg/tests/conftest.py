import pytest

from prefcal.dataio import parse_comparisons
from prefcal.scoring.client import VlmClient
from prefcal.synthetic import WorldConfig, make_world, mock_backend


@pytest.fixture(scope="session")
def world():
    return make_world(WorldConfig())


@pytest.fixture(scope="session")
def world_records(world):
    return parse_comparisons(world.votes_csv()).records


@pytest.fixture
def synthetic_client(world):
    return VlmClient(mock_backend(world), sleep=lambda _: None)
