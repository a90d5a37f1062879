import pytest
from hypothesis import settings

from dha_forge.crashdata import GeneratorConfig, generate_pairs
from dha_forge.narrative import pair_records

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_pairs():
    return generate_pairs(GeneratorConfig(seed=11, n_pairs=400))


@pytest.fixture(scope="session")
def small_narratives(small_pairs):
    return [pair_records(r1, r2) for r1, r2, _ in small_pairs]
