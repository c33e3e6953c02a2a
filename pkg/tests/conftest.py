import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("repo", deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def small_synth():
    from mobprivacy.dataio import SyntheticConfig, generate_synthetic

    cfg = SyntheticConfig(num_users=4, total_pois=8, days=14, resolution_minutes=60)
    return cfg, generate_synthetic(cfg)


@pytest.fixture(scope="session")
def small_prepared(small_synth):
    from mobprivacy.pipeline import PrepConfig, prepare

    _, records = small_synth
    return prepare(records, PrepConfig(resolution_minutes=60, sequence_length=4), seed=0)
