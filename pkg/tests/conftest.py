import numpy as np
import pytest
from hypothesis import settings

from cdrae.config import CacdrConfig, LfacdrConfig, StageConfig
from cdrae.data import SyntheticSpec, generate_synthetic, make_split

settings.register_profile("repo", deadline=None, print_blob=True)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def reference_pair():
    return generate_synthetic(SyntheticSpec())[0]


@pytest.fixture(scope="session")
def small_pair():
    spec = SyntheticSpec(m=40, n=50, rank=3, noise=0.02, source_sparsity=0.7, target_sparsity=0.8, seed=3)
    return generate_synthetic(spec)[0]


@pytest.fixture(scope="session")
def small_user_pair():
    spec = SyntheticSpec(m=50, n=40, rank=3, noise=0.02, source_sparsity=0.7, target_sparsity=0.8,
                         shared_axis="users", seed=4)
    return generate_synthetic(spec)[0]


@pytest.fixture
def small_cacdr_config():
    return CacdrConfig(hidden=(24, 12), latent_dim=6, mapper_hidden=(12,), batch_size=8,
                       init=StageConfig(30, 1e-3, 1e-5), coupled=StageConfig(20, 1e-4, 1e-5))


@pytest.fixture
def small_lfacdr_config():
    return LfacdrConfig(hidden=(24, 12), latent_dim=6, mapper_hidden=(12,), batch_size=16,
                        init=StageConfig(30, 1e-3, 1e-5), coupled=StageConfig(20, 1e-4, 1e-5))


def split_of(pair, seed=0):
    return make_split(pair.n_shared, 0.8, seed, 0)


# one pass/fail line per acceptance criterion, printed in the terminal summary
CRITERIA = {}


def record_criterion(number, passed, detail):
    CRITERIA[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
