import pytest

from benchmarks import BloodTypeModel, CensoredNormalModel
from extensions import SeedStream


@pytest.fixture(autouse=True)
def single_worker(monkeypatch):
    monkeypatch.setenv('MCEM_WORKERS', '1')


@pytest.fixture
def blood():
    return BloodTypeModel()


@pytest.fixture
def censored():
    return CensoredNormalModel()


@pytest.fixture(scope='session')
def blood_mle():
    return BloodTypeModel().oracle_mle()


@pytest.fixture(scope='session')
def censored_mle():
    return CensoredNormalModel().oracle_mle()


@pytest.fixture
def stream():
    return SeedStream(7)


@pytest.fixture
def start(blood):
    return blood.make_theta([1 / 3, 1 / 3])