"""
Benchmark models and the adapters sampler policies use to reach their
proposals.
"""
import logging

from benchmarks.blood import BloodData, BloodTypeModel, ExactEnumeration
from benchmarks.censored import CensoredData, CensoredNormalModel, censored_fixture
from models import ConfigError

logger = logging.getLogger(__name__)


def build_blood(options):
    return BloodTypeModel(BloodData(tuple(options.get('counts') or BloodData().y)))


def build_censored(options):
    values = options.get('values') or []
    if not values:
        return CensoredNormalModel(censored_fixture())
    return CensoredNormalModel(CensoredData.from_values(values, options.get('threshold', 1.0)))


MODELS = {
    'blood': build_blood,
    'censored': build_censored,
}


def build_model(options):
    name = options.get('name')
    if name not in MODELS:
        raise ConfigError(f'unknown model {name!r}', 'model.name')
    try:
        model = MODELS[name](options)
    except ValueError as exc:
        raise ConfigError(f'invalid {name} data: {exc}', 'model') from exc
    logger.debug(f'Built {model!r}')
    return model


# Proposal adapters: module-level so policies holding them stay picklable.

def importance_proposal(model, theta):
    return model.importance_proposal(theta)


def rejection_proposal(model, theta):
    return model.rejection_proposal(theta)


def mh_setup(model, theta, **options):
    return model.mh_setup(theta, **options)


__all__ = [
    'BloodData', 'BloodTypeModel', 'CensoredData', 'CensoredNormalModel', 'ExactEnumeration',
    'MODELS', 'build_model', 'censored_fixture', 'importance_proposal', 'mh_setup', 'rejection_proposal',
]
