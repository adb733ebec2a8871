import json

import pytest

from forms import load_config, validate_config
from models import ConfigError


@pytest.fixture(autouse=True)
def default_output_directory(monkeypatch):
    monkeypatch.delenv('MCEM_OUTPUT_DIR', raising=False)


def _document(**sections):
    document = {'model': {'name': 'blood'}, 'method': {'name': 'em'}}
    document.update(sections)
    return document


def test_defaults_are_filled_in():
    config = validate_config(_document())
    assert config['model'] == {'name': 'blood', 'counts': [10, 16, 7, 1]}
    assert config['methods'] == [{'name': 'em', 'tol': 1e-8, 'max_iter': 1000}]
    assert config['sampler']['name'] == 'direct'
    assert config['seeds'] == {'first': 1, 'count': 1}
    assert config['output']['directory'] == 'output'
    assert config['output']['timing'] is False
    assert config['start'] is None


def test_output_directory_from_environment(monkeypatch):
    monkeypatch.setenv('MCEM_OUTPUT_DIR', '/tmp/mcem-runs')
    assert validate_config(_document())['output']['directory'] == '/tmp/mcem-runs'


def test_method_options():
    config = validate_config(_document(method={'name': 'booth-hobert', 'm0': 20, 'se_rule': True}))
    options = config['methods'][0]
    assert options['m0'] == 20
    assert options['se_rule'] is True
    assert options['alpha'] == 0.25
    assert options['delta1_se'] is None


def test_nested_schedule():
    config = validate_config(_document(method={'name': 'wei-tanner', 'schedule': [[5, 10], [3, 100]]}))
    assert config['methods'][0]['schedule'] == [[5, 10], [3, 100]]


def test_start_point():
    assert validate_config(_document(start=[0.3, 0.1]))['start'] == [0.3, 0.1]


@pytest.mark.parametrize('document, field_name', [
    (_document(bogus={}), 'bogus'),
    (_document(method={'name': 'em', 'bogus': 1}), 'method.bogus'),
    (_document(method={'name': 'newton'}), 'method.name'),
    (_document(method={'name': 'booth-hobert', 'alpha': 1.5}), 'method.alpha'),
    (_document(method={'name': 'caffo', 'm0': 1}), 'method.m0'),
    (_document(method={'name': 'caffo', 'm0': 100, 'max_mc_size': 50}), 'method.max_mc_size'),
    (_document(method={'name': 'saem-delyon', 'gamma': 0.5}), 'method.gamma'),
    (_document(method={'name': 'saem-delyon', 'iterations': 10, 'burn': 10}), 'method.burn'),
    (_document(method={'name': 'wei-tanner', 'schedule': [[5]]}), 'method.schedule'),
    (_document(model={'name': 'blood', 'counts': [1, 2, 3]}), 'model.counts'),
    (_document(model={'name': 'poisson'}), 'model.name'),
    (_document(sampler={'name': 'gibbs'}), 'sampler.name'),
    (_document(seeds={'count': 0}), 'seeds.count'),
    ({'model': {'name': 'blood'}}, 'method'),
])
def test_invalid_documents(document, field_name):
    with pytest.raises(ConfigError) as excinfo:
        validate_config(document)
    assert excinfo.value.field_name == field_name


def test_compare_needs_methods():
    with pytest.raises(ConfigError) as excinfo:
        validate_config({'model': {'name': 'blood'}}, compare=True)
    assert excinfo.value.field_name == 'methods'


def test_compare_rejects_mixed_models():
    document = {
        'model': {'name': 'blood'},
        'methods': [{'name': 'em'}, {'name': 'em', 'model': 'censored'}],
    }
    with pytest.raises(ConfigError) as excinfo:
        validate_config(document, compare=True)
    assert excinfo.value.field_name == 'methods[1].model'


def test_compare_accepts_matching_model_tags():
    document = {
        'model': {'name': 'blood'},
        'methods': [{'name': 'em', 'model': 'blood'}, {'name': 'mcml', 'mc_size': 100}],
    }
    config = validate_config(document, compare=True)
    assert [options['name'] for options in config['methods']] == ['em', 'mcml']


def test_load_config(tmp_path):
    path = tmp_path / 'experiment.json'
    path.write_text(json.dumps(_document()))
    assert load_config(str(path)) == _document()


def test_load_config_rejects_bad_json(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{"model": ')
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / 'missing.json'))
