"""
Validation of experiment configuration documents.

Each section of the JSON document is checked by its own WTForms form.
Problems are reported as ConfigError with a "section.field: message"
description.
"""
import json
import os

from wtforms import BooleanField, FieldList, FloatField, Form, IntegerField, SelectField, StringField
from wtforms.fields.core import UnboundField
from wtforms.validators import NumberRange, ValidationError

from models import ConfigError

SECTIONS = ('model', 'method', 'methods', 'sampler', 'seeds', 'output', 'start')
SAMPLER_CHOICES = ['direct', 'importance', 'truncated-importance', 'rejection', 'metropolis-hastings', 'exact']


def _open_interval(low, high=None):
    """Strict bounds; NumberRange only checks inclusive ones."""
    def check(form, field):
        value = field.data
        if value is None or not value > low or (high is not None and not value < high):
            bounds = f'greater than {low}' if high is None else f'strictly between {low} and {high}'
            raise ValidationError(f'Must be {bounds}.')
    return check


POSITIVE = _open_interval(0)
NONNEGATIVE = NumberRange(min=0)
AT_LEAST_ONE = NumberRange(min=1)
UNIT_INTERVAL = _open_interval(0, 1)


def _optional_positive(form, field):
    if field.data is not None and field.data <= 0:
        raise ValidationError('Must be positive when given.')


# Models

class BloodModelForm(Form):
    name = SelectField('Model', choices=['blood'])
    counts = FieldList(IntegerField('Count', validators=[NONNEGATIVE]), default=[10, 16, 7, 1])

    def validate_counts(self, field):
        if len(field.data) != 4:
            raise ValidationError('Blood-type data needs four counts (O, A, B, AB).')


class CensoredModelForm(Form):
    name = SelectField('Model', choices=['censored'])
    values = FieldList(FloatField('Value'), default=[])
    threshold = FloatField('Censoring threshold', default=1.0)


MODEL_FORMS = {
    'blood': BloodModelForm,
    'censored': CensoredModelForm,
}


# Methods

class EmForm(Form):
    name = SelectField('Method', choices=['em'])
    tol = FloatField('Tolerance', default=1e-8, validators=[POSITIVE])
    max_iter = IntegerField('Maximum iterations', default=1000, validators=[AT_LEAST_ONE])


class WeiTannerForm(Form):
    name = SelectField('Method', choices=['wei-tanner'])
    schedule = FieldList(
        FieldList(IntegerField('Entry', validators=[NONNEGATIVE])),
        default=[[50, 100], [20, 1000]],
    )

    def validate_schedule(self, field):
        if not field.data:
            raise ValidationError('Schedule needs at least one entry.')
        for entry in field.data:
            if len(entry) != 2 or entry[1] is None or entry[1] < 1:
                raise ValidationError('Each entry is [iterations, mc_size] with mc_size >= 1.')


class ChanLedolterForm(Form):
    name = SelectField('Method', choices=['chan-ledolter'])
    pilot_iters = IntegerField('Pilot iterations', default=50, validators=[AT_LEAST_ONE])
    pilot_mc_size = IntegerField('Pilot Monte Carlo size', default=100, validators=[NumberRange(min=2)])
    followers = IntegerField('Followers', default=10, validators=[AT_LEAST_ONE])
    se_threshold = FloatField('SE threshold', default=1e-3, validators=[POSITIVE])
    ci_level = FloatField('CI level', default=0.95, validators=[UNIT_INTERVAL])
    max_stage2_iters = IntegerField('Maximum stage-2 iterations', default=200, validators=[AT_LEAST_ONE])


class BoothHobertForm(Form):
    name = SelectField('Method', choices=['booth-hobert'])
    m0 = IntegerField('Initial Monte Carlo size', default=10, validators=[AT_LEAST_ONE])
    alpha = FloatField('CI miss level', default=0.25, validators=[UNIT_INTERVAL])
    r = IntegerField('Escalation divisor', default=3, validators=[AT_LEAST_ONE])
    delta1 = FloatField('delta1', default=1e-3, validators=[POSITIVE])
    delta2 = FloatField('delta2', default=2e-3, validators=[POSITIVE])
    consecutive = IntegerField('Consecutive iterations', default=3, validators=[AT_LEAST_ONE])
    se_rule = BooleanField('Use SE denominators', default=False)
    ripatti_variant = BooleanField('Ripatti escalation', default=False)
    max_iters = IntegerField('Maximum iterations', default=200, validators=[AT_LEAST_ONE])
    delta1_se = FloatField('delta1 (SE rule)', default=None, validators=[_optional_positive])
    delta2_se = FloatField('delta2 (SE rule)', default=None, validators=[_optional_positive])


class CaffoForm(Form):
    name = SelectField('Method', choices=['caffo'])
    m0 = IntegerField('Initial Monte Carlo size', default=10, validators=[NumberRange(min=2)])
    ascent_level = FloatField('Ascent level', default=0.80, validators=[UNIT_INTERVAL])
    term_level = FloatField('Termination level', default=0.90, validators=[UNIT_INTERVAL])
    tau = FloatField('Tolerance', default=1e-3, validators=[POSITIVE])
    augment_fraction = FloatField('Augment fraction', default=0.5, validators=[POSITIVE])
    max_iters = IntegerField('Maximum iterations', default=200, validators=[AT_LEAST_ONE])
    max_augments_per_iter = IntegerField('Maximum augmentations', default=20, validators=[NONNEGATIVE])
    max_mc_size = IntegerField('Maximum Monte Carlo size', default=1_000_000, validators=[AT_LEAST_ONE])

    def validate_max_mc_size(self, field):
        if self.m0.data is not None and field.data is not None and field.data < self.m0.data:
            raise ValidationError('Maximum Monte Carlo size must be at least m0.')


class SaemForm(Form):
    name = SelectField('Method', choices=['saem-gu-kong', 'saem-delyon'])
    mc_size = IntegerField('Monte Carlo size', default=10, validators=[AT_LEAST_ONE])
    iterations = IntegerField('Iterations', default=50, validators=[NONNEGATIVE])
    schedule = SelectField('Step schedule', choices=['power', 'harmonic'], default='power')
    gamma = FloatField('Exponent', default=0.7, validators=[_open_interval(0.5), NumberRange(max=1)])
    scale = FloatField('Scale', default=1.0, validators=[POSITIVE])
    burn = IntegerField('Offline-average burn-in', default=None)

    def validate_burn(self, field):
        if field.data is not None and not 0 <= field.data < max(self.iterations.data or 0, 1):
            raise ValidationError('Burn-in must leave at least one record.')


class McmlForm(Form):
    name = SelectField('Method', choices=['mcml'])
    mc_size = IntegerField('Monte Carlo size', default=1000, validators=[NumberRange(min=2)])
    rounds = IntegerField('Rounds', default=1, validators=[AT_LEAST_ONE])
    reference = FieldList(FloatField('Reference component'), default=[])


METHOD_FORMS = {
    'em': EmForm,
    'wei-tanner': WeiTannerForm,
    'chan-ledolter': ChanLedolterForm,
    'booth-hobert': BoothHobertForm,
    'caffo': CaffoForm,
    'saem-gu-kong': SaemForm,
    'saem-delyon': SaemForm,
    'mcml': McmlForm,
}


# Everything else

class SamplerForm(Form):
    name = SelectField('Sampler', choices=SAMPLER_CHOICES, default='direct')
    burn_in = IntegerField('Burn-in', default=500, validators=[NONNEGATIVE])
    thinning = IntegerField('Thinning', default=1, validators=[AT_LEAST_ONE])
    step = FloatField('Random-walk step', default=None, validators=[_optional_positive])
    max_proposals = IntegerField('Proposal budget', default=10_000_000, validators=[AT_LEAST_ONE])


class SeedsForm(Form):
    first = IntegerField('First seed', default=1, validators=[NONNEGATIVE])
    count = IntegerField('Replicates', default=1, validators=[AT_LEAST_ONE])


class OutputForm(Form):
    directory = StringField('Directory', default=lambda: os.environ.get('MCEM_OUTPUT_DIR', 'output'))
    timing = BooleanField('Record wall time', default=False)
    inference = BooleanField('Standard errors', default=False)
    inference_mc_size = IntegerField('Inference Monte Carlo size', default=10_000, validators=[NumberRange(min=2)])


class StartForm(Form):
    start = FieldList(FloatField('Component'), default=[])


# Validation

def _flatten(prefix, errors):
    if isinstance(errors, dict):
        for key, value in errors.items():
            yield from _flatten(f'{prefix}.{key}', value)
    elif isinstance(errors, (list, tuple)):
        for index, value in enumerate(errors):
            if isinstance(value, str):
                yield f'{prefix}: {value}'
            elif value:
                yield from _flatten(f'{prefix}[{index}]', value)


def _field_names(form_class):
    return {name for name in dir(form_class) if isinstance(getattr(form_class, name, None), UnboundField)}


def validate_section(form_class, data, section):
    """Validate one section; returns the cleaned field values."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f'{section}: expected an object', section)
    unknown = sorted(set(data) - _field_names(form_class))
    if unknown:
        raise ConfigError(f'{section}.{unknown[0]}: unknown field', f'{section}.{unknown[0]}')
    form = form_class(data=data)
    if not form.validate():
        messages = list(_flatten(section, form.errors))
        first = messages[0].split(':', 1)[0]
        raise ConfigError('; '.join(messages), first)
    return form.data


def _validate_named(registry, data, section):
    if not isinstance(data, dict):
        raise ConfigError(f'{section}: expected an object', section)
    name = data.get('name')
    if name not in registry:
        raise ConfigError(f'{section}.name: unknown {section.split("[")[0].rstrip("s")} {name!r}', f'{section}.name')
    return validate_section(registry[name], data, section)


def validate_config(document, compare=False):
    """
    Validate a parsed experiment document.

    Returns a normalized dict with keys model, methods (a list), sampler,
    seeds, output and start.
    """
    if not isinstance(document, dict):
        raise ConfigError('configuration must be a JSON object')
    unknown = sorted(set(document) - set(SECTIONS))
    if unknown:
        raise ConfigError(f'{unknown[0]}: unknown section', unknown[0])
    model = _validate_named(MODEL_FORMS, document.get('model', {}), 'model')

    if compare:
        entries = document.get('methods')
        if not isinstance(entries, list) or not entries:
            raise ConfigError('methods: compare needs a non-empty list of methods', 'methods')
        sections = [(entry, f'methods[{index}]') for index, entry in enumerate(entries)]
    else:
        if 'method' not in document:
            raise ConfigError('method: section is required', 'method')
        sections = [(document['method'], 'method')]
    methods = []
    for entry, section in sections:
        if isinstance(entry, dict) and 'model' in entry:
            entry = dict(entry)
            if entry.pop('model') != model['name']:
                raise ConfigError(f'{section}.model: all runs must share the model {model["name"]!r}', f'{section}.model')
        methods.append(_validate_named(METHOD_FORMS, entry, section))

    start = validate_section(StartForm, {'start': document.get('start') or []}, 'start')['start']
    return {
        'model': model,
        'methods': methods,
        'sampler': validate_section(SamplerForm, document.get('sampler'), 'sampler'),
        'seeds': validate_section(SeedsForm, document.get('seeds'), 'seeds'),
        'output': validate_section(OutputForm, document.get('output'), 'output'),
        'start': start or None,
    }


def load_config(path):
    """Parse a JSON configuration file; validation happens in create_app."""
    try:
        with open(path, encoding='utf-8') as handle:
            document = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ConfigError(f'{path}: not valid JSON ({exc.msg} at line {exc.lineno})') from exc
    except OSError as exc:
        raise ConfigError(f'{path}: {exc.strerror}') from exc
    return document
