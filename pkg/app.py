"""
Experiment factory and runner.

create_app validates a configuration, resolves the model, sampler policy
and estimation methods from the registries below and returns an
Experiment that writes plot-ready tables for single runs, replicate
studies and method comparisons.
"""
import logging
import os
import time
from dataclasses import dataclass
from functools import partial
from importlib import metadata

import numpy as np
import pandas as pd
import scipy

from benchmarks import ExactEnumeration, build_model, importance_proposal, mh_setup, rejection_proposal
from engines.em import run_em
from engines.inference import standard_errors
from engines.mcem import (
    BoothHobertConfig, CaffoConfig, ChanLedolterConfig, WeiTannerConfig, run_booth_hobert, run_caffo,
    run_chan_ledolter, run_wei_tanner,
)
from engines.mcml import mcml_iterate
from engines.saem import StepSchedule, offline_average, run_saem
from extensions import SeedStream, worker_count, worker_pool
from forms import validate_config
from models import CapabilityError, ConfigError, EstimationError, validate_theta
from samplers import DirectSampling, ImportanceSampling, MetropolisSampling, RejectionSampling
from utils import config_hash, output_name, write_json, write_table

logger = logging.getLogger(__name__)

__version__ = '0.1.0'

METHODS = {}
SAMPLERS = {}


def register_method(name):
    def decorator(runner):
        METHODS[name] = runner
        return runner
    return decorator


def register_sampler(name):
    def decorator(builder):
        SAMPLERS[name] = builder
        return builder
    return decorator


# Methods: runner(model, theta0, options, policy, stream) -> Trajectory

@register_method('em')
def _em(model, theta0, options, policy, stream):
    return run_em(model, theta0, options['tol'], options['max_iter'])


@register_method('wei-tanner')
def _wei_tanner(model, theta0, options, policy, stream):
    config = WeiTannerConfig(schedule=tuple(tuple(entry) for entry in options['schedule']))
    return run_wei_tanner(model, theta0, config, policy, stream)


@register_method('chan-ledolter')
def _chan_ledolter(model, theta0, options, policy, stream):
    return run_chan_ledolter(model, theta0, ChanLedolterConfig(**options), stream, policy)


@register_method('booth-hobert')
def _booth_hobert(model, theta0, options, policy, stream):
    return run_booth_hobert(model, theta0, BoothHobertConfig(**options), stream, policy)


@register_method('caffo')
def _caffo(model, theta0, options, policy, stream):
    return run_caffo(model, theta0, CaffoConfig(**options), stream, policy)


def _saem(variant, model, theta0, options, policy, stream):
    if options['schedule'] == 'harmonic':
        schedule = StepSchedule.harmonic(options['scale'])
    else:
        schedule = StepSchedule.power(options['gamma'], options['scale'])
    trajectory = run_saem(
        model, theta0, variant, options['mc_size'], options['iterations'], schedule, policy, stream
    )
    if options.get('burn') is not None:
        trajectory = offline_average(trajectory, options['burn'])
    return trajectory


register_method('saem-gu-kong')(partial(_saem, 'gu-kong'))
register_method('saem-delyon')(partial(_saem, 'delyon'))


@register_method('mcml')
def _mcml(model, theta0, options, policy, stream):
    reference = model.make_theta(options['reference']) if options['reference'] else theta0
    if not validate_theta(reference):
        raise ConfigError(f'mcml reference {reference!r} lies outside the parameter space', 'method.reference')
    return mcml_iterate(model, reference, options['mc_size'], options['rounds'], stream, policy)


# Samplers: builder(model, options) -> policy

def _require(model, capability, sampler):
    if not model.supports(capability):
        raise ConfigError(f'sampler {sampler!r} is not available for the {model.name} model', 'sampler.name')


@register_sampler('direct')
def _direct(model, options):
    if not model.supports('sample_conditional_direct'):
        raise ConfigError(f'the {model.name} model has no direct sampler', 'sampler.name')
    return DirectSampling()


@register_sampler('importance')
def _importance(model, options):
    _require(model, 'importance_proposal', 'importance')
    return ImportanceSampling(importance_proposal)


@register_sampler('truncated-importance')
def _truncated_importance(model, options):
    _require(model, 'importance_proposal', 'truncated-importance')
    return ImportanceSampling(importance_proposal, truncate=True)


@register_sampler('rejection')
def _rejection(model, options):
    _require(model, 'rejection_proposal', 'rejection')
    return RejectionSampling(rejection_proposal, options['max_proposals'])


@register_sampler('metropolis-hastings')
def _metropolis(model, options):
    _require(model, 'mh_setup', 'metropolis-hastings')
    settings = {'burn_in': options['burn_in'], 'thinning': options['thinning']}
    if options.get('step') is not None:
        settings['step'] = options['step']
    return MetropolisSampling(partial(mh_setup, **settings))


@register_sampler('exact')
def _exact(model, options):
    _require(model, 'enumerate_conditional', 'exact')
    return ExactEnumeration()


# Tables

def trajectory_frame(trajectory, parameter_names):
    """One row per iteration; diagnostics columns follow the fixed ones, sorted by name."""
    fixed = ['iteration', 'mc_size', *parameter_names, 'objective_increment', 'ci_lower', 'ci_upper']
    diagnostic_names = sorted({key for record in trajectory.records for key in record.diagnostics})
    rows = []
    for record in trajectory.records:
        row = {
            'iteration': record.iteration,
            'mc_size': record.mc_size,
            'objective_increment': record.objective_increment,
            'ci_lower': record.ci_lower,
            'ci_upper': record.ci_upper,
        }
        row.update(zip(parameter_names, (float(value) for value in record.theta.values)))
        row.update({name: float(record.diagnostics.get(name, np.nan)) for name in diagnostic_names})
        rows.append(row)
    frame = pd.DataFrame(rows, columns=fixed + diagnostic_names)
    for column in ('objective_increment', 'ci_lower', 'ci_upper', 'mc_size'):
        frame[column] = frame[column].astype(float)
    return frame


def report_document(report):
    return {
        'info': report.info.tolist(),
        'covariance': report.covariance.tolist(),
        'std_errors': report.std_errors.tolist(),
        'fraction_missing_info': report.fraction_missing_info.tolist(),
        'mc_size_used': report.mc_size_used,
    }


@dataclass(frozen=True)
class RunResult:
    method: str
    seed: int
    frame: pd.DataFrame
    final: tuple
    termination: str
    iterations: int
    total_draws: int
    wall_time: float
    error: str = ''
    inference: dict = None


def run_replicate(config, method_index, seed):
    """
    Run one (method, seed) pair from a validated configuration.

    Module-level so worker processes rebuild the experiment from the plain
    configuration instead of receiving models or policies.
    """
    return Experiment(config).run_seed(method_index, seed)


class Experiment:
    def __init__(self, config):
        self.config = config
        self.model = build_model(config['model'])
        sampler = config['sampler']
        if sampler['name'] not in SAMPLERS:
            raise ConfigError(f'sampler.name: unknown sampler {sampler["name"]!r}', 'sampler.name')
        self.policy = SAMPLERS[sampler['name']](self.model, sampler)
        for index, options in enumerate(config['methods']):
            if options['name'] not in METHODS:
                raise ConfigError(f'method.name: unknown method {options["name"]!r}', 'method.name')
        if config['start']:
            self.theta0 = self.model.make_theta(config['start'])
            if len(config['start']) != self.model.dimension or not validate_theta(self.theta0):
                raise ConfigError(f'start: {self.theta0!r} is not an interior point', 'start')
        else:
            self.theta0 = self.model.default_start()
        self.output = config['output']
        self.parameter_names = list(self.model.parameter_names)

    @property
    def seeds(self):
        first = self.config['seeds']['first']
        return list(range(first, first + self.config['seeds']['count']))

    def run_seed(self, method_index, seed):
        options = dict(self.config['methods'][method_index])
        name = options.pop('name')
        stream = SeedStream(seed)
        started = time.perf_counter()
        error = ''
        inference = None
        try:
            trajectory = METHODS[name](self.model, self.theta0, options, self.policy, stream.spawn(0))
        except EstimationError as exc:
            logger.error(f'{name} failed for seed {seed}: {exc}')
            trajectory = exc.trajectory
            error = f'{type(exc).__name__}: {exc}'
        wall_time = time.perf_counter() - started
        logger.info(f'{name} seed {seed} finished in {wall_time:.2f}s')
        if trajectory is not None and trajectory.records and not error and self.output['inference']:
            inference = self.inference(trajectory.final_theta, stream.spawn(1))
        if trajectory is None:
            frame = trajectory_frame_empty(self.parameter_names)
            final, termination, iterations, draws = (), 'failed', 0, 0
        else:
            frame = trajectory_frame(trajectory, self.parameter_names)
            final = tuple(float(value) for value in trajectory.final_theta.values) if trajectory.records else ()
            termination, iterations, draws = trajectory.terminated_reason.value, len(trajectory), trajectory.total_draws
        return RunResult(name, seed, frame, final, termination, iterations, draws, wall_time, error, inference)

    def inference(self, theta, stream):
        try:
            report = standard_errors(self.model, theta, self.output['inference_mc_size'], self.policy, stream)
        except (CapabilityError, EstimationError) as exc:
            logger.warning(f'No standard errors at {theta!r}: {exc}')
            return {'error': f'{type(exc).__name__}: {exc}'}
        return report_document(report)

    def _results(self, pairs):
        """Run (method_index, seed) pairs, in parallel when more than one worker is available."""
        workers = min(worker_count(), len(pairs))
        if workers <= 1:
            return [self.run_seed(index, seed) for index, seed in pairs]
        with worker_pool(workers) as pool:
            futures = [pool.submit(run_replicate, self.config, index, seed) for index, seed in pairs]
            return [future.result() for future in futures]

    def _metadata(self, command, files):
        return {
            'command': command,
            'config': self.config,
            'config_hash': config_hash(self.config),
            'seeds': self.seeds,
            'versions': {
                'package': __version__,
                'numpy': np.__version__,
                'scipy': scipy.__version__,
                'pandas': pd.__version__,
                'wtforms': metadata.version('wtforms'),
            },
            'files': files,
        }

    def _final_columns(self, result):
        values = result.final or (np.nan,) * len(self.parameter_names)
        return dict(zip(self.parameter_names, values))

    def run(self):
        """Single method over the configured seeds; returns the exit status."""
        directory = self.output['directory']
        method = self.config['methods'][0]['name']
        results = self._results([(0, seed) for seed in self.seeds])
        files = []
        rows = []
        for result in results:
            path = os.path.join(directory, output_name(method, 'seed', result.seed))
            write_table(result.frame, path)
            files.append(os.path.basename(path))
            row = {'row': str(result.seed), 'method': method, 'termination': result.termination}
            row.update(self._final_columns(result))
            row.update(iterations=result.iterations, total_draws=result.total_draws)
            if self.output['timing']:
                row['wall_time'] = result.wall_time
            row['error'] = result.error or None
            rows.append(row)
            if result.inference is not None:
                inference_path = os.path.join(directory, output_name(method, 'seed', result.seed, 'inference', suffix='json'))
                write_json(result.inference, inference_path)
                files.append(os.path.basename(inference_path))
        summary = pd.DataFrame(rows)
        summary = pd.concat([summary, self._aggregate(summary, {'method': method})], ignore_index=True)
        summary_path = os.path.join(directory, output_name(method, 'summary'))
        write_table(summary, summary_path)
        files.append(os.path.basename(summary_path))
        write_json(self._metadata('run', files), os.path.join(directory, output_name(method, 'metadata', suffix='json')))
        failed = [result for result in results if result.error]
        for result in failed:
            logger.error(f'Seed {result.seed}: {result.error}')
        return 1 if failed else 0

    def _aggregate(self, frame, labels):
        numeric = [name for name in (*self.parameter_names, 'distance', 'iterations', 'total_draws', 'wall_time') if name in frame]
        rows = []
        for statistic in ('mean', 'sd'):
            values = frame[numeric].astype(float)
            row = dict(labels, row=statistic)
            row.update((values.mean() if statistic == 'mean' else values.std(ddof=1)).to_dict())
            rows.append(row)
        return pd.DataFrame(rows, columns=frame.columns)

    def compare(self):
        """Every configured method over every seed, with distances to the oracle MLE."""
        directory = self.output['directory']
        oracle = self.model.oracle_mle()
        logger.info(f'Oracle MLE for {self.model.name}: {oracle!r}')
        pairs = [(index, seed) for index in range(len(self.config['methods'])) for seed in self.seeds]
        results = self._results(pairs)
        rows = []
        for result in results:
            row = {'method': result.method, 'seed': result.seed}
            row.update(self._final_columns(result))
            distance = np.max(np.abs(np.asarray(result.final) - oracle.values)) if result.final else np.nan
            row.update(
                distance=float(distance), total_draws=result.total_draws, iterations=result.iterations,
                termination=result.termination,
            )
            if self.output['timing']:
                row['wall_time'] = result.wall_time
            row['error'] = result.error or None
            rows.append(row)
        table = pd.DataFrame(rows)
        summaries = []
        for method, group in table.groupby('method', sort=False):
            aggregated = self._aggregate(group.assign(row=''), {'method': method})
            summaries.append(aggregated.rename(columns={'row': 'statistic'}))
        summary = pd.concat(summaries, ignore_index=True)
        keep = ['method', 'statistic', *[name for name in (*self.parameter_names, 'distance', 'total_draws', 'iterations', 'wall_time') if name in summary]]
        files = [output_name('comparison'), output_name('comparison', 'summary')]
        write_table(table, os.path.join(directory, files[0]))
        write_table(summary[keep], os.path.join(directory, files[1]))
        document = self._metadata('compare', files)
        document['oracle'] = oracle.values.tolist()
        write_json(document, os.path.join(directory, output_name('comparison', 'metadata', suffix='json')))
        return 1 if any(result.error for result in results) else 0


def trajectory_frame_empty(parameter_names):
    columns = ['iteration', 'mc_size', *parameter_names, 'objective_increment', 'ci_lower', 'ci_upper']
    return pd.DataFrame(columns=columns)


def configure_logging():
    level = os.environ.get('MCEM_LOG_LEVEL', 'INFO').upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format='%(levelname)s %(name)s: %(message)s')


def create_app(document, compare=False, seed=None, replicates=None, out=None):
    """
    Build an Experiment from a configuration document.

    seed, replicates and out override the seeds and output sections.
    """
    configure_logging()
    config = validate_config(document, compare)
    if seed is not None:
        config['seeds']['first'] = seed
    if replicates is not None:
        if replicates < 1:
            raise ConfigError('seeds.count: replicates must be at least 1', 'seeds.count')
        config['seeds']['count'] = replicates
    if out is not None:
        config['output']['directory'] = out
    experiment = Experiment(config)
    logger.debug(f'Experiment ready: model {experiment.model.name}, sampler {config["sampler"]["name"]}, '
                 f'methods {[options["name"] for options in config["methods"]]}')
    return experiment
