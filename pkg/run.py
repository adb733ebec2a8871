import logging
import sys

import click

from app import create_app
from forms import load_config
from models import ConfigError

logger = logging.getLogger(__name__)

EXIT_ENGINE_ERROR = 1
EXIT_CONFIG_ERROR = 2


def _execute(config_path, compare, seed, replicates, out):
    try:
        document = load_config(config_path)
        experiment = create_app(document, compare=compare, seed=seed, replicates=replicates, out=out)
        status = experiment.compare() if compare else experiment.run()
    except ConfigError as exc:
        click.echo(f'Configuration error: {exc}', err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    if status:
        click.echo('One or more runs failed; partial trajectories were written.', err=True)
        sys.exit(EXIT_ENGINE_ERROR)


@click.group()
def cli():
    """Missing-data maximum likelihood experiments."""


@cli.command()
@click.argument('config', type=click.Path(dir_okay=False))
@click.option('--seed', type=int, default=None, help='First seed (overrides seeds.first).')
@click.option('--replicates', type=int, default=None, help='Number of seeds (overrides seeds.count).')
@click.option('--out', type=click.Path(file_okay=False), default=None, help='Output directory.')
def run(config, seed, replicates, out):
    """Run one method and write its trajectory and summary tables."""
    _execute(config, False, seed, replicates, out)


@cli.command()
@click.argument('config', type=click.Path(dir_okay=False))
@click.option('--seed', type=int, default=None, help='First seed (overrides seeds.first).')
@click.option('--replicates', type=int, default=None, help='Number of seeds (overrides seeds.count).')
@click.option('--out', type=click.Path(file_okay=False), default=None, help='Output directory.')
def compare(config, seed, replicates, out):
    """Run every listed method on a shared model and tabulate distances to the MLE."""
    _execute(config, True, seed, replicates, out)


if __name__ == '__main__':
    cli()
