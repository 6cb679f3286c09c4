"""
Command-line interface for dpo-lab
"""
import json
import logging
import math
import sys
from pathlib import Path

import click

from . import __version__
from .config import get_config_path, has_config, load_config, write_default_config
from .environments import ENVIRONMENTS
from .policy import LEARNERS
from .trainer import Trainer, diagnose as run_diagnostics
from .verify import SUITE_NAMES, format_report, run_suite


def _json_value(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


@click.group()
@click.version_option(version=__version__)
@click.option('--verbose', '-v', is_flag=True, help='Log debug output to stderr')
def main(verbose):
    """dpo-lab - Distillation policy optimization experiments"""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.option('--env', '-e', type=click.Choice(sorted(ENVIRONMENTS)), help='Environment to train on')
@click.option('--learner', '-l', type=click.Choice(LEARNERS), help='On-policy learner')
@click.option('--steps', '-n', 'total_steps', type=int, help='Total environment steps')
@click.option('--seed', '-s', type=int, help='Master seed')
@click.option('--config', '-c', 'config_path', type=click.Path(dir_okay=False), help='Run configuration file')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), help='Output directory')
@click.option('--output', '-o', type=click.Choice(['text', 'json']), default='text',
              help='Output format')
def train(env, learner, total_steps, seed, config_path, out_dir, output):
    """Train a policy and write metrics and checkpoints

    Command-line flags override values from the configuration file.

    Examples:

        dpo train --env lqr1d --steps 20000 --seed 1

        dpo train -c runs.cfg --out runs/pointmass -o json
    """
    try:
        config = load_config(
            config_path, env=env, learner=learner, total_steps=total_steps, seed=seed, out_dir=out_dir
        )
        summary = Trainer(config).run()

        if output == 'json':
            result = {
                "steps": summary.steps,
                "out_dir": str(summary.out_dir),
                "final_return": _json_value(summary.final_return),
                "counts": vars(summary.counts),
            }
            click.echo(json.dumps(result, indent=2))
        else:
            click.echo("Training finished")
            click.echo(f"Environment: {config.env} ({config.learner})")
            click.echo(f"Steps: {summary.steps}")
            click.echo(f"Final eval return: {summary.final_return:.4f}")
            click.echo(f"Policy updates: {summary.counts.policy}")
            click.echo(f"Output: {summary.out_dir}")

    except Exception as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)


@main.command()
@click.argument('suite', type=click.Choice(SUITE_NAMES))
@click.option('--quick', is_flag=True, help='Smaller sample sizes for a fast smoke run')
@click.option('--seed', '-s', type=int, default=0, help='Seed for the statistical checks')
@click.option('--output', '-o', type=click.Choice(['text', 'json']), default='text',
              help='Output format')
def verify(suite, quick, seed, output):
    """Run verification checks and exit non-zero on any failure

    SUITE: estimators, baseline, critic, policy, theorems or all

    Examples:

        dpo verify estimators

        dpo verify all --quick -o json
    """
    try:
        results = run_suite(suite, quick=quick, seed=seed)
    except Exception as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)

    if output == 'json':
        click.echo(json.dumps([result.to_dict() for result in results], indent=2))
    else:
        click.echo(format_report(results))

    if not all(result.passed for result in results):
        sys.exit(1)


@main.command()
@click.argument('run_dir', type=click.Path(exists=True, file_okay=False))
@click.option('--samples', type=int, default=10_000, help='Replay states for the off-policy estimates')
@click.option('--seed', '-s', type=int, default=0, help='Seed for fresh actions')
@click.option('--output', '-o', type=click.Choice(['text', 'json']), default='text',
              help='Output format')
def diagnose(run_dir, samples, seed, output):
    """Compute stability and variance diagnostics of a finished run

    RUN_DIR: Output directory of a previous 'dpo train'

    Writes RUN_DIR/diagnostics.csv.
    """
    try:
        results = run_diagnostics(run_dir, samples=samples, seed=seed)

        if output == 'json':
            click.echo(json.dumps({k: _json_value(v) for k, v in results.items()}, indent=2))
        else:
            for name, value in results.items():
                click.echo(f"{name}: {value:.6g}")

    except Exception as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)


@main.command()
@click.option('--reset', is_flag=True, help='Overwrite an existing configuration')
@click.option('--path', type=click.Path(dir_okay=False), help='Write to this file instead of ~/.dpo-lab/config.cfg')
def config(reset, path):
    """Write a configuration file holding every default value

    Examples:

        dpo config                  # ~/.dpo-lab/config.cfg

        dpo config --path dpo.cfg   # local file picked up from the working directory
    """
    try:
        target = Path(path) if path else get_config_path()
        exists = target.exists() if path else has_config()
        if exists and not reset:
            click.echo(f"Configuration already exists at: {target}")
            click.echo("Use --reset to overwrite it.")
            return

        written = write_default_config(path)
        click.echo(f"Configuration written to: {written}")

    except Exception as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)


if __name__ == '__main__':
    main()
