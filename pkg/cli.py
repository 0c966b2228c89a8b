#!/usr/bin/env python3
"""
Command Line Interface for the Mining Complex Hyper-Heuristic

This CLI provides:
- Synthetic instance generation
- Running experiment matrices (variant x seed)
- Re-building reports and plot data from finished cells
- Brute-force optima for tiny instances
"""

import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional

import click
from dotenv import load_dotenv
from pydantic import ValidationError

from complex_model import (
    GeneratorConfig,
    InvalidConfigError,
    MalformedSolutionError,
    StructuralError,
    generate_synthetic_instance,
    load_instance,
    save_instance,
)
from experiment_harness import (
    ExperimentConfig,
    enumerate_optimum,
    load_config,
    load_summaries,
    run_experiment,
    write_report,
)
from hyper_heuristic import SearchConfigError
from rl_agents import UnknownVariantError

# Load environment variables
load_dotenv()

logging.basicConfig(
    level=os.getenv('MCHH_LOG_LEVEL', 'INFO').upper(),
    format='%(asctime)s %(levelname)s %(name)s: %(message)s',
)
logger = logging.getLogger(__name__)

CONFIG_ERRORS = (ValidationError, InvalidConfigError, SearchConfigError, UnknownVariantError,
                 StructuralError, MalformedSolutionError, json.JSONDecodeError, FileNotFoundError)


def _default_workers() -> int:
    try:
        return max(1, int(os.getenv('MCHH_WORKERS', '1')))
    except ValueError:
        return 1


def _fail(message: str, error: Exception):
    code = 1 if isinstance(error, CONFIG_ERRORS) else 2
    click.echo(f"❌ {message}: {error}", err=True)
    click.echo(json.dumps({'success': False, 'error': str(error), 'type': type(error).__name__}, indent=2))
    sys.exit(code)


def _read_json(path: str) -> Dict[str, Any]:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def _generator_config(path: Optional[str]) -> GeneratorConfig:
    """A GeneratorConfig file, or the generator section of an experiment config"""
    if not path:
        return GeneratorConfig()
    data = _read_json(path)
    if 'generator' in data:
        data = data['generator'] or {}
    return GeneratorConfig.model_validate(data)


@click.group()
def cli():
    """Mining complex hyper-heuristic experiments"""
    pass


@cli.command()
@click.option('--config', 'config_path', type=click.Path(), help='Generator (or experiment) config JSON')
@click.option('--seed', default=0, type=int, help='Instance seed')
@click.option('--out', default=None, help='Output instance JSON (defaults to $MCHH_OUT_DIR/instance.json)')
def generate(config_path, seed, out):
    """Generate a synthetic mining complex instance"""
    try:
        config = _generator_config(config_path)
        instance = generate_synthetic_instance(config, seed)
        path = Path(out) if out else Path(os.getenv('MCHH_OUT_DIR', 'results')) / 'instance.json'
        save_instance(instance, path)
    except Exception as e:
        _fail("Instance generation failed", e)
    click.echo(f"✅ Generated instance with {instance.n_blocks} blocks, {instance.n_scenarios} scenarios, "
               f"{instance.horizon} periods")
    click.echo(json.dumps({
        'success': True,
        'path': str(path),
        'blocks': instance.n_blocks,
        'scenarios': instance.n_scenarios,
        'periods': instance.horizon,
        'groups': len(instance.groups),
        'locations': len(instance.locations),
    }, indent=2, default=str))


@cli.command()
@click.option('--config', 'config_path', required=True, type=click.Path(), help='Experiment config JSON')
@click.option('--seed', default=None, type=int, help='Run this single seed instead of the configured list')
@click.option('--workers', default=None, type=int, help='Concurrent cells (defaults to $MCHH_WORKERS)')
@click.option('--out', default=None, help='Output directory (defaults to config, then $MCHH_OUT_DIR)')
def run(config_path, seed, workers, out):
    """Run every (variant, seed) cell of an experiment"""
    try:
        data = _read_json(config_path)
        if seed is not None:
            data['seeds'] = [seed]
        data['workers'] = workers or data.get('workers') or _default_workers()
        data.setdefault('output_dir', os.getenv('MCHH_OUT_DIR', 'results'))
        config = ExperimentConfig.model_validate(data)
        out_dir = out or config.output_dir
        summaries = run_experiment(config, out_dir)
    except Exception as e:
        _fail("Experiment failed", e)
    click.echo(f"✅ Completed {len(summaries)} cell(s) in {out_dir}")
    click.echo(json.dumps({
        'success': True,
        'output_dir': str(out_dir),
        'cells': [{'variant': s.variant, 'seed': s.seed, 'best_f': s.best_f, 'iterations': s.iterations}
                  for s in summaries],
    }, indent=2, default=str))


@cli.command()
@click.option('--config', 'config_path', required=True, type=click.Path(), help='Experiment config JSON')
@click.option('--out', default=None, help='Experiment output directory')
def report(config_path, out):
    """Rebuild summaries, quantile report and plot data from finished cells"""
    try:
        config = load_config(config_path)
        out_dir = Path(out or config.output_dir)
        summaries = load_summaries(out_dir)
        if not summaries:
            raise FileNotFoundError(f"no finished cells under {out_dir / 'cells'}")
        result = write_report(config, summaries, out_dir)
    except Exception as e:
        _fail("Report failed", e)
    click.echo(f"✅ Report for {len(summaries)} run(s), Z* = {result['z_star']:.10g}")
    click.echo(json.dumps({
        'success': True,
        'z_star': result['z_star'],
        'plots': result['plots'],
        'report': result['report'].to_dict(orient='records'),
    }, indent=2, default=str))


@cli.command()
@click.option('--config', 'config_path', type=click.Path(), help='Generator (or experiment) config JSON')
@click.option('--instance', 'instance_path', type=click.Path(), help='Instance JSON (overrides --config)')
@click.option('--seed', default=None, type=int, help='Instance seed when generating (defaults to the config instance_seed)')
@click.option('--out', default=None, help='Write the optimum as JSON to this file')
def oracle(config_path, instance_path, seed, out):
    """Enumerate every feasible schedule and policy of a tiny instance"""
    try:
        if instance_path:
            instance = load_instance(instance_path)
        else:
            if seed is None:
                seed = _read_json(config_path).get('instance_seed', 0) if config_path else 0
            instance = generate_synthetic_instance(_generator_config(config_path), seed)
        optimum = enumerate_optimum(instance)
        payload = {
            'success': True,
            'objective': optimum['objective'],
            'candidates': optimum['candidates'],
            'period': optimum['period'],
            'destination': optimum['destination'],
        }
        if out:
            Path(out).parent.mkdir(parents=True, exist_ok=True)
            with open(out, 'w', encoding='utf-8') as f:
                json.dump(payload, f, indent=2, default=str)
    except Exception as e:
        _fail("Oracle failed", e)
    click.echo(f"✅ Optimum {optimum['objective']:.10g} over {optimum['candidates']} candidates")
    click.echo(json.dumps(payload, indent=2, default=str))


if __name__ == '__main__':
    cli()
