#!/usr/bin/env python3
"""
Test script for the experiment harness

Gap metrics and quantile reports on hand-made run summaries, plot bands
from small trace files, the brute-force oracle, and a complete miniature
experiment written to a temporary directory.
"""

import json
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from dotenv import load_dotenv

from complex_model import GeneratorConfig, InvalidConfigError, generate_synthetic_instance
from experiment_harness import (
    ExperimentConfig,
    RunSummary,
    _stats,
    apply_gap_metrics,
    emit_plot_data,
    enumerate_optimum,
    load_summaries,
    load_config,
    reduction_pct,
    resolve_reference,
    run_experiment,
    summarize,
    validate_variants,
)
from flow_evaluator import FlowEvaluator
from hyper_heuristic import SearchConfig
from rl_agents import AgentConfig, UnknownVariantError
from toy_instances import oracle_config

# Load environment variables
load_dotenv()


def _summary(variant, seed, initial_f, events, iterations=1000, clock=10.0, trace_path=""):
    return RunSummary(variant=variant, seed=seed, iterations=iterations, clock_seconds=clock, wall_seconds=clock,
                      initial_f=initial_f, best_f=max([initial_f] + [e['best_f'] for e in events]),
                      trace_path=trace_path, epochs_path="", new_bests=events)


def _event(it, best_f):
    return {'iter': it, 'clock': it / 100.0, 'wall': it / 50.0, 'best_f': best_f}


def _write_trace(path, points):
    pd.DataFrame({'iter': [p[0] for p in points], 'best_f': [p[1] for p in points]}).to_csv(path, index=False)
    return str(path)


def _mini_config(out_dir, **overrides) -> ExperimentConfig:
    params = dict(
        generator=oracle_config(), instance_seed=1, variants=["baseline", "a2c"], seeds=[0, 1],
        search=SearchConfig(max_iterations=200, epoch_length=20),
        agent=AgentConfig(hidden=(8, 8), window=2), output_dir=str(out_dir),
    )
    params.update(overrides)
    return ExperimentConfig(**params)


def test_percentile_statistics():
    print("🧪 Testing quantile statistics")
    stats = _stats(np.array([100.0, 200.0, 300.0]))
    assert stats['p50'] == 200.0
    assert stats['mean'] == 200.0
    assert stats['p10'] == pytest.approx(120.0)
    assert stats['p90'] == pytest.approx(280.0)
    assert _stats(np.array([42.0]))['std'] == 0.0


def test_reduction_percentage():
    assert reduction_pct(100.0, 50.0) == 50.0
    assert reduction_pct(100.0, 150.0) == -50.0


def test_gap_metrics_use_first_hit():
    print("🧪 Testing time-to-gap extraction")
    run = _summary("baseline", 0, 50.0, [_event(10, 98.5), _event(30, 99.5), _event(60, 100.0)])
    apply_gap_metrics([run], 100.0, [0.01, 0.02])
    assert run.iter_to_gap == {'0.01': 30, '0.02': 10}
    assert run.time_to_gap['0.02'] == pytest.approx(0.1)
    assert run.wall_to_gap['0.01'] == pytest.approx(0.6)


def test_start_within_gap_counts_as_zero():
    run = _summary("baseline", 0, 99.9, [])
    apply_gap_metrics([run], 100.0, [0.01])
    assert run.iter_to_gap['0.01'] == 0


def test_censored_runs_count_at_their_bound():
    print("🧪 Testing censored runs")
    reached = _summary("baseline", 0, 50.0, [_event(100, 100.0)])
    never = _summary("baseline", 1, 50.0, [_event(10, 80.0)], iterations=500, clock=5.0)
    report = summarize([reached, never], 100.0, [0.01])
    row = report[(report['metric'] == 'iterations')].iloc[0]
    assert row['runs'] == 2 and row['reached'] == 1 and row['censored'] == 1
    assert row['mean'] == pytest.approx(300.0)
    time_row = report[(report['metric'] == 'time_s')].iloc[0]
    assert time_row['p50'] == pytest.approx((1.0 + 5.0) / 2)


def test_report_reduction_against_baseline():
    runs = [
        _summary("baseline", 0, 0.0, [_event(100, 100.0)]),
        _summary("baseline", 1, 0.0, [_event(100, 100.0)]),
        _summary("ppo", 0, 0.0, [_event(50, 100.0)]),
        _summary("ppo", 1, 0.0, [_event(50, 100.0)]),
    ]
    report = summarize(runs, 100.0, [0.01])
    ppo = report[(report['variant'] == 'ppo') & (report['metric'] == 'iterations')].iloc[0]
    assert ppo['reduction_pct'] == pytest.approx(50.0)
    base = report[(report['variant'] == 'baseline') & (report['metric'] == 'iterations')].iloc[0]
    assert math.isnan(base['reduction_pct'])
    assert base['std'] == 0.0


def test_reference_resolution(tmp_path):
    print("🧪 Testing reference objective resolution")
    runs = [_summary("baseline", 0, 1.0, [_event(5, 7.0)]), _summary("baseline", 1, 1.0, [_event(5, 9.0)])]
    config = _mini_config(tmp_path)
    assert resolve_reference(config, runs) == 9.0
    assert resolve_reference(_mini_config(tmp_path, reference_objective=12.5), runs) == 12.5
    ref = tmp_path / "oracle.json"
    ref.write_text(json.dumps({'objective': 11.0}), encoding='utf-8')
    assert resolve_reference(_mini_config(tmp_path, reference_file=str(ref)), runs) == 11.0


def test_plot_bands_are_ordered(tmp_path):
    print("🧪 Testing plot bands")
    runs = []
    for seed, scale in enumerate((1.0, 2.0, 3.0, 4.0)):
        path = _write_trace(tmp_path / f"trace{seed}.csv", [(0, 100 - 40 * scale), (10, 100 - 20 * scale),
                                                            (20, 100 - 5 * scale)])
        runs.append(_summary("baseline", seed, 0.0, [], trace_path=path))
    (path,) = emit_plot_data(runs, 100.0, tmp_path)
    bands = pd.read_csv(path)
    assert bands['iter'].tolist() == [0, 10, 20]
    assert np.all(bands['p10'] <= bands['p50']) and np.all(bands['p50'] <= bands['p90'])
    assert bands['runs'].tolist() == [4, 4, 4]
    assert bands['p50'].iloc[-1] == pytest.approx(np.median([0.05, 0.10, 0.15, 0.20]))


def test_unknown_variant_rejected():
    validate_variants(["baseline", "A2C", "sac"])
    with pytest.raises(UnknownVariantError):
        validate_variants(["baseline", "dqn"])


def test_config_requires_an_instance():
    with pytest.raises(ValueError):
        ExperimentConfig(variants=["baseline"])
    with pytest.raises(ValueError):
        ExperimentConfig(generator=oracle_config(), seeds=[])


def test_shipped_configs_fill_the_sac_batch():
    for name in ("experiment.example.json", "experiment.acceptance.json"):
        config = load_config(Path(__file__).parent / name)
        epochs = config.search.max_iterations // config.search.epoch_length
        assert "sac" in config.variants
        assert epochs >= config.agent.batch_size, name


def test_acceptance_config_scale():
    print("🧪 Testing acceptance experiment scale")
    config = load_config(Path(__file__).parent / "experiment.acceptance.json")
    grid = config.generator.grid
    assert 4500 <= grid[0] * grid[1] * grid[2] <= 5500
    assert (config.generator.n_periods, config.generator.n_scenarios) == (10, 10)
    assert len(config.seeds) == 10
    assert set(config.variants) == {"baseline", "a2c", "ppo", "sac"}
    assert 0.02 in config.gap_thresholds


def test_oracle_refuses_free_streams():
    print("🧪 Testing oracle domain")
    config = GeneratorConfig(grid=(2, 2, 2), n_processors=2, n_stockpiles=1, n_scenarios=2, n_periods=2,
                             clusters_per_mine=2)
    with pytest.raises(InvalidConfigError):
        enumerate_optimum(generate_synthetic_instance(config, 0))


def test_oracle_candidate_limit():
    with pytest.raises(InvalidConfigError):
        enumerate_optimum(generate_synthetic_instance(oracle_config(), 0), max_candidates=10)


def test_oracle_optimum_is_attained():
    print("🧪 Testing oracle optimum")
    instance = generate_synthetic_instance(oracle_config(), 2)
    optimum = enumerate_optimum(instance)
    assert FlowEvaluator(instance).evaluate(optimum['solution']) == pytest.approx(optimum['objective'], rel=1e-12)
    assert len(optimum['period']) == instance.n_blocks


def test_miniature_experiment(tmp_path):
    print("🧪 Testing a miniature experiment")
    config = _mini_config(tmp_path)
    summaries = run_experiment(config)
    assert len(summaries) == 4
    assert (tmp_path / "instance.json").exists()
    for s in summaries:
        cell = tmp_path / "cells" / s.cell
        assert (cell / "summary.json").exists()
        trace = pd.read_csv(cell / "trace.csv")
        assert list(trace.columns[:3]) == ["iter", "heuristic", "delta_f"]
        assert s.best_f >= s.initial_f
        assert s.iterations == 200
    for name in ("summaries.csv", "report.csv", "plot_baseline.csv", "plot_a2c.csv"):
        assert (tmp_path / name).exists()
    report = pd.read_csv(tmp_path / "report.csv")
    assert set(report['variant']) == {"baseline", "a2c"}
    assert len(load_summaries(tmp_path)) == 4


def test_completed_cells_are_skipped(tmp_path):
    config = _mini_config(tmp_path, variants=["baseline"], seeds=[0])
    run_experiment(config)
    summary_path = tmp_path / "cells" / "baseline-seed0" / "summary.json"
    data = json.loads(summary_path.read_text(encoding='utf-8'))
    data['best_f'] = 12345.0
    summary_path.write_text(json.dumps(data), encoding='utf-8')
    (again,) = run_experiment(config)
    assert again.best_f == 12345.0


def test_concurrent_cells_match_serial(tmp_path):
    serial = run_experiment(_mini_config(tmp_path / "serial", workers=1))
    threaded = run_experiment(_mini_config(tmp_path / "threaded", workers=3))
    for a, b in zip(serial, threaded):
        assert a.cell == b.cell
        assert a.best_f == b.best_f
        assert pd.read_csv(a.trace_path).equals(pd.read_csv(b.trace_path))


if __name__ == "__main__":
    import tempfile

    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    passed = 0
    for name, fn in tests:
        try:
            if fn.__code__.co_argcount:
                with tempfile.TemporaryDirectory() as tmp:
                    fn(Path(tmp))
            else:
                fn()
            print(f"✅ {name}")
            passed += 1
        except Exception as e:
            print(f"❌ {name}: {e}")
    print(f"\nOverall: {passed}/{len(tests)} tests passed")
