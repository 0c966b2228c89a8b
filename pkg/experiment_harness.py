#!/usr/bin/env python3
"""
Experiment Harness

Runs (variant, seed) cells of the hyper-heuristic on one instance, measures
how fast each run closes the gap to a reference objective and reports
quantile tables and plottable quantile bands.
"""

import itertools
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from complex_model import (
    GeneratorConfig,
    InvalidConfigError,
    MiningComplexInstance,
    NOT_MINED,
    Solution,
    build_initial_solution,
    generate_synthetic_instance,
    load_instance,
    save_instance,
)
from flow_evaluator import FlowEvaluator
from hyper_heuristic import AnnealingSchedule, SearchConfig, run
from perturbations import RegistryConfig, adjustable_arcs, build_registry
from rl_agents import VARIANTS, AgentConfig, UnknownVariantError, make_agent

logger = logging.getLogger(__name__)


class ExperimentConfig(BaseModel):
    """Instance source, variant by seed matrix, search settings and report options"""
    generator: Optional[GeneratorConfig] = None
    instance_path: Optional[str] = None
    instance_seed: int = 0
    variants: List[str] = Field(default_factory=lambda: ["baseline"])
    seeds: List[int] = Field(default_factory=lambda: [0])
    search: SearchConfig = Field(default_factory=SearchConfig)
    schedule: AnnealingSchedule = Field(default_factory=AnnealingSchedule)
    agent: AgentConfig = Field(default_factory=AgentConfig)
    registry: RegistryConfig = Field(default_factory=RegistryConfig)
    reference_objective: Optional[float] = None
    reference_file: Optional[str] = None
    output_dir: str = "results"
    workers: int = 1
    eval_workers: int = 1
    trace_stride: int = 10
    gap_thresholds: List[float] = Field(default_factory=lambda: [0.01, 0.02])
    agent_checkpoint: Optional[str] = None
    save_agents: bool = False

    @model_validator(mode="after")
    def _valid(self):
        if not self.variants:
            raise ValueError("at least one variant is required")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.generator is None and self.instance_path is None:
            raise ValueError("either generator or instance_path must be given")
        if self.workers < 1 or self.eval_workers < 1 or self.trace_stride < 1:
            raise ValueError("workers, eval_workers and trace_stride must be at least 1")
        return self


@dataclass
class RunSummary:
    """Outcome of one (variant, seed) cell as stored in its summary.json"""
    variant: str
    seed: int
    iterations: int
    clock_seconds: float
    wall_seconds: float
    initial_f: float
    best_f: float
    trace_path: str
    epochs_path: str
    new_bests: List[Dict[str, float]] = field(default_factory=list)
    iter_to_gap: Dict[str, Optional[int]] = field(default_factory=dict)
    time_to_gap: Dict[str, Optional[float]] = field(default_factory=dict)
    wall_to_gap: Dict[str, Optional[float]] = field(default_factory=dict)

    @property
    def cell(self) -> str:
        return f"{self.variant}-seed{self.seed}"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunSummary":
        return cls(**data)


def validate_variants(variants: Sequence[str]):
    unknown = [v for v in variants if v.lower() not in VARIANTS]
    if unknown:
        raise UnknownVariantError(f"unknown variant(s) {unknown}; expected one of {', '.join(VARIANTS)}")


def load_config(path) -> ExperimentConfig:
    """Parse and validate an experiment JSON file"""
    with open(path, 'r', encoding='utf-8') as f:
        return ExperimentConfig.model_validate(json.load(f))


def resolve_instance(config: ExperimentConfig) -> MiningComplexInstance:
    if config.instance_path:
        logger.info(f"Loading instance from {config.instance_path}")
        return load_instance(config.instance_path)
    return generate_synthetic_instance(config.generator, config.instance_seed)


def _ensure_writable(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    marker = out / ".write_check"
    marker.write_text("ok", encoding="utf-8")
    marker.unlink()


def _write_json_atomic(path: Path, payload: Dict[str, Any]):
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, default=str)
    os.replace(tmp, path)


def run_cell(config: ExperimentConfig, instance: MiningComplexInstance, variant: str, seed: int,
             out: Path) -> RunSummary:
    """One (variant, seed) run; skipped when its summary already exists"""
    cell_dir = out / "cells" / f"{variant}-seed{seed}"
    summary_path = cell_dir / "summary.json"
    if summary_path.exists():
        logger.info(f"Skipping completed cell {variant}-seed{seed}")
        with open(summary_path, 'r', encoding='utf-8') as f:
            return RunSummary.from_dict(json.load(f))

    logger.info(f"Running cell {variant}-seed{seed}")
    cell_dir.mkdir(parents=True, exist_ok=True)
    registry = build_registry(instance, config.registry)
    agent = make_agent(variant, len(registry), config.agent, seed, config.agent_checkpoint)
    initial = build_initial_solution(instance, seed)
    result = run(instance, initial, registry, config.search, config.schedule, agent=agent, seed=seed,
                 registry_config=config.registry, workers=config.eval_workers)

    trace_path = result.trace.write_csv(cell_dir / "trace.csv", stride=config.trace_stride)
    epochs_path = result.trace.write_epochs(cell_dir / "epochs.jsonl")
    if agent is not None and config.save_agents:
        agent.save(cell_dir / "agent.bin")
    summary = RunSummary(
        variant=variant, seed=seed, iterations=result.iterations, clock_seconds=result.clock_seconds,
        wall_seconds=result.wall_seconds, initial_f=result.initial_objective, best_f=result.best_objective,
        trace_path=str(trace_path), epochs_path=str(epochs_path), new_bests=result.trace.new_bests,
    )
    _write_json_atomic(summary_path, summary.to_dict())
    logger.info(f"Finished cell {variant}-seed{seed}: best={summary.best_f:.6g} in {summary.iterations} iterations")
    return summary


def resolve_reference(config: ExperimentConfig, summaries: Sequence[RunSummary]) -> float:
    """Pinned Z*, a reference file, or the best objective over all runs"""
    if config.reference_objective is not None:
        return float(config.reference_objective)
    if config.reference_file:
        with open(config.reference_file, 'r', encoding='utf-8') as f:
            return float(json.load(f)['objective'])
    return max(s.best_f for s in summaries)


def gap(z_star: float, f: float) -> float:
    """Relative gap of f below the reference objective"""
    return (z_star - f) / abs(z_star) if z_star != 0 else math.inf


def apply_gap_metrics(summaries: Sequence[RunSummary], z_star: float, thresholds: Sequence[float]):
    """First iteration / clock / wall time at which each run's best is within each gap threshold"""
    for s in summaries:
        s.iter_to_gap, s.time_to_gap, s.wall_to_gap = {}, {}, {}
        events = sorted(s.new_bests, key=lambda e: e['iter'])
        start_hit = gap(z_star, s.initial_f)
        for threshold in thresholds:
            key = f"{threshold:g}"
            hit = None
            if start_hit <= threshold:
                hit = {'iter': 0, 'clock': 0.0, 'wall': 0.0}
            else:
                hit = next((e for e in events if gap(z_star, e['best_f']) <= threshold), None)
            s.iter_to_gap[key] = None if hit is None else int(hit['iter'])
            s.time_to_gap[key] = None if hit is None else float(hit['clock'])
            s.wall_to_gap[key] = None if hit is None else float(hit['wall'])


def summaries_frame(summaries: Sequence[RunSummary]) -> pd.DataFrame:
    rows = []
    for s in summaries:
        row = {'variant': s.variant, 'seed': s.seed, 'iterations': s.iterations,
               'clock_seconds': s.clock_seconds, 'wall_seconds': s.wall_seconds,
               'initial_f': s.initial_f, 'best_f': s.best_f, 'trace_path': s.trace_path}
        for key, value in s.iter_to_gap.items():
            row[f"iter_gap_{key}"] = value
            row[f"time_gap_{key}"] = s.time_to_gap.get(key)
            row[f"wall_gap_{key}"] = s.wall_to_gap.get(key)
        rows.append(row)
    return pd.DataFrame(rows)


def _stats(values: np.ndarray) -> Dict[str, float]:
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    p10, p50, p90 = np.percentile(values, [10, 50, 90])
    return {'mean': float(np.mean(values)), 'std': 0.0 if math.isnan(std) else std,
            'p10': float(p10), 'p50': float(p50), 'p90': float(p90)}


def summarize(summaries: Sequence[RunSummary], z_star: float,
              thresholds: Sequence[float] = (0.01, 0.02)) -> pd.DataFrame:
    """Per variant and threshold: mean, std and P10/P50/P90 of iterations and time to gap"""
    if z_star <= 0:
        logger.warning(f"Reference objective {z_star:.6g} is not positive; gaps use |Z*|")
    apply_gap_metrics(summaries, z_star, thresholds)
    rows = []
    variants = list(dict.fromkeys(s.variant for s in summaries))
    for variant in variants:
        runs = [s for s in summaries if s.variant == variant]
        for threshold in thresholds:
            key = f"{threshold:g}"
            for metric, lookup, bound in (
                ('iterations', lambda s: s.iter_to_gap[key], lambda s: s.iterations),
                ('time_s', lambda s: s.time_to_gap[key], lambda s: s.clock_seconds),
            ):
                reached = [lookup(s) for s in runs if lookup(s) is not None]
                # runs that never reached the gap count at their stopping bound
                values = np.array([lookup(s) if lookup(s) is not None else bound(s) for s in runs], dtype=float)
                censored = len(runs) - len(reached)
                if censored and metric == 'iterations':
                    logger.warning(f"{variant}: {censored}/{len(runs)} run(s) never reached gap {key}; censored")
                rows.append({'variant': variant, 'threshold': threshold, 'metric': metric, 'runs': len(runs),
                             'reached': len(reached), 'censored': censored, **_stats(values)})
    report = pd.DataFrame(rows)
    report['reduction_pct'] = np.nan
    if 'baseline' in variants:
        for idx, row in report.iterrows():
            if row['variant'] == 'baseline':
                continue
            base = report[(report['variant'] == 'baseline') & (report['threshold'] == row['threshold'])
                          & (report['metric'] == row['metric'])]
            if len(base) and base['p50'].iloc[0] > 0:
                report.at[idx, 'reduction_pct'] = reduction_pct(float(base['p50'].iloc[0]), float(row['p50']))
    return report


def reduction_pct(baseline_median: float, variant_median: float) -> float:
    return 100.0 * (baseline_median - variant_median) / baseline_median


def emit_plot_data(summaries: Sequence[RunSummary], z_star: float, out_dir) -> List[Path]:
    """Per variant, iteration -> P10/P50/P90 of the best-f gap across seeds, written as plot_<variant>.csv"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for variant in dict.fromkeys(s.variant for s in summaries):
        columns = {}
        for s in summaries:
            if s.variant != variant:
                continue
            trace = pd.read_csv(s.trace_path)
            columns[s.seed] = pd.Series(
                [(z_star - f) / abs(z_star) for f in trace['best_f']], index=trace['iter'].to_numpy()
            )
        frame = pd.DataFrame(columns).sort_index().ffill()
        bands = pd.DataFrame({
            'iter': frame.index.to_numpy(),
            'p10': frame.quantile(0.10, axis=1, interpolation='linear').to_numpy(),
            'p50': frame.quantile(0.50, axis=1, interpolation='linear').to_numpy(),
            'p90': frame.quantile(0.90, axis=1, interpolation='linear').to_numpy(),
            'runs': frame.notna().sum(axis=1).to_numpy(),
        })
        path = out_dir / f"plot_{variant}.csv"
        bands.to_csv(path, index=False, float_format="%.17g")
        paths.append(path)
    return paths


def load_summaries(out_dir) -> List[RunSummary]:
    """Every finished cell under out_dir, in cell-name order"""
    summaries = []
    for path in sorted(Path(out_dir).glob("cells/*/summary.json")):
        with open(path, 'r', encoding='utf-8') as f:
            summaries.append(RunSummary.from_dict(json.load(f)))
    return summaries


def write_report(config: ExperimentConfig, summaries: Sequence[RunSummary], out_dir) -> Dict[str, Any]:
    """Write summaries.csv, report.csv and the plot bands; returns Z*, the report frame and the plot paths"""
    out_dir = Path(out_dir)
    z_star = resolve_reference(config, summaries)
    report = summarize(summaries, z_star, config.gap_thresholds)
    summaries_frame(summaries).to_csv(out_dir / "summaries.csv", index=False)
    report.to_csv(out_dir / "report.csv", index=False)
    plots = emit_plot_data(summaries, z_star, out_dir)
    logger.info(f"Report written to {out_dir} (Z*={z_star:.6g}, {len(summaries)} runs)")
    return {'z_star': z_star, 'report': report, 'plots': [str(p) for p in plots]}


def run_experiment(config: ExperimentConfig, output_dir: Optional[str] = None) -> List[RunSummary]:
    """Execute every (variant, seed) cell, concurrently up to config.workers"""
    validate_variants(config.variants)
    out = Path(output_dir or config.output_dir)
    _ensure_writable(out)
    instance = resolve_instance(config)
    instance_file = out / "instance.json"
    if not instance_file.exists():
        save_instance(instance, instance_file)

    cells = [(v.lower(), int(s)) for v in config.variants for s in config.seeds]
    logger.info(f"Experiment: {len(cells)} cell(s), {config.workers} worker(s), output {out}")
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            summaries = list(pool.map(lambda cell: run_cell(config, instance, cell[0], cell[1], out), cells))
    else:
        summaries = [run_cell(config, instance, v, s, out) for v, s in cells]
    write_report(config, summaries, out)
    return summaries


# --- brute-force oracle -------------------------------------------------------------

def _schedules(instance: MiningComplexInstance):
    """Every precedence-feasible period assignment, predecessors decided first"""
    order = [int(b) for b in instance.block_order]
    period = np.full(instance.n_blocks, NOT_MINED, dtype=np.int64)

    def extend(i: int):
        if i == len(order):
            yield period.copy()
            return
        b = order[i]
        preds = instance.predecessors[b]
        options = [NOT_MINED]
        if not len(preds) or np.all(period[preds] != NOT_MINED):
            earliest = int(period[preds].max()) if len(preds) else 0
            options += list(range(earliest, instance.horizon))
        for t in options:
            period[b] = t
            yield from extend(i + 1)
        period[b] = NOT_MINED

    yield from extend(0)


def enumerate_optimum(instance: MiningComplexInstance, max_candidates: int = 2_000_000) -> Dict[str, Any]:
    """Exhaustive search over (x, z) for instances whose stream proportions are all forced"""
    if adjustable_arcs(instance):
        raise InvalidConfigError("oracle needs forced processing streams; instance has free proportions")
    T, S = instance.horizon, instance.n_scenarios
    slots = [(g.id, t) for g in instance.groups for t in range(T)]
    choices = [instance.groups[g].destinations for g, _t in slots]
    z_count = math.prod(len(c) for c in choices)
    schedules = list(_schedules(instance))
    if len(schedules) * z_count > max_candidates:
        raise InvalidConfigError(
            f"{len(schedules)} schedules x {z_count} policies exceeds the oracle limit of {max_candidates}"
        )
    streams = np.ones((len(instance.arcs), T, S))
    evaluator = FlowEvaluator(instance)
    best_f, best = -math.inf, None
    for period in schedules:
        for combo in itertools.product(*choices):
            destination = np.zeros((len(instance.groups), T), dtype=np.int64)
            for (g, t), j in zip(slots, combo):
                destination[g, t] = j
            candidate = Solution(period, destination, streams,
                                 np.zeros((len(instance.mines), T), dtype=np.int64))
            f = evaluator.evaluate(candidate, check=False)
            if f > best_f:
                best_f, best = f, candidate.copy()
    logger.info(f"Oracle enumerated {len(schedules) * z_count} candidates; optimum {best_f:.10g}")
    return {
        'objective': best_f,
        'candidates': len(schedules) * z_count,
        'period': [int(t) + 1 if t != NOT_MINED else None for t in best.period],
        'destination': best.destination.tolist(),
        'solution': best,
    }
