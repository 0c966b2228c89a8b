#!/usr/bin/env python3
"""
Self-Learning Hyper-Heuristic Search

Simulated annealing over a registry of perturbation heuristics. Selection
probabilities come from a final score that blends an adaptive score
(improvement and damage rates per unit time) with the scores proposed by an
optional reinforcement-learning agent once per epoch.
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, model_validator

from complex_model import MiningComplexInstance, Solution
from flow_evaluator import FlowEvaluator
from perturbations import HeuristicDescriptor, HeuristicEngine, MIN_ELAPSED, RegistryConfig
from rl_agents import Agent

logger = logging.getLogger(__name__)

SEARCH_STREAM = 0x5348
TEMP_FLOOR = 1e-12
TRACE_COLUMNS = ["iter", "heuristic", "delta_f", "time_s", "accepted", "current_f", "best_f", "temp"]


class SearchConfigError(ValueError):
    """Raised when a search has no reachable stopping criterion"""


class SearchConfig(BaseModel):
    """Epoch length, score blending, tabu bounds and stopping rule of one search"""
    epoch_length: int = 100
    alpha: float = 0.3
    beta0: float = 0.5
    tabu_min: int = 5
    tabu_max: int = 20
    rl_weight: float = 0.5
    max_iterations: Optional[int] = 5000
    max_seconds: Optional[float] = None
    target_objective: Optional[float] = None
    clock: str = "work"

    @model_validator(mode="after")
    def _consistent(self):
        if self.epoch_length < 1:
            raise ValueError("epoch_length must be at least 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.rl_weight <= 1.0:
            raise ValueError("rl_weight must lie in [0, 1]")
        if not 0 <= self.tabu_min <= self.tabu_max:
            raise ValueError("tabu bounds need 0 <= tabu_min <= tabu_max")
        if self.clock not in ("work", "wall"):
            raise ValueError("clock must be 'work' or 'wall'")
        return self

    def check_stopping(self):
        if self.max_iterations is None and self.max_seconds is None:
            raise SearchConfigError("search needs max_iterations or max_seconds")


class AnnealingSchedule(BaseModel):
    temp0: Optional[float] = None
    k: float = 0.95
    interval: int = 500

    @model_validator(mode="after")
    def _valid(self):
        if not 0.0 <= self.k < 1.0:
            raise ValueError("cooling factor k must lie in [0, 1)")
        if self.interval < 1:
            raise ValueError("cooling interval must be at least 1")
        if self.temp0 is not None and self.temp0 <= 0:
            raise ValueError("temp0 must be positive")
        return self


@dataclass
class Scoreboard:
    """Per-heuristic measures, scores and tabu counters of a running search"""
    pi1: np.ndarray
    pi2: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    sf: np.ndarray
    eta: np.ndarray
    tabu: np.ndarray
    beta: float = 0.5
    history: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def fresh(cls, n: int, beta0: float = 0.5) -> "Scoreboard":
        uniform = np.full(n, 1.0 / n)
        return cls(np.zeros(n), np.zeros(n), uniform.copy(), np.zeros(n), uniform.copy(),
                   np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64), beta0)

    @property
    def n(self) -> int:
        return len(self.sf)

    def available(self) -> np.ndarray:
        return self.tabu == 0


def normalize(x: np.ndarray) -> np.ndarray:
    """Divide by the sum; zero-sum vectors stay zero"""
    total = x.sum()
    return x / total if total > 0 else np.zeros_like(x)


def select_heuristic(scoreboard: Scoreboard, rng: np.random.Generator) -> int:
    """Draw a non-tabu heuristic with probability proportional to its final score"""
    mask = scoreboard.available()
    if not mask.any():
        scoreboard.tabu[:] = 0
        mask = scoreboard.available()
    weights = np.where(mask, scoreboard.sf, 0.0)
    total = weights.sum()
    if total <= 0:
        weights, total = mask.astype(float), float(mask.sum())
    return int(rng.choice(scoreboard.n, p=weights / total))


def tick_tabu(scoreboard: Scoreboard):
    np.maximum(scoreboard.tabu - 1, 0, out=scoreboard.tabu)


def apply_tabu(scoreboard: Scoreboard, h: int, rng: np.random.Generator, tabu_min: int, tabu_max: int):
    """Make h tabu for a uniform number of iterations in [tabu_min, tabu_max]"""
    scoreboard.tabu[h] = int(rng.integers(tabu_min, tabu_max + 1))
    if not scoreboard.available().any():
        scoreboard.tabu[:] = 0
        logger.debug("All heuristics tabu; tabu list emptied")


def update_measures(scoreboard: Scoreboard, h: int, delta_f: float, elapsed: float):
    """Credit improvement per second to pi1 and small deteriorations to pi2"""
    elapsed = max(elapsed, MIN_ELAPSED)
    scoreboard.eta[h] += 1
    if delta_f > 0:
        scoreboard.pi1[h] += delta_f / elapsed
    elif delta_f < 0:
        scoreboard.pi2[h] += 1.0 / (abs(delta_f) * elapsed)


def sa_accept(delta_f: float, temp: float, rng: np.random.Generator) -> bool:
    """Improvements always pass without drawing; otherwise accept with probability exp(delta_f / temp)"""
    if delta_f > 0:
        return True
    return math.exp(delta_f / temp) > rng.random()


def adaptive_score(sf: np.ndarray, pi1: np.ndarray, pi2: np.ndarray, eta: np.ndarray, alpha: float,
                   beta: float) -> np.ndarray:
    safe_eta = np.where(eta > 0, eta, 1)
    blended = (1.0 - alpha) * sf + alpha * (beta * pi1 + (1.0 - beta) * pi2) / safe_eta
    return np.where(eta > 0, blended, sf)


def epoch_update(scoreboard: Scoreboard, config: SearchConfig, new_best: bool, agent: Optional[Agent] = None,
                 reward: float = 0.0, rng: Optional[np.random.Generator] = None) -> Dict[str, Any]:
    """Refresh the adaptive and final scores at an epoch boundary"""
    sb = scoreboard
    sb.beta = 1.0 if new_best else round(max(sb.beta - 0.1, 0.0), 10)
    pi1, pi2 = normalize(sb.pi1), normalize(sb.pi2)
    sb.s1 = adaptive_score(sb.sf, pi1, pi2, sb.eta, config.alpha, sb.beta)
    sb.history.append(np.stack([pi1, pi2, normalize(sb.s1)]))

    if agent is not None:
        sb.s2 = agent.agent_epoch_step(sb.history, reward, rng)
        sf = (1.0 - config.rl_weight) * sb.s1 + config.rl_weight * sb.s2
    else:
        sf = sb.s1.copy()
    sf = normalize(sf)
    if sf.sum() == 0:
        sf = np.full(sb.n, 1.0 / sb.n)
    sb.sf = sf

    sb.pi1 = np.zeros(sb.n)
    sb.pi2 = np.zeros(sb.n)
    sb.eta = np.zeros(sb.n, dtype=np.int64)
    sb.tabu[:] = 0
    return {'beta': sb.beta, 'reward': reward, 'new_best': bool(new_best),
            's1': sb.s1.tolist(), 's2': sb.s2.tolist() if agent is not None else None, 'sf': sb.sf.tolist()}


@dataclass
class SearchTrace:
    """Per-iteration rows, epoch snapshots and new-best events"""
    rows: List[tuple] = field(default_factory=list)
    epochs: List[Dict[str, Any]] = field(default_factory=list)
    new_bests: List[Dict[str, float]] = field(default_factory=list)

    def record(self, it: int, h: int, delta_f: float, clock: float, accepted: bool, current_f: float,
               best_f: float, temp: float):
        self.rows.append((it, h, delta_f, clock, accepted, current_f, best_f, temp))

    def to_frame(self, stride: int = 1) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows, columns=TRACE_COLUMNS)
        if stride > 1 and len(frame):
            keep = (frame["iter"] % stride == 0) | (frame.index == len(frame) - 1)
            frame = frame[keep].reset_index(drop=True)
        return frame

    def write_csv(self, path, stride: int = 1) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame(stride).to_csv(path, index=False, float_format="%.17g")
        return path

    def write_epochs(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            for record in self.epochs:
                f.write(json.dumps(record, default=str) + "\n")
        return path


@dataclass
class SearchResult:
    best_solution: Solution
    best_objective: float
    initial_objective: float
    trace: SearchTrace
    iterations: int
    clock_seconds: float
    wall_seconds: float
    final_temp: float
    scoreboard: Scoreboard

    def to_dict(self) -> Dict[str, Any]:
        return {
            'best_objective': self.best_objective,
            'initial_objective': self.initial_objective,
            'iterations': self.iterations,
            'clock_seconds': self.clock_seconds,
            'wall_seconds': self.wall_seconds,
            'final_temp': self.final_temp,
            'epochs': len(self.trace.epochs),
        }


def calibrate_temperature(deteriorations: Sequence[float]) -> float:
    """Temperature at which the median deterioration is accepted with probability 0.5"""
    if not deteriorations:
        return 1.0
    return max(float(np.median(deteriorations)) / math.log(2.0), TEMP_FLOOR)


def run(instance: MiningComplexInstance, initial: Solution, registry: Sequence[HeuristicDescriptor],
        config: SearchConfig, schedule: AnnealingSchedule, agent: Optional[Agent] = None, seed: int = 0,
        registry_config: Optional[RegistryConfig] = None, workers: int = 1) -> SearchResult:
    """Two-stage search; returns the best solution found and the full trace"""
    config.check_stopping()
    if not registry:
        raise SearchConfigError("registry is empty")
    n = len(registry)
    select_rng, accept_rng, tabu_rng, order_rng, agent_rng = (
        np.random.default_rng([int(seed), SEARCH_STREAM, k]) for k in range(5)
    )
    evaluator = FlowEvaluator(instance, workers=workers)
    current = initial.copy()
    initial_f = evaluator.evaluate(current)
    engine = HeuristicEngine(instance, registry, evaluator, seed, clock=config.clock, config=registry_config)
    sb = Scoreboard.fresh(n, config.beta0)
    trace = SearchTrace()

    best, best_f = current.copy(), initial_f
    it, clock = 0, 0.0
    start = time.perf_counter()
    epoch_reward, new_best = 0.0, False
    temp = schedule.temp0 if schedule.temp0 is not None else float("nan")

    def stop() -> bool:
        if config.max_iterations is not None and it >= config.max_iterations:
            return True
        if config.max_seconds is not None and time.perf_counter() - start >= config.max_seconds:
            return True
        return config.target_objective is not None and best_f >= config.target_objective

    def after_move(h: int, delta_f: float, accepted: bool):
        nonlocal best, best_f, new_best, epoch_reward
        if accepted:
            epoch_reward += delta_f
        if evaluator.value > best_f:
            best_f = evaluator.value
            best = current.copy()
            new_best = True
            trace.new_bests.append({'iter': it, 'clock': clock, 'wall': time.perf_counter() - start, 'best_f': best_f})
        trace.record(it, h, delta_f, clock, accepted, evaluator.value, best_f, temp)

    def maybe_epoch():
        nonlocal epoch_reward, new_best
        if it % config.epoch_length:
            return
        record = epoch_update(sb, config, new_best, agent, epoch_reward, agent_rng)
        record.update({'epoch': len(trace.epochs) + 1, 'iter': it, 'best_f': best_f})
        trace.epochs.append(record)
        logger.info(f"Epoch {record['epoch']} at iter {it}: best={best_f:.6g} beta={sb.beta:.1f}")
        epoch_reward, new_best = 0.0, False

    # Stage 1: every heuristic once, every move kept
    deteriorations: List[float] = []
    logger.info(f"Stage 1: applying {n} heuristics once (initial objective {initial_f:.6g})")
    for h in order_rng.permutation(n):
        if stop():
            break
        it += 1
        h = int(h)
        outcome = engine.apply(current, h)
        engine.accept()
        clock += outcome.elapsed
        update_measures(sb, h, outcome.delta_f, outcome.elapsed)
        if outcome.delta_f < 0:
            deteriorations.append(-outcome.delta_f)
        after_move(h, outcome.delta_f, True)
        maybe_epoch()

    if schedule.temp0 is None:
        temp = calibrate_temperature(deteriorations)
    logger.info(f"Stage 2: Temp0={temp:.6g}, best so far {best_f:.6g}")

    # Stage 2: score-driven selection with tabu and annealing
    while not stop():
        it += 1
        h = select_heuristic(sb, select_rng)
        tick_tabu(sb)
        outcome = engine.apply(current, h)
        clock += outcome.elapsed
        update_measures(sb, h, outcome.delta_f, outcome.elapsed)
        if outcome.delta_f <= 0:
            apply_tabu(sb, h, tabu_rng, config.tabu_min, config.tabu_max)
        accepted = sa_accept(outcome.delta_f, temp, accept_rng)
        if accepted:
            engine.accept()
        else:
            engine.reject(current, outcome)
        after_move(h, outcome.delta_f, accepted)
        if it % schedule.interval == 0:
            temp = max(temp * schedule.k, TEMP_FLOOR)
        maybe_epoch()

    if agent is not None:
        agent.end_episode(sb.history, epoch_reward, open_epoch=it % config.epoch_length != 0)
    wall = time.perf_counter() - start
    logger.info(f"Search finished after {it} iterations: best={best_f:.6g} ({wall:.2f}s)")
    return SearchResult(best, best_f, initial_f, trace, it, clock, wall, temp, sb)
