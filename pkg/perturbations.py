#!/usr/bin/env python3
"""
Low-Level Perturbation Heuristics

This module provides the moves the hyper-heuristic chooses from:
- Extraction-sequence moves with slope repair
- Cluster-destination switches
- Cut-off driven destination policies
- Processing-stream proportion noise
- The registry that enumerates them and the engine that applies, times and undoes them
"""

import logging
import time
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from complex_model import (
    InvalidConfigError,
    LocationKind,
    MiningComplexInstance,
    NOT_MINED,
    Solution,
)
from flow_evaluator import FlowEvaluator, Footprint

logger = logging.getLogger(__name__)

HEURISTIC_STREAM = 0x4845  # separates heuristic generators from the search streams
MIN_ELAPSED = 1e-6


class HeuristicFamily(str, Enum):
    """The four move types a heuristic can belong to"""
    EXTRACTION = "extraction-sequence"
    CLUSTER = "cluster-destination"
    POLICY = "destination-policy"
    STREAM = "processing-stream"


@dataclass(frozen=True)
class HeuristicDescriptor:
    """One registry entry: a family plus its fixed parameters"""
    id: int
    family: HeuristicFamily
    params: Tuple[Tuple[str, Any], ...] = ()

    @property
    def options(self) -> Dict[str, Any]:
        return dict(self.params)

    @property
    def name(self) -> str:
        return f"{self.family.value}[" + ",".join(f"{k}={v}" for k, v in self.params) + "]"


@dataclass
class PerturbationOutcome:
    """What one applied heuristic changed, its objective delta and its cost in clock seconds"""
    heuristic: int
    footprint: Footprint
    delta_f: float
    elapsed: float
    wall_seconds: float = 0.0

    @property
    def null(self) -> bool:
        """True when the move changed nothing"""
        return self.footprint.empty


class RegistryConfig(BaseModel):
    """Which parameterisations of each family are exposed"""
    size: Optional[int] = None
    extraction_modes: List[str] = Field(
        default_factory=lambda: ["advance", "delay", "random_earlier", "random_later", "toggle"])
    envelopes: List[str] = Field(default_factory=lambda: ["cone", "inverted_cone"])
    block_selection: List[str] = Field(default_factory=lambda: ["random", "worst_deviation"])
    cluster_selection: List[str] = Field(default_factory=lambda: ["uniform", "grade", "period"])
    cluster_batches: List[int] = Field(default_factory=lambda: [1, 5])
    policy_shifts: List[int] = Field(default_factory=lambda: [-1, 1])
    policy_targets: List[int] = Field(default_factory=lambda: [0, 1, 2])
    stream_sigmas: List[float] = Field(default_factory=lambda: [0.05, 0.1, 0.2])
    stream_scopes: List[str] = Field(default_factory=lambda: ["single", "all_scenarios"])
    max_envelope: int = 64
    max_retries: int = 10

    @field_validator("extraction_modes")
    @classmethod
    def _known_modes(cls, v):
        unknown = set(v) - {"advance", "delay", "random_earlier", "random_later", "toggle"}
        if unknown:
            raise ValueError(f"unknown extraction modes: {sorted(unknown)}")
        return v

    @field_validator("stream_sigmas")
    @classmethod
    def _positive_sigmas(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError("stream sigmas must be positive")
        return v


# --- instance structure queries -------------------------------------------------

def adjustable_arcs(instance: MiningComplexInstance) -> List[int]:
    """Arcs whose proportion is not forced: siblings exist or the source is a stockpile"""
    arcs: List[int] = []
    for j, out in enumerate(instance.arcs_out):
        if len(out) >= 2 or (out and instance.is_stockpile[j]):
            arcs.extend(out)
    return sorted(arcs)


def switchable_groups(instance: MiningComplexInstance) -> List[int]:
    """Groups with at least two allowed destinations"""
    return [g.id for g in instance.groups if len(g.destinations) >= 2]


def _mine_policy_nodes(instance: MiningComplexInstance, mine: int) -> Tuple[List[int], List[int]]:
    node = instance.locations[instance.mines[mine]]
    processors = [j for j in node.outgoing if instance.locations[j].kind == LocationKind.PROCESSOR]
    waste = [j for j in node.outgoing if instance.locations[j].kind == LocationKind.WASTE]
    return processors, waste


def policy_mines(instance: MiningComplexInstance) -> List[int]:
    """Mines whose groups can be split by a grade cut-off between a processor and a waste dump"""
    mines = []
    for m in range(len(instance.mines)):
        processors, waste = _mine_policy_nodes(instance, m)
        if processors and waste and any(g.mine == m for g in instance.groups):
            mines.append(m)
    return mines


def groups_by_grade(instance: MiningComplexInstance, mine: int) -> List[int]:
    """Group ids of one mine, poorest first"""
    groups = [g for g in instance.groups if g.mine == mine]
    return [g.id for g in sorted(groups, key=lambda g: (g.mean_grade, g.id))]


def build_registry(instance: MiningComplexInstance, config: Optional[RegistryConfig] = None) -> List[HeuristicDescriptor]:
    """Enumerate the heuristics the instance admits; ids are dense and stable for a config"""
    config = config or RegistryConfig()
    per_family: Dict[HeuristicFamily, List[Tuple[Tuple[str, Any], ...]]] = {}

    per_family[HeuristicFamily.EXTRACTION] = [
        (("mode", mode), ("envelope", env), ("selection", sel))
        for mode in config.extraction_modes
        for env in config.envelopes
        for sel in config.block_selection
    ]
    if switchable_groups(instance):
        per_family[HeuristicFamily.CLUSTER] = [
            (("selection", sel), ("batch", batch))
            for sel in config.cluster_selection
            for batch in config.cluster_batches
        ]
    if policy_mines(instance):
        per_family[HeuristicFamily.POLICY] = [
            (("shift", shift), ("target", target))
            for shift in config.policy_shifts
            for target in config.policy_targets
        ]
    if adjustable_arcs(instance):
        per_family[HeuristicFamily.STREAM] = [
            (("sigma", sigma), ("scope", scope))
            for sigma in config.stream_sigmas
            for scope in config.stream_scopes
        ]
    per_family = {f: p for f, p in per_family.items() if p}

    if len(per_family) < 2:
        logger.warning(
            f"Instance admits only {len(per_family)} heuristic famil{'y' if len(per_family) == 1 else 'ies'}: "
            f"{[f.value for f in per_family]}"
        )

    selected: List[Tuple[HeuristicFamily, Tuple[Tuple[str, Any], ...]]] = [
        (family, params) for family, plist in per_family.items() for params in plist
    ]
    if config.size is not None:
        if config.size < 1 or config.size > len(selected):
            raise InvalidConfigError(
                f"registry size {config.size} outside [1, {len(selected)}] for this instance"
            )
        # round-robin over families so a truncated registry still spans all of them
        queues = [deque((f, p) for p in plist) for f, plist in per_family.items()]
        chosen = []
        while len(chosen) < config.size:
            for q in queues:
                if q and len(chosen) < config.size:
                    chosen.append(q.popleft())
        order = {item: i for i, item in enumerate(selected)}
        selected = sorted(chosen, key=lambda item: order[item])

    registry = [HeuristicDescriptor(i, family, params) for i, (family, params) in enumerate(selected)]
    logger.info(
        f"Registry built with {len(registry)} heuristics: "
        + ", ".join(f"{f.value}={sum(1 for d in registry if d.family == f)}" for f in per_family)
    )
    return registry


# --- extraction-sequence -------------------------------------------------------

def _later(a: int, b: int) -> bool:
    """True if period a is strictly later than b, NOT_MINED being latest"""
    a = np.iinfo(np.int64).max if a == NOT_MINED else a
    b = np.iinfo(np.int64).max if b == NOT_MINED else b
    return a > b


def _target_period(mode: str, old: int, horizon: int, rng: np.random.Generator) -> Optional[int]:
    last = horizon - 1
    if mode == "advance":
        if old == NOT_MINED:
            return last
        return old - 1 if old > 0 else None
    if mode == "delay":
        if old == NOT_MINED:
            return None
        return old + 1 if old < last else NOT_MINED
    if mode == "random_earlier":
        upper = horizon if old == NOT_MINED else old
        return int(rng.integers(upper)) if upper > 0 else None
    if mode == "random_later":
        if old == NOT_MINED:
            return None
        choices = list(range(old + 1, horizon)) + [NOT_MINED]
        return choices[int(rng.integers(len(choices)))]
    if mode == "toggle":
        return int(rng.integers(horizon)) if old == NOT_MINED else NOT_MINED
    raise ValueError(f"unknown extraction mode: {mode}")


def _candidates(instance: MiningComplexInstance, solution: Solution, mode: str) -> np.ndarray:
    period = solution.period
    if mode in ("advance", "random_earlier"):
        return np.nonzero(period != 0)[0]
    if mode in ("delay", "random_later"):
        return np.nonzero(period != NOT_MINED)[0]
    return np.arange(instance.n_blocks)


def _envelope(instance: MiningComplexInstance, solution: Solution, b: int, kind: str, cap: int) -> List[int]:
    """The block plus its same-period predecessors (inverted cone) or successors (cone)"""
    links = instance.predecessors if kind == "inverted_cone" else instance.successors
    period = solution.period[b]
    members, seen, queue = [b], {b}, deque([b])
    while queue and len(members) < cap:
        u = queue.popleft()
        for w in links[u]:
            w = int(w)
            if w not in seen and solution.period[w] == period:
                seen.add(w)
                members.append(w)
                queue.append(w)
                if len(members) >= cap:
                    break
    return members


def _repair(instance: MiningComplexInstance, solution: Solution, moved: Sequence[int], new: int,
            earlier: bool, footprint: Footprint):
    """Drag predecessors up (earlier moves) or successors down (later moves) until slopes hold"""
    queue = deque(moved)
    while queue:
        u = queue.popleft()
        if earlier:
            for w in instance.predecessors[u]:
                if _later(int(solution.period[w]), new):
                    footprint.record_block(solution, w)
                    solution.period[w] = new
                    queue.append(int(w))
        else:
            for w in instance.successors[u]:
                if solution.period[w] != NOT_MINED and _later(new, int(solution.period[w])):
                    footprint.record_block(solution, w)
                    solution.period[w] = new
                    queue.append(int(w))


def _pick_block(candidates: np.ndarray, solution: Solution, rng: np.random.Generator, selection: str,
                deviation_cost: Optional[np.ndarray]) -> int:
    if selection == "worst_deviation" and deviation_cost is not None and deviation_cost.sum() > 0:
        probs = deviation_cost / deviation_cost.sum()
        t = int(rng.choice(len(probs), p=probs))
        in_period = candidates[solution.period[candidates] == t]
        if len(in_period):
            return int(in_period[rng.integers(len(in_period))])
    return int(candidates[rng.integers(len(candidates))])


def perturb_extraction(instance: MiningComplexInstance, solution: Solution, rng: np.random.Generator,
                       params: Dict[str, Any], deviation_cost: Optional[np.ndarray] = None,
                       max_envelope: int = 64, max_retries: int = 10) -> Footprint:
    """Move one block (with its envelope) to a new period and repair the slope constraints"""
    footprint = Footprint()
    mode = params.get("mode", "advance")
    candidates = _candidates(instance, solution, mode)
    if len(candidates) == 0:
        return footprint

    for _attempt in range(max_retries):
        b = _pick_block(candidates, solution, rng, params.get("selection", "random"), deviation_cost)
        old = int(solution.period[b])
        new = _target_period(mode, old, instance.horizon, rng)
        if new is None or new == old:
            continue
        members = _envelope(instance, solution, b, params.get("envelope", "cone"), max_envelope)
        for u in members:
            footprint.record_block(solution, u)
            solution.period[u] = new
        _repair(instance, solution, members, new, earlier=_later(old, new), footprint=footprint)
        return footprint.prune(solution)
    return footprint


# --- cluster-destination -------------------------------------------------------

def perturb_cluster_destination(instance: MiningComplexInstance, solution: Solution, rng: np.random.Generator,
                                params: Optional[Dict[str, Any]] = None) -> Footprint:
    """Send randomly chosen (group, period) pairs to a different allowed destination"""
    params = params or {}
    footprint = Footprint()
    groups = switchable_groups(instance)
    if not groups:
        return footprint
    T = instance.horizon
    selection = params.get("selection", "uniform")
    batch = min(int(params.get("batch", 1)), len(groups) * T)

    group_w = np.ones(len(groups))
    if selection == "grade":
        grades = np.array([instance.groups[g].mean_grade for g in groups])
        if grades.sum() > 0:
            group_w = grades
    period_w = np.ones(T)
    if selection == "period":
        period_w = 1.0 / (1.0 + instance.cash_flow_discount) ** np.arange(1, T + 1)
    pair_w = (group_w[:, None] * period_w[None, :]).ravel()
    batch = min(batch, int(np.count_nonzero(pair_w)))
    pairs = rng.choice(len(pair_w), size=batch, replace=False, p=pair_w / pair_w.sum())

    for pair in pairs:
        g, t = groups[int(pair) // T], int(pair) % T
        current = solution.destination[g, t]
        options = [j for j in instance.groups[g].destinations if j != current]
        footprint.record_destination(solution, g, t)
        solution.destination[g, t] = options[int(rng.integers(len(options)))]
    return footprint


# --- destination policy ----------------------------------------------------------

def perturb_destination_policy(instance: MiningComplexInstance, solution: Solution, rng: np.random.Generator,
                               params: Dict[str, Any]) -> Footprint:
    """Shift one mine's grade-rank cut-off for one period and reroute its groups"""
    footprint = Footprint()
    mines = policy_mines(instance)
    if not mines:
        return footprint
    m = mines[int(rng.integers(len(mines)))]
    t = int(rng.integers(instance.horizon))
    ranked = groups_by_grade(instance, m)
    threshold = int(solution.cutoff[m, t]) + int(params.get("shift", 1))
    if threshold < 0 or threshold > len(ranked):
        return footprint

    processors, waste = _mine_policy_nodes(instance, m)
    target = processors[min(int(params.get("target", 0)), len(processors) - 1)]
    footprint.record_cutoff(solution, m, t)
    solution.cutoff[m, t] = threshold
    for rank, g in enumerate(ranked):
        dest = waste[0] if rank < threshold else target
        if dest in instance.groups[g].destinations and solution.destination[g, t] != dest:
            footprint.record_destination(solution, g, t)
            solution.destination[g, t] = dest
    return footprint


# --- processing streams ----------------------------------------------------------

def sample_stream_proportion(rng: np.random.Generator, mean: float, sigma: float) -> Tuple[float, float]:
    """Draw N(mean, sigma) and clamp into [0, 1]; returns (raw, clamped)"""
    raw = float(rng.normal(mean, sigma))
    return raw, min(1.0, max(0.0, raw))


def _rebalance(instance: MiningComplexInstance, solution: Solution, a: int, t: int, s: int, value: float,
               footprint: Footprint):
    j = int(instance.arc_source[a])
    siblings = [x for x in instance.arcs_out[j] if x != a]
    footprint.record_stream(solution, a, t, s)
    solution.streams[a, t, s] = value
    if not siblings:
        return
    y = solution.streams
    rest = float(sum(y[x, t, s] for x in siblings))
    if instance.is_stockpile[j] and value + rest <= 1.0:
        return
    budget = 1.0 - value
    for x in siblings:
        footprint.record_stream(solution, x, t, s)
    if rest > 0:
        for x in siblings:
            y[x, t, s] = y[x, t, s] * (budget / rest)
    else:
        for x in siblings:
            y[x, t, s] = budget / len(siblings)
    if not instance.is_stockpile[j]:
        # close the simplex exactly on the last sibling
        last = siblings[-1]
        y[last, t, s] = max(0.0, 1.0 - value - float(sum(y[x, t, s] for x in siblings[:-1])))
    else:
        over = value + float(sum(y[x, t, s] for x in siblings)) - 1.0
        if over > 0:
            last = siblings[-1]
            y[last, t, s] = max(0.0, y[last, t, s] - over)


def perturb_processing_stream(instance: MiningComplexInstance, solution: Solution, rng: np.random.Generator,
                              params: Optional[Dict[str, Any]] = None) -> Footprint:
    """Redraw one outgoing proportion around its current value and rescale its siblings"""
    params = params or {}
    footprint = Footprint()
    arcs = adjustable_arcs(instance)
    if not arcs:
        return footprint
    sigma = float(params.get("sigma", 0.1))
    a = arcs[int(rng.integers(len(arcs)))]
    t = int(rng.integers(instance.horizon))
    if params.get("scope", "single") == "all_scenarios":
        scenarios = range(instance.n_scenarios)
    else:
        scenarios = [int(rng.integers(instance.n_scenarios))]
    for s in scenarios:
        _raw, value = sample_stream_proportion(rng, float(solution.streams[a, t, s]), sigma)
        _rebalance(instance, solution, a, t, s, value, footprint)
    return footprint.prune(solution)


# --- engine ---------------------------------------------------------------------

class HeuristicEngine:
    """Applies registry heuristics to the search's solution, measuring delta and time"""

    def __init__(self, instance: MiningComplexInstance, registry: Sequence[HeuristicDescriptor],
                 evaluator: FlowEvaluator, seed: int, clock: str = "work",
                 config: Optional[RegistryConfig] = None):
        if clock not in ("work", "wall"):
            raise InvalidConfigError(f"unknown clock: {clock}")
        if not registry:
            raise InvalidConfigError("registry is empty")
        self.instance = instance
        self.registry = list(registry)
        self.evaluator = evaluator
        self.clock = clock
        self.config = config or RegistryConfig()
        self.rngs = [np.random.default_rng([int(seed), HEURISTIC_STREAM, h]) for h in range(len(self.registry))]

    def _perturb(self, solution: Solution, descriptor: HeuristicDescriptor) -> Footprint:
        rng = self.rngs[descriptor.id]
        params = descriptor.options
        if descriptor.family == HeuristicFamily.EXTRACTION:
            deviation = None
            if params.get("selection") == "worst_deviation":
                deviation = self.evaluator.period_deviation_cost()
            return perturb_extraction(
                self.instance, solution, rng, params, deviation,
                max_envelope=self.config.max_envelope, max_retries=self.config.max_retries,
            )
        if descriptor.family == HeuristicFamily.CLUSTER:
            return perturb_cluster_destination(self.instance, solution, rng, params)
        if descriptor.family == HeuristicFamily.POLICY:
            return perturb_destination_policy(self.instance, solution, rng, params)
        return perturb_processing_stream(self.instance, solution, rng, params)

    def apply(self, solution: Solution, h: int) -> PerturbationOutcome:
        """Modify solution in place; the evaluator holds the move pending until accept/reject"""
        start = time.perf_counter()
        footprint = self._perturb(solution, self.registry[h])
        delta = self.evaluator.objective_delta(solution, footprint) if not footprint.empty else 0.0
        if footprint.empty:
            self.evaluator.commit()
        wall = max(time.perf_counter() - start, MIN_ELAPSED)
        elapsed = MIN_ELAPSED * (1 + len(footprint)) if self.clock == "work" else wall
        logger.debug(f"h{h} {self.registry[h].name}: {len(footprint)} index(es), delta={delta:.6g}")
        return PerturbationOutcome(h, footprint, delta, elapsed, wall)

    def accept(self):
        """Keep the pending move"""
        self.evaluator.commit()

    def reject(self, solution: Solution, outcome: PerturbationOutcome):
        """Undo the pending move on the solution and in the evaluator"""
        outcome.footprint.undo(solution)
        self.evaluator.rollback()
