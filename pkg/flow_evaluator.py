#!/usr/bin/env python3
"""
Two-Stage Stochastic Objective Evaluator

Propagates material through the location graph scenario by scenario,
derives hereditary attributes, prices them and penalises deviations from
production targets. FlowEvaluator keeps the committed per-scenario state so
a perturbation only recomputes the scenarios and periods it can influence.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np

from complex_model import (
    InvalidConfigError,
    LocationKind,
    MiningComplexInstance,
    NOT_MINED,
    Solution,
    ViolationReport,
    check_feasibility,
)

logger = logging.getLogger(__name__)


class InfeasibleSolutionError(ValueError):
    """Raised when asked to price a solution that violates the model constraints"""

    def __init__(self, report: ViolationReport):
        self.report = report
        first = report.violations[0]
        super().__init__(
            f"solution is infeasible ({len(report)} violation(s)); first: {first.constraint} {first.detail}"
        )


@dataclass
class Footprint:
    """Indices touched by a move, each mapped to the value it held before the move"""
    blocks: Dict[int, int] = field(default_factory=dict)
    destinations: Dict[Tuple[int, int], int] = field(default_factory=dict)
    streams: Dict[Tuple[int, int, int], float] = field(default_factory=dict)
    cutoffs: Dict[Tuple[int, int], int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.blocks) + len(self.destinations) + len(self.streams) + len(self.cutoffs)

    @property
    def empty(self) -> bool:
        return len(self) == 0

    def record_block(self, solution: Solution, b: int):
        self.blocks.setdefault(int(b), int(solution.period[b]))

    def record_destination(self, solution: Solution, g: int, t: int):
        self.destinations.setdefault((int(g), int(t)), int(solution.destination[g, t]))

    def record_stream(self, solution: Solution, a: int, t: int, s: int):
        self.streams.setdefault((int(a), int(t), int(s)), float(solution.streams[a, t, s]))

    def record_cutoff(self, solution: Solution, m: int, t: int):
        self.cutoffs.setdefault((int(m), int(t)), int(solution.cutoff[m, t]))

    def undo(self, solution: Solution):
        """Restore every recorded entry to its pre-move value"""
        for b, old in self.blocks.items():
            solution.period[b] = old
        for (g, t), old in self.destinations.items():
            solution.destination[g, t] = old
        for (a, t, s), old in self.streams.items():
            solution.streams[a, t, s] = old
        for (m, t), old in self.cutoffs.items():
            solution.cutoff[m, t] = old

    def inverse(self, solution: Solution) -> "Footprint":
        """Footprint of the reverting move, recorded against the moved solution"""
        inv = Footprint()
        for b in self.blocks:
            inv.record_block(solution, b)
        for g, t in self.destinations:
            inv.record_destination(solution, g, t)
        for a, t, s in self.streams:
            inv.record_stream(solution, a, t, s)
        for m, t in self.cutoffs:
            inv.record_cutoff(solution, m, t)
        return inv

    def prune(self, solution: Solution) -> "Footprint":
        """Drop entries whose value ended up unchanged"""
        self.blocks = {b: o for b, o in self.blocks.items() if solution.period[b] != o}
        self.destinations = {k: o for k, o in self.destinations.items() if solution.destination[k] != o}
        self.streams = {k: o for k, o in self.streams.items() if solution.streams[k] != o}
        self.cutoffs = {k: o for k, o in self.cutoffs.items() if solution.cutoff[k] != o}
        return self

    def earliest_period(self, solution: Solution) -> Optional[int]:
        periods: List[int] = []
        for b, old in self.blocks.items():
            periods.extend(t for t in (old, int(solution.period[b])) if t != NOT_MINED)
        periods.extend(t for (_g, t) in self.destinations)
        periods.extend(t for (_a, t, _s) in self.streams)
        return min(periods) if periods else None

    def scenarios(self, n_scenarios: int) -> List[int]:
        if self.blocks or self.destinations:
            return list(range(n_scenarios))
        return sorted({s for (_a, _t, s) in self.streams})

    def to_dict(self) -> Dict[str, Any]:
        return {
            'blocks': sorted(self.blocks),
            'destinations': sorted(self.destinations),
            'streams': sorted(self.streams),
            'cutoffs': sorted(self.cutoffs),
        }


@dataclass
class AttributeState:
    """One scenario's propagated quantities (attribute, node, period) and deviations (hereditary, period)"""
    v: np.ndarray
    vh: np.ndarray
    r: np.ndarray
    d_plus: np.ndarray
    d_minus: np.ndarray


@dataclass
class EvaluationReport:
    """Committed objective split into per-scenario revenue and penalty"""
    objective: float
    scenario_objectives: np.ndarray
    revenue: np.ndarray    # per scenario
    penalty: np.ndarray    # per scenario
    states: Optional[List[AttributeState]] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'objective': self.objective,
            'scenario_objectives': self.scenario_objectives.tolist(),
            'revenue': self.revenue.tolist(),
            'penalty': self.penalty.tolist(),
            'expected_revenue': float(self.revenue.mean()),
            'expected_penalty': float(self.penalty.mean()),
        }


# --- per-scenario passes -------------------------------------------------------
# Full and incremental evaluation share these functions so both follow the
# same arithmetic path and agree bit for bit.

def _mine_inflow(instance: MiningComplexInstance, solution: Solution, s: int) -> np.ndarray:
    """Material leaving the mines per (attribute, node, period); booked at the mine and the group destination"""
    out = np.zeros((instance.n_attributes, len(instance.locations), instance.horizon))
    mined = np.nonzero(solution.period != NOT_MINED)[0]
    if len(mined) == 0:
        return out
    t = solution.period[mined]
    beta = instance.scenarios.attributes[:, mined, s]
    mine_nodes = np.asarray(instance.mines, dtype=np.int64)[instance.block_mine[mined]]
    dest = solution.destination[instance.group_of[mined, s], t]
    for p in range(instance.n_attributes):
        np.add.at(out[p], (mine_nodes, t), beta[p])
        np.add.at(out[p], (dest, t), beta[p])
    return out


def _retained(instance: MiningComplexInstance, solution: Solution, j: int, t: int, s: int) -> float:
    """Share of a stockpile's content kept at the end of period t"""
    kept = 1.0
    for a in instance.arcs_out[j]:
        kept -= solution.streams[a, t, s]
    return kept


def _attribute_value(instance: MiningComplexInstance, h: int, base: np.ndarray) -> float:
    coeffs = instance.attribute_coefficients
    acc = 0.0
    for p in range(instance.n_attributes):
        acc += coeffs[h, p] * base[p]
    if instance.attribute_per_tonne[h]:
        return acc / base[0] if base[0] > 0 else 0.0
    return acc


def _node_recovery(instance: MiningComplexInstance, v: np.ndarray, i: int, t: int) -> np.ndarray:
    """Recovery of material leaving node i at the end of period t"""
    h = instance.recovery_source[i]
    if h < 0:
        return instance.recovery[i]
    r = min(max(_attribute_value(instance, h, v[:, i, t]), 0.0), 1.0)
    return np.full(instance.n_attributes, r)


def recovery_table(instance: MiningComplexInstance, v: np.ndarray) -> np.ndarray:
    """Recoveries per (attribute, node, period) for one scenario's propagated quantities"""
    r = np.empty_like(v)
    for i in range(len(instance.locations)):
        for t in range(instance.horizon):
            r[:, i, t] = _node_recovery(instance, v, i, t)
    return r


def _propagate(instance: MiningComplexInstance, solution: Solution, s: int, mine_in: np.ndarray,
               v: np.ndarray, t0: int):
    y = solution.streams
    for t in range(t0, instance.horizon):
        for j in instance.node_order:
            if instance.locations[j].kind == LocationKind.MINE:
                v[:, j, t] = mine_in[:, j, t]
                continue
            total = mine_in[:, j, t].copy()
            if t > 0:
                if instance.is_stockpile[j]:
                    total = total + v[:, j, t - 1] * _retained(instance, solution, j, t - 1, s)
                for a in instance.arcs_in[j]:
                    i = instance.arc_source[a]
                    total = total + _node_recovery(instance, v, i, t - 1) * v[:, i, t - 1] * y[a, t - 1, s]
            v[:, j, t] = total


def _hereditary(instance: MiningComplexInstance, solution: Solution, s: int, v: np.ndarray,
                vh: np.ndarray, t0: int):
    for h in range(len(instance.hereditary)):
        j = instance.attribute_node[h]
        for t in range(t0, instance.horizon):
            base = v[:, j, t]
            if instance.is_stockpile[j]:
                base = base * _retained(instance, solution, j, t, s)
            vh[h, t] = _attribute_value(instance, h, base)


def _deviations(instance: MiningComplexInstance, vh: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    with np.errstate(invalid="ignore"):
        d_plus = np.maximum(0.0, vh - instance.upper_t)
        d_minus = np.maximum(0.0, instance.lower_t - vh)
    return d_plus, d_minus


def _period_values(instance: MiningComplexInstance, vh, d_plus, d_minus, out: np.ndarray, t0: int):
    for t in range(t0, instance.horizon):
        acc = 0.0
        for h in range(len(instance.hereditary)):
            acc += (
                instance.price_t[h, t] * vh[h, t]
                - instance.surplus_t[h, t] * d_plus[h, t]
                - instance.shortage_t[h, t] * d_minus[h, t]
            )
        out[t] = acc


def _ordered_sum(values: Iterable[float]) -> float:
    """Left-to-right sum so full and incremental passes round identically"""
    acc = 0.0
    for x in values:
        acc += x
    return acc


def propagate_flows(instance: MiningComplexInstance, solution: Solution, s: int) -> AttributeState:
    """Forward pass of one scenario in period order; deviations are left at zero"""
    v = np.zeros((instance.n_attributes, len(instance.locations), instance.horizon))
    vh = np.zeros((len(instance.hereditary), instance.horizon))
    _propagate(instance, solution, s, _mine_inflow(instance, solution, s), v, 0)
    _hereditary(instance, solution, s, v, vh, 0)
    return AttributeState(v, vh, recovery_table(instance, v), np.zeros_like(vh), np.zeros_like(vh))


def compute_deviations(state: AttributeState, instance: MiningComplexInstance) -> AttributeState:
    """Fill d_plus and d_minus of a propagated state in place"""
    state.d_plus, state.d_minus = _deviations(instance, state.vh)
    return state


def objective(instance: MiningComplexInstance, solution: Solution, keep_states: bool = False,
              workers: int = 1) -> EvaluationReport:
    """Expected discounted value minus expected deviation penalties"""
    evaluator = FlowEvaluator(instance, workers=workers)
    evaluator.evaluate(solution)
    return evaluator.report(keep_states=keep_states)


class FlowEvaluator:
    """Stateful evaluator with incremental deltas for the search loop"""

    def __init__(self, instance: MiningComplexInstance, workers: int = 1):
        if not instance.groups:
            raise InvalidConfigError("instance has no block groups; mine output cannot be routed")
        self.instance = instance
        self.workers = max(1, int(workers))
        S, T = instance.n_scenarios, instance.horizon
        H = len(instance.hereditary)
        self.v = np.zeros((S, instance.n_attributes, len(instance.locations), T))
        self.vh = np.zeros((S, H, T))
        self.d_plus = np.zeros((S, H, T))
        self.d_minus = np.zeros((S, H, T))
        self.period_value = np.zeros((S, T))
        self.scenario_value = np.zeros(S)
        self.value = 0.0
        self.solution: Optional[Solution] = None
        self._pending: Optional[Dict[str, Any]] = None

    def _scenario_pass(self, solution: Solution, s: int, t0: int):
        inst = self.instance
        _propagate(inst, solution, s, _mine_inflow(inst, solution, s), self.v[s], t0)
        _hereditary(inst, solution, s, self.v[s], self.vh[s], t0)
        self.d_plus[s], self.d_minus[s] = _deviations(inst, self.vh[s])
        _period_values(inst, self.vh[s], self.d_plus[s], self.d_minus[s], self.period_value[s], t0)
        self.scenario_value[s] = _ordered_sum(self.period_value[s])

    def _aggregate(self) -> float:
        return _ordered_sum(self.scenario_value) / self.instance.n_scenarios

    def evaluate(self, solution: Solution, check: bool = True) -> float:
        """Full evaluation; the result becomes the committed state"""
        if check:
            report = check_feasibility(self.instance, solution)
            if not report.feasible:
                raise InfeasibleSolutionError(report)
        self._pending = None
        scenarios = range(self.instance.n_scenarios)
        if self.workers > 1:
            # scenario passes only write their own slice of the state arrays
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                list(pool.map(lambda s: self._scenario_pass(solution, s, 0), scenarios))
        else:
            for s in scenarios:
                self._scenario_pass(solution, s, 0)
        self.solution = solution
        self.value = self._aggregate()
        return self.value

    def objective_delta(self, solution: Solution, footprint: Footprint) -> float:
        """Objective change caused by the move recorded in footprint (solution already modified)"""
        if self.solution is None:
            raise RuntimeError("evaluate() must run before objective_delta()")
        self.commit()
        t0 = footprint.earliest_period(solution)
        if t0 is None:
            return 0.0
        scenarios = footprint.scenarios(self.instance.n_scenarios)
        self._pending = {
            'scenarios': scenarios,
            'value': self.value,
            'v': self.v[scenarios].copy(),
            'vh': self.vh[scenarios].copy(),
            'd_plus': self.d_plus[scenarios].copy(),
            'd_minus': self.d_minus[scenarios].copy(),
            'period_value': self.period_value[scenarios].copy(),
            'scenario_value': self.scenario_value[scenarios].copy(),
        }
        for s in scenarios:
            self._scenario_pass(solution, s, t0)
        old = self.value
        self.value = self._aggregate()
        self.solution = solution
        logger.debug(f"delta over {len(scenarios)} scenario(s) from period {t0 + 1}: {self.value - old:.6g}")
        return self.value - old

    def commit(self):
        """Accept the pending delta"""
        self._pending = None

    def rollback(self):
        """Restore the state from before the last objective_delta"""
        snap = self._pending
        if snap is None:
            return
        idx = snap['scenarios']
        for key in ('v', 'vh', 'd_plus', 'd_minus', 'period_value', 'scenario_value'):
            getattr(self, key)[idx] = snap[key]
        self.value = snap['value']
        self._pending = None

    def period_deviation_cost(self) -> np.ndarray:
        """Expected discounted penalty per period of the committed state"""
        inst = self.instance
        cost = inst.surplus_t[None] * self.d_plus + inst.shortage_t[None] * self.d_minus
        return cost.sum(axis=1).mean(axis=0)

    def report(self, keep_states: bool = False) -> EvaluationReport:
        """Breakdown of the committed state; keep_states copies the per-scenario flows"""
        inst = self.instance
        revenue = (inst.price_t[None] * self.vh).sum(axis=(1, 2))
        penalty = (inst.surplus_t[None] * self.d_plus + inst.shortage_t[None] * self.d_minus).sum(axis=(1, 2))
        states = None
        if keep_states:
            states = [
                AttributeState(self.v[s].copy(), self.vh[s].copy(), recovery_table(inst, self.v[s]),
                               self.d_plus[s].copy(), self.d_minus[s].copy())
                for s in range(inst.n_scenarios)
            ]
        return EvaluationReport(self.value, self.scenario_value.copy(), revenue, penalty, states)


def period_cash_flows(instance: MiningComplexInstance, evaluator: FlowEvaluator) -> Dict[str, List[float]]:
    """Expected discounted net value per period, 1-based keys for reporting"""
    mean = evaluator.period_value.mean(axis=0)
    return {'period': list(range(1, instance.horizon + 1)), 'value': [float(x) for x in mean],
            'cumulative': [float(x) for x in np.cumsum(mean)]}

