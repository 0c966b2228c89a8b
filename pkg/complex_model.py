#!/usr/bin/env python3
"""
Mining Complex Data Model

This module provides the static description of a mining complex and the
decision variables optimised over it:
- Blocks, simulated attribute scenarios and the location graph
- Synthetic instance generation from a seeded configuration
- Block grouping with seeded k-means (Lloyd iteration)
- Random feasible initial solutions and feasibility checking
- JSON instance serialization
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from graphlib import CycleError, TopologicalSorter
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

logger = logging.getLogger(__name__)

NOT_MINED = -1
FORMAT_VERSION = 1


class InvalidConfigError(ValueError):
    """Raised when a configuration cannot produce a valid instance"""


class StructuralError(ValueError):
    """Raised when the block or location graph contains a cycle"""


class MalformedSolutionError(ValueError):
    """Raised when a solution does not fit the instance it is checked against"""


class LocationKind(str, Enum):
    """Role of a node in the value chain"""
    MINE = "mine"
    STOCKPILE = "stockpile"
    PROCESSOR = "processor"
    WASTE = "waste"


@dataclass(frozen=True)
class Block:
    """One mining block with its in-situ tonnage and overlying predecessors"""
    id: int
    mine: int
    position: Tuple[int, int, int]
    tonnage: float
    predecessors: Tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    """Simulated primary attributes, indexed (attribute, block, scenario)"""
    attributes: np.ndarray
    names: Tuple[str, ...]

    @property
    def count(self) -> int:
        return int(self.attributes.shape[2])

    @property
    def weight(self) -> float:
        return 1.0 / self.count


@dataclass(frozen=True)
class LocationNode:
    """Mine, stockpile, processor or waste dump with its arcs and recoveries"""
    id: int
    name: str
    kind: LocationKind
    outgoing: Tuple[int, ...] = ()
    incoming: Tuple[int, ...] = ()
    # per primary attribute; stockpiles and waste dumps recover everything
    recovery: Tuple[float, ...] = ()
    # attribute-driven mode: recovery per (period, scenario) is the value of this
    # hereditary attribute of the same node, for every primary attribute
    recovery_attribute: Optional[str] = None

    @property
    def is_terminal(self) -> bool:
        return self.kind != LocationKind.MINE and not self.outgoing


@dataclass(frozen=True)
class HereditaryAttribute:
    """Linear transfer function f_h over the primary attributes of one node"""
    name: str
    node: int
    coefficients: Tuple[float, ...]
    price: float = 0.0
    upper: Tuple[float, ...] = ()
    lower: Tuple[float, ...] = ()
    surplus_penalty: float = 0.0
    shortage_penalty: float = 0.0
    risk_discount: float = 0.0
    # value divided by the node's ore tonnage (head grade, grade-recovery curves)
    per_tonne: bool = False


@dataclass(frozen=True, eq=False)
class Group:
    """Cluster of blocks sharing a destination decision, per scenario"""
    id: int
    mine: int
    destinations: Tuple[int, ...]
    membership: np.ndarray  # bool (blocks, scenarios): theta_{b,g,s}
    mean_grade: float = 0.0


@dataclass(frozen=True, eq=False)
class MiningComplexInstance:
    """Immutable description of a mining complex; derived index arrays are built once in __post_init__"""
    blocks: Tuple[Block, ...]
    scenarios: ScenarioSet
    locations: Tuple[LocationNode, ...]
    arcs: Tuple[Tuple[int, int], ...]
    groups: Tuple[Group, ...]
    hereditary: Tuple[HereditaryAttribute, ...]
    horizon: int
    mining_capacity: np.ndarray  # (mines, periods) in tonnes
    cash_flow_discount: float = 0.1
    risk_discounts: Tuple[float, ...] = ()
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.blocks:
            raise InvalidConfigError("instance has no blocks")
        if self.horizon <= 0:
            raise InvalidConfigError("horizon must be positive")
        if self.scenarios.count <= 0:
            raise InvalidConfigError("instance has no scenarios")
        self._derive()

    # Derived arrays are attached once; the dataclass stays frozen for users.
    def _derive(self):
        n_blocks = len(self.blocks)
        n_attr = self.scenarios.attributes.shape[0]
        set_ = lambda name, value: object.__setattr__(self, name, value)

        tonnage = np.array([b.tonnage for b in self.blocks], dtype=float)
        if np.any(tonnage <= 0):
            raise InvalidConfigError("block tonnage must be positive")
        if self.scenarios.attributes.shape[1] != n_blocks:
            raise InvalidConfigError("scenario attributes do not cover every block")
        set_("tonnage", tonnage)
        set_("block_mine", np.array([b.mine for b in self.blocks], dtype=np.int64))
        set_("block_bench", np.array([b.position[2] for b in self.blocks], dtype=np.int64))

        preds = [np.array(b.predecessors, dtype=np.int64) for b in self.blocks]
        succs: List[List[int]] = [[] for _ in range(n_blocks)]
        for b, ps in enumerate(preds):
            for u in ps:
                succs[int(u)].append(b)
        set_("predecessors", preds)
        set_("successors", [np.array(s, dtype=np.int64) for s in succs])
        pairs = [(b, int(u)) for b, ps in enumerate(preds) for u in ps]
        set_("precedence_pairs", np.array(pairs, dtype=np.int64).reshape(-1, 2))
        try:
            order = list(TopologicalSorter({b: list(map(int, preds[b])) for b in range(n_blocks)}).static_order())
        except CycleError as e:
            raise StructuralError(f"block precedence contains a cycle: {e.args[1]}") from e
        set_("block_order", np.array(order, dtype=np.int64))

        # Location graph
        n_nodes = len(self.locations)
        graph = {node.id: list(node.incoming) for node in self.locations}
        for node in self.locations:
            for j in node.outgoing:
                if node.id not in self.locations[j].incoming:
                    raise InvalidConfigError(f"arc {node.id}->{j} missing from incoming set of {j}")
        try:
            node_order = list(TopologicalSorter(graph).static_order())
        except CycleError as e:
            raise StructuralError(f"location graph contains a cycle: {e.args[1]}") from e
        set_("node_order", tuple(node_order))
        kinds = [node.kind for node in self.locations]
        set_("mines", tuple(n.id for n in self.locations if n.kind == LocationKind.MINE))
        set_("stockpiles", tuple(n.id for n in self.locations if n.kind == LocationKind.STOCKPILE))
        set_("processors", tuple(n.id for n in self.locations if n.kind == LocationKind.PROCESSOR))
        set_("waste_dumps", tuple(n.id for n in self.locations if n.kind == LocationKind.WASTE))
        set_("is_stockpile", np.array([k == LocationKind.STOCKPILE for k in kinds]))

        recovery = np.ones((n_nodes, n_attr))
        for node in self.locations:
            if node.kind == LocationKind.PROCESSOR and node.recovery:
                recovery[node.id] = np.asarray(node.recovery, dtype=float)
        if np.any(recovery < 0) or np.any(recovery > 1):
            raise InvalidConfigError("recoveries must lie in [0, 1]")
        set_("recovery", recovery)

        for src, dst in self.arcs:
            if self.locations[src].kind == LocationKind.MINE:
                raise InvalidConfigError(f"stream arc {src}->{dst} leaves a mine; mine output is routed by groups")
            if dst not in self.locations[src].outgoing:
                raise InvalidConfigError(f"stream arc {src}->{dst} not in the location graph")
        arcs_out: List[List[int]] = [[] for _ in range(n_nodes)]
        for a, (src, _dst) in enumerate(self.arcs):
            arcs_out[src].append(a)
        arcs_in: List[List[int]] = [[] for _ in range(n_nodes)]
        for a, (_src, dst) in enumerate(self.arcs):
            arcs_in[dst].append(a)
        set_("arcs_out", tuple(tuple(a) for a in arcs_out))
        set_("arcs_in", tuple(tuple(a) for a in arcs_in))
        set_("arc_source", np.array([a[0] for a in self.arcs], dtype=np.int64))
        set_("arc_target", np.array([a[1] for a in self.arcs], dtype=np.int64))

        # Group memberships must be one-hot for every (block, scenario)
        group_of = np.full((n_blocks, self.scenarios.count), -1, dtype=np.int64)
        for g in self.groups:
            if not g.destinations:
                raise InvalidConfigError(f"group {g.id} has no destination")
            for j in g.destinations:
                if j >= n_nodes or self.locations[j].kind == LocationKind.MINE:
                    raise InvalidConfigError(f"group {g.id} destination {j} is not a valid location")
            if np.any(group_of[g.membership] >= 0):
                raise InvalidConfigError(f"group {g.id} overlaps another group")
            group_of[g.membership] = g.id
        if self.groups and np.any(group_of < 0):
            raise InvalidConfigError("some (block, scenario) pairs belong to no group")
        set_("group_of", group_of)

        # Hereditary attribute tables, discounts precomputed per period
        n_h = len(self.hereditary)
        periods = np.arange(1, self.horizon + 1, dtype=float)
        coeffs = np.zeros((n_h, n_attr))
        price_t = np.zeros((n_h, self.horizon))
        surplus_t = np.zeros((n_h, self.horizon))
        shortage_t = np.zeros((n_h, self.horizon))
        upper = np.full((n_h, self.horizon), np.inf)
        lower = np.full((n_h, self.horizon), -np.inf)
        for h, attr in enumerate(self.hereditary):
            coeffs[h] = attr.coefficients
            price_t[h] = attr.price / (1.0 + self.cash_flow_discount) ** periods
            surplus_t[h] = attr.surplus_penalty / (1.0 + attr.risk_discount) ** periods
            shortage_t[h] = attr.shortage_penalty / (1.0 + attr.risk_discount) ** periods
            if attr.upper:
                if len(attr.upper) != self.horizon:
                    raise InvalidConfigError(f"upper bounds of {attr.name} do not cover the horizon")
                upper[h] = attr.upper
            if attr.lower:
                if len(attr.lower) != self.horizon:
                    raise InvalidConfigError(f"lower bounds of {attr.name} do not cover the horizon")
                lower[h] = attr.lower
        set_("attribute_coefficients", coeffs)
        set_("attribute_node", np.array([a.node for a in self.hereditary], dtype=np.int64))
        set_("price_t", price_t)
        set_("surplus_t", surplus_t)
        set_("shortage_t", shortage_t)
        set_("upper_t", upper)
        set_("lower_t", lower)
        set_("attribute_per_tonne", np.array([a.per_tonne for a in self.hereditary], dtype=bool))

        recovery_source = np.full(n_nodes, -1, dtype=np.int64)
        for node in self.locations:
            if node.recovery_attribute is None:
                continue
            if node.kind in (LocationKind.MINE, LocationKind.STOCKPILE):
                raise InvalidConfigError(f"{node.kind.value} {node.name} cannot take attribute-driven recovery")
            matches = [h for h, a in enumerate(self.hereditary)
                       if a.name == node.recovery_attribute and a.node == node.id]
            if len(matches) != 1:
                raise InvalidConfigError(
                    f"recovery attribute '{node.recovery_attribute}' must name one hereditary attribute of {node.name}"
                )
            recovery_source[node.id] = matches[0]
        set_("recovery_source", recovery_source)

        if self.mining_capacity.shape != (len(self.mines), self.horizon):
            raise InvalidConfigError("mining capacity must be given per mine and period")

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def n_scenarios(self) -> int:
        return self.scenarios.count

    @property
    def n_attributes(self) -> int:
        return int(self.scenarios.attributes.shape[0])

    def mine_index(self, node_id: int) -> int:
        """Position of a mine node among the mines"""
        return self.mines.index(node_id)

    def theta(self, g: int) -> np.ndarray:
        """Block-by-scenario membership mask of group g"""
        return self.groups[g].membership

    def grades(self) -> np.ndarray:
        """Metal grades per (metal, block, scenario)"""
        return self.scenarios.attributes[1:] / self.tonnage[None, :, None]

    def with_groups(self, groups: Sequence[Group]) -> "MiningComplexInstance":
        """Same complex with a new grouping (derived arrays rebuilt)"""
        return replace(self, groups=tuple(groups))


@dataclass
class Solution:
    """Extraction periods, destination policy, processing streams and cut-off ranks"""
    period: np.ndarray       # (blocks,) int, NOT_MINED or 0..T-1
    destination: np.ndarray  # (groups, periods) int, location id
    streams: np.ndarray      # (arcs, periods, scenarios) float
    cutoff: np.ndarray       # (mines, periods) int, grade-rank threshold

    def copy(self) -> "Solution":
        return Solution(self.period.copy(), self.destination.copy(), self.streams.copy(), self.cutoff.copy())

    def same_as(self, other: "Solution") -> bool:
        """Exact equality of every decision array"""
        return (
            np.array_equal(self.period, other.period)
            and np.array_equal(self.destination, other.destination)
            and np.array_equal(self.streams, other.streams)
            and np.array_equal(self.cutoff, other.cutoff)
        )

    def x(self, horizon: int) -> np.ndarray:
        """Binary x_{b,t} view of the extraction periods"""
        out = np.zeros((len(self.period), horizon), dtype=np.int8)
        mined = self.period >= 0
        out[np.nonzero(mined)[0], self.period[mined]] = 1
        return out


@dataclass
class Violation:
    """One broken constraint with the indices that break it"""
    constraint: str
    indices: Tuple[int, ...]
    detail: str = ""


@dataclass
class ViolationReport:
    """Every constraint violation found by a feasibility check"""
    violations: List[Violation] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'feasible': self.feasible,
            'violations': [
                {'constraint': v.constraint, 'indices': list(v.indices), 'detail': v.detail}
                for v in self.violations
            ],
        }


class GeneratorConfig(BaseModel):
    """Synthetic mining complex; defaults follow the small single-mine templates"""
    grid: Tuple[int, int, int] = (10, 10, 5)
    n_mines: int = 1
    n_processors: int = 1
    n_stockpiles: int = 0
    n_scenarios: int = 10
    n_periods: int = 5
    metals: List[str] = Field(default_factory=lambda: ["copper"])
    block_tonnage: float = 10800.0
    base_grade: float = 0.008
    grade_amplitude: float = 0.6
    grade_waves: int = 3
    grade_noise: float = 0.15  # relative to base grade
    metal_price: List[float] = Field(default_factory=lambda: [6000.0])
    recovery: List[float] = Field(default_factory=lambda: [0.85])
    mining_cost: float = 2.0
    processing_cost: float = 10.0
    mining_capacity_factor: float = 1.2  # x (mine tonnage / periods)
    processing_capacity_factor: float = 0.5  # x (total tonnage / periods)
    processing_lower_factor: float = 0.8  # lower bound as a share of the upper
    stockpile_capacity_factor: float = 0.2
    shortage_penalty: float = 7.0
    processing_surplus_penalty: float = 10.0
    mining_surplus_penalty: float = 15.0
    stockpile_surplus_penalty: float = 10.0
    discount_rates: Tuple[float, float, float, float, float, float] = (0.1, 0.15, 0.15, 0.15, 0.15, 0.15)
    clusters_per_mine: int = 6
    kmeans_max_iter: int = 50

    @field_validator("grid")
    @classmethod
    def _grid_non_negative(cls, v):
        if any(d < 0 for d in v):
            raise ValueError("grid dimensions must be non-negative")
        return v

    def check(self):
        """Reject configurations that cannot produce a valid instance"""
        if math.prod(self.grid) == 0 or self.n_mines <= 0:
            raise InvalidConfigError("configuration yields zero blocks")
        if self.n_periods <= 0:
            raise InvalidConfigError("n_periods must be positive")
        if self.n_scenarios <= 0:
            raise InvalidConfigError("n_scenarios must be positive")
        if self.n_processors <= 0:
            raise InvalidConfigError("at least one processor is required")
        if not self.metals:
            raise InvalidConfigError("at least one metal is required")
        if len(self.metal_price) != len(self.metals) or len(self.recovery) != len(self.metals):
            raise InvalidConfigError("metal_price and recovery need one entry per metal")
        if self.clusters_per_mine < 1:
            raise InvalidConfigError("clusters_per_mine must be at least 1")


def _streams(seed: int, *names: str) -> List[np.random.Generator]:
    """Independent named generators derived from one master seed"""
    root = np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in root.spawn(len(names))]


def overlying_blocks(position: Tuple[int, int, int], grid: Tuple[int, int, int]) -> List[Tuple[int, int, int]]:
    """Up to nine blocks on the bench directly above (45 degree slope)"""
    i, j, k = position
    nx, ny, _ = grid
    if k == 0:
        return []
    return [
        (i + di, j + dj, k - 1)
        for di in (-1, 0, 1)
        for dj in (-1, 0, 1)
        if 0 <= i + di < nx and 0 <= j + dj < ny
    ]


def base_grade_field(config: GeneratorConfig, seed: int) -> np.ndarray:
    """Smooth deterministic grade field (metal, mine, i, j, k)"""
    nx, ny, nz = config.grid
    field_rng, = _streams(seed, "field")
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    out = np.zeros((len(config.metals), config.n_mines, nx, ny, nz))
    for e in range(len(config.metals)):
        for m in range(config.n_mines):
            freq = field_rng.uniform(0.2, 1.0, size=(config.grade_waves, 3))
            phase = field_rng.uniform(0.0, 2 * math.pi, size=config.grade_waves)
            wave = np.zeros((nx, ny, nz))
            for w in range(config.grade_waves):
                wave += np.sin(
                    2 * math.pi * (freq[w, 0] * ii / max(nx, 1) + freq[w, 1] * jj / max(ny, 1) + freq[w, 2] * kk / max(nz, 1))
                    + phase[w]
                )
            wave /= max(config.grade_waves, 1)
            out[e, m] = np.maximum(config.base_grade * (1.0 + config.grade_amplitude * wave), 0.0)
    return out


def generate_synthetic_instance(config: GeneratorConfig, seed: int) -> MiningComplexInstance:
    """Build a valid instance; identical (config, seed) gives a bit-identical result"""
    config.check()
    nx, ny, nz = config.grid
    T, S = config.n_periods, config.n_scenarios
    n_metals = len(config.metals)
    _, noise_rng, cluster_rng = _streams(seed, "field", "noise", "cluster")
    field_ = base_grade_field(config, seed)

    blocks: List[Block] = []
    index: Dict[Tuple[int, int, int, int], int] = {}
    for m in range(config.n_mines):
        for k in range(nz):
            for j in range(ny):
                for i in range(nx):
                    pos = (i, j, k)
                    preds = tuple(index[(m,) + p] for p in overlying_blocks(pos, config.grid))
                    index[(m,) + pos] = len(blocks)
                    blocks.append(Block(len(blocks), m, pos, config.block_tonnage, preds))

    n_blocks = len(blocks)
    attributes = np.zeros((1 + n_metals, n_blocks, S))
    attributes[0] = config.block_tonnage
    noise_sd = config.grade_noise * config.base_grade
    for b, blk in enumerate(blocks):
        i, j, k = blk.position
        base = field_[:, blk.mine, i, j, k]
        grade = np.maximum(base[:, None] + noise_rng.normal(0.0, noise_sd, size=(n_metals, S)), 0.0)
        attributes[1:, b, :] = grade * blk.tonnage

    # Location graph: mines -> {processors, stockpiles, waste}; stockpiles -> processors
    locations: List[Dict[str, Any]] = []
    def add(name, kind, recovery=()):
        locations.append({'name': name, 'kind': kind, 'outgoing': [], 'incoming': [], 'recovery': tuple(recovery)})
        return len(locations) - 1

    mine_ids = [add(f"mine_{m}", LocationKind.MINE) for m in range(config.n_mines)]
    proc_ids = [add(f"processor_{p}", LocationKind.PROCESSOR, [1.0] + list(config.recovery)) for p in range(config.n_processors)]
    pile_ids = [add(f"stockpile_{s}", LocationKind.STOCKPILE) for s in range(config.n_stockpiles)]
    waste_id = add("waste", LocationKind.WASTE)

    def connect(i, j):
        locations[i]['outgoing'].append(j)
        locations[j]['incoming'].append(i)

    for m in mine_ids:
        for j in proc_ids + pile_ids + [waste_id]:
            connect(m, j)
    arcs = []
    for sp in pile_ids:
        for p in proc_ids:
            connect(sp, p)
            arcs.append((sp, p))
    nodes = tuple(
        LocationNode(i, d['name'], d['kind'], tuple(d['outgoing']), tuple(d['incoming']), d['recovery'])
        for i, d in enumerate(locations)
    )

    total = config.block_tonnage * n_blocks
    per_mine = total / config.n_mines
    mining_capacity = np.full((config.n_mines, T), config.mining_capacity_factor * per_mine / T)
    proc_upper = config.processing_capacity_factor * total / T / config.n_processors
    proc_lower = config.processing_lower_factor * proc_upper
    d1, d2, d3, d4, _d5, d6 = config.discount_rates
    ones = (1.0,) + (0.0,) * n_metals

    hereditary: List[HereditaryAttribute] = []
    for idx, m in enumerate(mine_ids):
        hereditary.append(HereditaryAttribute(
            "mined_tonnage", m, ones, upper=tuple(mining_capacity[idx]),
            surplus_penalty=config.mining_surplus_penalty, risk_discount=d2))
        hereditary.append(HereditaryAttribute("mining_cost", m, ones, price=-config.mining_cost))
    for p in proc_ids:
        hereditary.append(HereditaryAttribute(
            "processed_tonnage", p, ones, upper=(proc_upper,) * T, lower=(proc_lower,) * T,
            surplus_penalty=config.processing_surplus_penalty, shortage_penalty=config.shortage_penalty,
            risk_discount=d3 if p == proc_ids[0] else d4))
        hereditary.append(HereditaryAttribute("processing_cost", p, ones, price=-config.processing_cost))
        for e, metal in enumerate(config.metals):
            coeff = [0.0] * (1 + n_metals)
            coeff[1 + e] = config.recovery[e]
            hereditary.append(HereditaryAttribute(f"revenue_{metal}", p, tuple(coeff), price=config.metal_price[e]))
    for sp in pile_ids:
        hereditary.append(HereditaryAttribute(
            "stock_level", sp, ones, upper=(config.stockpile_capacity_factor * total / T,) * T,
            surplus_penalty=config.stockpile_surplus_penalty, risk_discount=d6))

    instance = MiningComplexInstance(
        blocks=tuple(blocks),
        scenarios=ScenarioSet(attributes, ("ore",) + tuple(config.metals)),
        locations=nodes,
        arcs=tuple(arcs),
        groups=(),
        hereditary=tuple(hereditary),
        horizon=T,
        mining_capacity=mining_capacity,
        cash_flow_discount=d1,
        risk_discounts=tuple(config.discount_rates),
        meta={'generator': config.model_dump(mode="json"), 'seed': int(seed)},
    )
    groups = cluster_blocks(instance, config.clusters_per_mine, config.kmeans_max_iter, cluster_rng)
    instance = instance.with_groups(groups)
    logger.info(
        f"Generated instance: {n_blocks} blocks, {len(groups)} groups, {S} scenarios, {T} periods, "
        f"{len(nodes)} locations"
    )
    return instance


@dataclass
class KMeansResult:
    """Labels, centroids and SSE trace of one k-means run"""
    labels: np.ndarray
    centroids: np.ndarray
    sse_history: List[float]
    iterations: int


def _nearest(points: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, float]:
    """Closest centroid per point and the resulting SSE"""
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)  # first minimum: ties go to the lowest centroid index
    return labels, float(d2[np.arange(len(points)), labels].sum())


def lloyd_kmeans(points: np.ndarray, k: int, max_iter: int, rng: np.random.Generator) -> KMeansResult:
    """Lloyd's iteration seeded with k distinct sample points; empty clusters are dropped"""
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if k < 1:
        raise InvalidConfigError("k must be at least 1")
    distinct = np.unique(points, axis=0)
    if k > len(distinct):
        logger.warning(f"k={k} exceeds {len(distinct)} distinct points; using {len(distinct)} clusters")
        k = len(distinct)
    centroids = distinct[np.sort(rng.choice(len(distinct), size=k, replace=False))]

    labels, sse = _nearest(points, centroids)
    history = [sse]
    iterations = 0
    for iterations in range(1, max_iter + 1):
        used = np.unique(labels)
        if len(used) < len(centroids):
            logger.warning(f"Dropping {len(centroids) - len(used)} empty cluster(s)")
        centroids = np.array([points[labels == c].mean(axis=0) for c in used])
        new_labels, sse = _nearest(points, centroids)
        history.append(sse)
        remapped = np.searchsorted(used, labels)
        if np.array_equal(new_labels, remapped):
            labels = new_labels
            break
        labels = new_labels
    return KMeansResult(labels, centroids, history, iterations)


def cluster_blocks(instance: MiningComplexInstance, k: int, max_iter: int, seed) -> List[Group]:
    """Group (block, scenario) grade vectors per mine; memberships may differ across scenarios"""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    grades = instance.grades()  # (metals, blocks, scenarios)
    S = instance.n_scenarios
    groups: List[Group] = []
    for mine_pos, mine_node in enumerate(instance.mines):
        blocks = np.nonzero(instance.block_mine == mine_pos)[0]
        if len(blocks) == 0:
            continue
        features = grades[:, blocks, :].transpose(1, 2, 0).reshape(len(blocks) * S, -1)
        result = lloyd_kmeans(features, k, max_iter, rng)
        labels = result.labels.reshape(len(blocks), S)
        destinations = instance.locations[mine_node].outgoing
        for c in range(len(result.centroids)):
            membership = np.zeros((instance.n_blocks, S), dtype=bool)
            membership[blocks] = labels == c
            if not membership.any():
                continue
            groups.append(Group(
                id=len(groups), mine=mine_pos, destinations=tuple(destinations),
                membership=membership, mean_grade=float(result.centroids[c].mean()),
            ))
    return groups


def build_initial_solution(instance: MiningComplexInstance, seed) -> Solution:
    """Random feasible solution from a greedy bench-by-bench pass"""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    T, S = instance.horizon, instance.n_scenarios
    period = np.full(instance.n_blocks, NOT_MINED, dtype=np.int64)
    remaining = instance.mining_capacity.astype(float).copy()

    # Benches top-down, shuffled within each bench: predecessors are always decided first
    order = np.lexsort((rng.permutation(instance.n_blocks), instance.block_bench))
    for b in order:
        preds = instance.predecessors[b]
        if len(preds):
            pred_periods = period[preds]
            if np.any(pred_periods == NOT_MINED):
                continue
            earliest = int(pred_periods.max())
        else:
            earliest = 0
        m = instance.block_mine[b]
        candidates = [t for t in range(earliest, T) if remaining[m, t] >= instance.tonnage[b]]
        if not candidates:
            continue
        t = candidates[int(rng.integers(len(candidates)))]
        period[b] = t
        remaining[m, t] -= instance.tonnage[b]

    destination = np.zeros((len(instance.groups), T), dtype=np.int64)
    for g in instance.groups:
        destination[g.id] = np.asarray(g.destinations)[rng.integers(len(g.destinations), size=T)]

    streams = np.zeros((len(instance.arcs), T, S))
    for node in instance.locations:
        arcs = instance.arcs_out[node.id]
        if not arcs:
            continue
        share = 1.0 / len(arcs)
        if node.kind == LocationKind.STOCKPILE:
            share *= 0.5
        streams[list(arcs)] = share
    cutoff = np.zeros((len(instance.mines), T), dtype=np.int64)
    return Solution(period, destination, streams, cutoff)


def _check_shapes(instance: MiningComplexInstance, solution: Solution):
    """Raise MalformedSolutionError when an array does not match the instance dimensions"""
    T, S = instance.horizon, instance.n_scenarios
    expected = {
        'period': (solution.period, (instance.n_blocks,)),
        'destination': (solution.destination, (len(instance.groups), T)),
        'streams': (solution.streams, (len(instance.arcs), T, S)),
        'cutoff': (solution.cutoff, (len(instance.mines), T)),
    }
    for name, (arr, shape) in expected.items():
        if arr.shape != shape:
            raise MalformedSolutionError(f"{name} has shape {arr.shape}, expected {shape}")
    if np.any((solution.period < NOT_MINED) | (solution.period >= T)):
        bad = int(np.nonzero((solution.period < NOT_MINED) | (solution.period >= T))[0][0])
        raise MalformedSolutionError(f"block {bad} has period {solution.period[bad]} outside the horizon")
    if solution.destination.size and (
        solution.destination.min() < 0 or solution.destination.max() >= len(instance.locations)
    ):
        raise MalformedSolutionError("destination refers to an unknown location")


def check_feasibility(instance: MiningComplexInstance, solution: Solution, tol: float = 1e-9) -> ViolationReport:
    """List every violated scenario-independent constraint and stream simplex rule"""
    _check_shapes(instance, solution)
    report = ViolationReport()

    pairs = instance.precedence_pairs
    if len(pairs):
        pb = solution.period[pairs[:, 0]]
        pu = solution.period[pairs[:, 1]]
        bad = (pb != NOT_MINED) & ((pu == NOT_MINED) | (pu > pb))
        for b, u in pairs[bad]:
            report.violations.append(Violation(
                "precedence", (int(b), int(u)),
                f"block {b} mined in period {solution.period[b] + 1} before predecessor {u}",
            ))

    for g in instance.groups:
        allowed = np.isin(solution.destination[g.id], g.destinations)
        for t in np.nonzero(~allowed)[0]:
            report.violations.append(Violation(
                "destination", (g.id, int(t)),
                f"group {g.id} sent to {solution.destination[g.id, t]} outside its destinations",
            ))

    y = solution.streams
    # NaN fails both range comparisons
    out_of_range = np.isnan(y) | (y < -tol) | (y > 1 + tol)
    for a, t, s in zip(*np.nonzero(out_of_range)):
        report.violations.append(Violation("stream_domain", (int(a), int(t), int(s)), f"y={y[a, t, s]}"))
    for node in instance.locations:
        arcs = list(instance.arcs_out[node.id])
        if not arcs:
            continue
        total = y[arcs].sum(axis=0)
        if node.kind == LocationKind.STOCKPILE:
            bad = total > 1 + tol
        else:
            bad = np.abs(total - 1.0) > tol
        for t, s in zip(*np.nonzero(bad)):
            report.violations.append(Violation(
                "stream_simplex", (node.id, int(t), int(s)),
                f"outgoing proportions of {node.name} sum to {total[t, s]:.12g}",
            ))
    return report


# --- JSON instance file -------------------------------------------------------

def _bound_list(values: Sequence[float]) -> Optional[List[Optional[float]]]:
    if not values:
        return None
    return [None if not math.isfinite(v) else float(v) for v in values]


def _bound_tuple(values: Optional[Sequence[Optional[float]]], missing: float) -> Tuple[float, ...]:
    if values is None:
        return ()
    return tuple(missing if v is None else float(v) for v in values)


def instance_to_dict(instance: MiningComplexInstance) -> Dict[str, Any]:
    """Row-major arrays; floats keep their exact (shortest round-trip) representation"""
    return {
        'meta': {
            'format_version': FORMAT_VERSION,
            'horizon': instance.horizon,
            'n_scenarios': instance.n_scenarios,
            'attribute_names': list(instance.scenarios.names),
            **instance.meta,
        },
        'blocks': [
            {'id': b.id, 'mine': b.mine, 'position': list(b.position), 'tonnage': b.tonnage,
             'predecessors': list(b.predecessors)}
            for b in instance.blocks
        ],
        'scenarios': instance.scenarios.attributes.tolist(),
        'locations': [
            {'id': n.id, 'name': n.name, 'kind': n.kind.value, 'outgoing': list(n.outgoing),
             'incoming': list(n.incoming), 'recovery': list(n.recovery),
             'recovery_attribute': n.recovery_attribute}
            for n in instance.locations
        ],
        'arcs': [list(a) for a in instance.arcs],
        'groups': {
            'definitions': [
                {'id': g.id, 'mine': g.mine, 'destinations': list(g.destinations), 'mean_grade': g.mean_grade}
                for g in instance.groups
            ],
            'assignment': instance.group_of.tolist(),
        },
        'bounds': {
            'mining_capacity': instance.mining_capacity.tolist(),
            'attributes': [
                {'attribute': h, 'upper': _bound_list(a.upper), 'lower': _bound_list(a.lower)}
                for h, a in enumerate(instance.hereditary)
            ],
        },
        'penalties': [
            {'attribute': h, 'surplus': a.surplus_penalty, 'shortage': a.shortage_penalty}
            for h, a in enumerate(instance.hereditary)
        ],
        'prices': [
            {'attribute': h, 'name': a.name, 'node': a.node, 'coefficients': list(a.coefficients), 'price': a.price,
             'per_tonne': a.per_tonne}
            for h, a in enumerate(instance.hereditary)
        ],
        'discounts': {
            'cash_flow': instance.cash_flow_discount,
            'table': list(instance.risk_discounts),
            'risk': [a.risk_discount for a in instance.hereditary],
        },
    }


def instance_from_dict(data: Dict[str, Any]) -> MiningComplexInstance:
    """Inverse of instance_to_dict"""
    meta = dict(data['meta'])
    horizon = int(meta.pop('horizon'))
    meta.pop('n_scenarios', None)
    meta.pop('format_version', None)
    names = tuple(meta.pop('attribute_names'))
    blocks = tuple(
        Block(b['id'], b['mine'], tuple(b['position']), float(b['tonnage']), tuple(b['predecessors']))
        for b in data['blocks']
    )
    attributes = np.asarray(data['scenarios'], dtype=float)
    locations = tuple(
        LocationNode(n['id'], n['name'], LocationKind(n['kind']), tuple(n['outgoing']), tuple(n['incoming']),
                     tuple(n.get('recovery', ())), n.get('recovery_attribute'))
        for n in data['locations']
    )
    assignment = np.asarray(data['groups']['assignment'], dtype=np.int64).reshape(len(blocks), attributes.shape[2])
    groups = tuple(
        Group(g['id'], g['mine'], tuple(g['destinations']), assignment == g['id'], float(g.get('mean_grade', 0.0)))
        for g in data['groups']['definitions']
    )
    bounds = {b['attribute']: b for b in data['bounds']['attributes']}
    penalties = {p['attribute']: p for p in data['penalties']}
    risk = data['discounts']['risk']
    hereditary = tuple(
        HereditaryAttribute(
            p['name'], p['node'], tuple(p['coefficients']), p['price'],
            upper=_bound_tuple(bounds[h]['upper'], math.inf),
            lower=_bound_tuple(bounds[h]['lower'], -math.inf),
            surplus_penalty=penalties[h]['surplus'], shortage_penalty=penalties[h]['shortage'],
            risk_discount=risk[h], per_tonne=bool(p.get('per_tonne', False)),
        )
        for h, p in enumerate(data['prices'])
    )
    return MiningComplexInstance(
        blocks=blocks,
        scenarios=ScenarioSet(attributes, names),
        locations=locations,
        arcs=tuple(tuple(a) for a in data['arcs']),
        groups=groups,
        hereditary=hereditary,
        horizon=horizon,
        mining_capacity=np.asarray(data['bounds']['mining_capacity'], dtype=float).reshape(-1, horizon),
        cash_flow_discount=data['discounts']['cash_flow'],
        risk_discounts=tuple(data['discounts'].get('table', ())),
        meta=meta,
    )


def save_instance(instance: MiningComplexInstance, path) -> Path:
    """Write the instance as JSON, creating parent directories"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(instance_to_dict(instance), f)
    logger.info(f"Saved instance to {path}")
    return path


def load_instance(path) -> MiningComplexInstance:
    """Read an instance written by save_instance"""
    with open(path, 'r', encoding='utf-8') as f:
        return instance_from_dict(json.load(f))
