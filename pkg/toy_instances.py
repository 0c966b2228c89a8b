#!/usr/bin/env python3
"""
Hand-built tiny mining complexes

Small instances whose objective can be traced by hand. Used by the tests,
the oracle command and the example walkthrough.
"""

import math
from dataclasses import replace
from typing import Dict, Sequence, Tuple

import numpy as np

from complex_model import (
    Block,
    GeneratorConfig,
    Group,
    HereditaryAttribute,
    LocationKind,
    LocationNode,
    MiningComplexInstance,
    NOT_MINED,
    ScenarioSet,
    Solution,
    generate_synthetic_instance,
)


def _nodes(names: Sequence[Tuple[str, LocationKind]], arcs: Sequence[Tuple[int, int]],
           recovery: Dict[int, Tuple[float, ...]] = None) -> Tuple[LocationNode, ...]:
    recovery = recovery or {}
    out = []
    for i, (name, kind) in enumerate(names):
        out.append(LocationNode(
            i, name, kind,
            outgoing=tuple(b for a, b in arcs if a == i),
            incoming=tuple(a for a, b in arcs if b == i),
            recovery=recovery.get(i, ()),
        ))
    return tuple(out)


def single_block_instance(metal_price: float = 100.0, mining_cost: float = 1.0,
                          discount: float = 0.1) -> MiningComplexInstance:
    """10 t block holding 1 t of metal, mined straight into a processor (T=1, one scenario)"""
    nodes = _nodes([("mine", LocationKind.MINE), ("processor", LocationKind.PROCESSOR)], [(0, 1)])
    attributes = np.array([[[10.0]], [[1.0]]])
    return MiningComplexInstance(
        blocks=(Block(0, 0, (0, 0, 0), 10.0),),
        scenarios=ScenarioSet(attributes, ("ore", "metal")),
        locations=nodes,
        arcs=(),
        groups=(Group(0, 0, (1,), np.ones((1, 1), dtype=bool), 0.1),),
        hereditary=(
            HereditaryAttribute("mining_cost", 0, (1.0, 0.0), price=-mining_cost),
            HereditaryAttribute("revenue_metal", 1, (0.0, 1.0), price=metal_price),
        ),
        horizon=1,
        mining_capacity=np.array([[100.0]]),
        cash_flow_discount=discount,
    )


def shortage_instance(lower: float = 100.0, shortage_penalty: float = 7.0,
                      risk_discount: float = 0.0) -> MiningComplexInstance:
    """One block and a processor with a lower tonnage target in period 1"""
    base = single_block_instance()
    target = HereditaryAttribute(
        "processed_tonnage", 1, (1.0, 0.0), lower=(lower,), shortage_penalty=shortage_penalty,
        risk_discount=risk_discount,
    )
    return MiningComplexInstance(
        blocks=base.blocks, scenarios=base.scenarios, locations=base.locations, arcs=(),
        groups=base.groups, hereditary=base.hereditary + (target,), horizon=1,
        mining_capacity=base.mining_capacity, cash_flow_discount=base.cash_flow_discount,
    )


def stockpile_chain_instance() -> MiningComplexInstance:
    """mine -> stockpile -> processor over two periods; the block always goes to the stockpile"""
    nodes = _nodes(
        [("mine", LocationKind.MINE), ("stockpile", LocationKind.STOCKPILE), ("processor", LocationKind.PROCESSOR)],
        [(0, 1), (1, 2)],
        recovery={2: (1.0, 1.0)},
    )
    attributes = np.array([[[10.0]], [[1.0]]])
    return MiningComplexInstance(
        blocks=(Block(0, 0, (0, 0, 0), 10.0),),
        scenarios=ScenarioSet(attributes, ("ore", "metal")),
        locations=nodes,
        arcs=((1, 2),),
        groups=(Group(0, 0, (1,), np.ones((1, 1), dtype=bool), 0.1),),
        hereditary=(
            HereditaryAttribute("stock_level", 1, (1.0, 0.0)),
            HereditaryAttribute("processed_tonnage", 2, (1.0, 0.0)),
            HereditaryAttribute("revenue_metal", 2, (0.0, 1.0), price=100.0),
        ),
        horizon=2,
        mining_capacity=np.array([[100.0, 100.0]]),
        cash_flow_discount=0.0,
    )


def grade_recovery_instance(metal: Sequence[float] = (1.0, 2.0), intercept: float = 0.5,
                            slope: float = 2.0) -> MiningComplexInstance:
    """mine -> concentrator -> refinery; concentrator recovery = intercept + slope * head grade per scenario"""
    nodes = _nodes(
        [("mine", LocationKind.MINE), ("concentrator", LocationKind.PROCESSOR), ("refinery", LocationKind.PROCESSOR)],
        [(0, 1), (1, 2)],
    )
    nodes = (nodes[0], replace(nodes[1], recovery_attribute="recovery_curve"), nodes[2])
    S = len(metal)
    attributes = np.array([[[10.0] * S], [list(metal)]])
    return MiningComplexInstance(
        blocks=(Block(0, 0, (0, 0, 0), 10.0),),
        scenarios=ScenarioSet(attributes, ("ore", "metal")),
        locations=nodes,
        arcs=((1, 2),),
        groups=(Group(0, 0, (1,), np.ones((1, S), dtype=bool), 0.1),),
        hereditary=(
            HereditaryAttribute("recovery_curve", 1, (intercept, slope), per_tonne=True),
            HereditaryAttribute("revenue_metal", 2, (0.0, 1.0), price=100.0),
        ),
        horizon=2,
        mining_capacity=np.array([[100.0, 100.0]]),
        cash_flow_discount=0.0,
    )


def mined_in_first_period(instance: MiningComplexInstance, stream_share: float = 0.0) -> Solution:
    """Every block in period 1, each group to its first destination, every stream at stream_share"""
    T, S = instance.horizon, instance.n_scenarios
    destination = np.array([[g.destinations[0]] * T for g in instance.groups], dtype=np.int64).reshape(-1, T)
    return Solution(
        period=np.zeros(instance.n_blocks, dtype=np.int64),
        destination=destination,
        streams=np.full((len(instance.arcs), T, S), stream_share),
        cutoff=np.zeros((len(instance.mines), T), dtype=np.int64),
    )


def empty_schedule(instance: MiningComplexInstance) -> Solution:
    solution = mined_in_first_period(instance)
    solution.period[:] = NOT_MINED
    return solution


def column_instance(depth: int = 3, periods: int = 3, seed: int = 7) -> MiningComplexInstance:
    """Single vertical column of blocks; each block's only predecessor sits directly above it"""
    config = GeneratorConfig(grid=(1, 1, depth), n_scenarios=2, n_periods=periods, clusters_per_mine=1)
    return generate_synthetic_instance(config, seed)


def oracle_config(**overrides) -> GeneratorConfig:
    """Tiny complex for brute-force enumeration: 8 blocks, 2 periods, 2 scenarios, forced streams"""
    params = dict(
        grid=(2, 2, 2), n_scenarios=2, n_periods=2, n_processors=1, n_stockpiles=0,
        clusters_per_mine=2, block_tonnage=1000.0,
    )
    params.update(overrides)
    return GeneratorConfig(**params)


def single_block_value(metal_price: float = 100.0, mining_cost: float = 1.0, discount: float = 0.1) -> float:
    """Closed form for single_block_instance mined in period 1"""
    return (metal_price * 1.0 - mining_cost * 10.0) / (1.0 + discount)


def describe(instance: MiningComplexInstance) -> Dict[str, object]:
    return {
        'blocks': instance.n_blocks,
        'scenarios': instance.n_scenarios,
        'periods': instance.horizon,
        'groups': len(instance.groups),
        'locations': [f"{n.name} ({n.kind.value})" for n in instance.locations],
        'free_streams': sum(len(instance.arcs_out[j]) for j in range(len(instance.locations))
                            if instance.is_stockpile[j] or len(instance.arcs_out[j]) >= 2),
        'mining_capacity': [float(x) for x in instance.mining_capacity.ravel() if math.isfinite(x)],
    }
