#!/usr/bin/env python3
"""
Example usage of the Mining Complex Hyper-Heuristic

This script demonstrates how to generate an instance, evaluate a schedule,
run the baseline and a learning variant, and summarise the runs
programmatically.
"""

import logging
import os
import tempfile

from dotenv import load_dotenv

from complex_model import GeneratorConfig, build_initial_solution, check_feasibility, generate_synthetic_instance
from experiment_harness import ExperimentConfig, run_experiment, resolve_reference, summarize
from flow_evaluator import FlowEvaluator, period_cash_flows
from hyper_heuristic import AnnealingSchedule, SearchConfig, run
from perturbations import RegistryConfig, build_registry
from rl_agents import AgentConfig, make_agent

# Load environment variables
load_dotenv()
logging.basicConfig(level=os.getenv('MCHH_LOG_LEVEL', 'WARNING').upper())


def main():
    """Main example function"""
    print("🚀 Mining Complex Hyper-Heuristic Example")
    print("=" * 50)

    # Example 1: generate a small complex
    print("\n⛏️  Example 1: Generating a synthetic instance")
    print("-" * 30)
    generator = GeneratorConfig(grid=(6, 6, 3), n_processors=2, n_stockpiles=1, n_scenarios=5, n_periods=3,
                                clusters_per_mine=4)
    instance = generate_synthetic_instance(generator, seed=7)
    print(f"Blocks: {instance.n_blocks}, scenarios: {instance.n_scenarios}, periods: {instance.horizon}")
    print(f"Locations: {[loc.name for loc in instance.locations]}")
    print(f"Groups: {len(instance.groups)}, hereditary attributes: {len(instance.hereditary)}")

    # Example 2: evaluate the initial schedule
    print("\n📈 Example 2: Evaluating the initial schedule")
    print("-" * 30)
    initial = build_initial_solution(instance, seed=0)
    report = check_feasibility(instance, initial)
    print(f"Feasible: {report.feasible}")
    evaluator = FlowEvaluator(instance)
    f0 = evaluator.evaluate(initial)
    print(f"Expected objective: {f0:,.2f}")
    flows = period_cash_flows(instance, evaluator)
    for t, value in zip(flows["period"], flows["value"]):
        print(f"  period {t}: {value:,.2f}")

    # Example 3: baseline and PPO searches from the same start
    print("\n🤖 Example 3: Baseline vs PPO-guided search")
    print("-" * 30)
    search = SearchConfig(max_iterations=1500, epoch_length=50)
    schedule = AnnealingSchedule(interval=250)
    registry_config = RegistryConfig(size=12)
    registry = build_registry(instance, registry_config)
    print(f"Registry: {', '.join(d.name for d in registry)}")
    for variant in ("baseline", "ppo"):
        agent = make_agent(variant, len(registry), AgentConfig(hidden=(32, 32)), seed=0)
        result = run(instance, initial, registry, search, schedule, agent=agent, seed=0,
                     registry_config=registry_config)
        gain = result.best_objective - result.initial_objective
        print(f"{variant:>8}: best {result.best_objective:,.2f} (+{gain:,.2f}) after {result.iterations} moves, "
              f"{len(result.trace.epochs)} epochs")

    # Example 4: a small experiment matrix with a quantile report
    print("\n📊 Example 4: Experiment matrix")
    print("-" * 30)
    with tempfile.TemporaryDirectory() as out:
        config = ExperimentConfig(
            generator=generator, instance_seed=7, variants=["baseline", "a2c"], seeds=[0, 1, 2],
            search=SearchConfig(max_iterations=600, epoch_length=50), schedule=schedule,
            agent=AgentConfig(hidden=(32, 32)), registry=registry_config, output_dir=out,
        )
        summaries = run_experiment(config)
        z_star = resolve_reference(config, summaries)
        table = summarize(summaries, z_star, config.gap_thresholds)
        print(f"Z* (best of runs): {z_star:,.2f}")
        print(table[table['metric'] == 'iterations'][['variant', 'threshold', 'reached', 'p50', 'reduction_pct']]
              .to_string(index=False))

    print("\nFull scale: python cli.py run --config experiment.acceptance.json")
    print("            python cli.py report --config experiment.acceptance.json")

    print("\n" + "=" * 50)
    print("🎉 Example completed!")


if __name__ == "__main__":
    main()
