"""Suite-level orchestration shared by the CLI, tests, and demo scripts.

Builds scenario suites from derived seeds, runs collaboration modes over
them, extracts evaluation ground truth (objects visible to at least one
agent), and aggregates reports.  Everything is deterministic given the
experiment seeds.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .adapter import AdapterParams
from .geometry import ObjectBox
from .metrics import Report, ScenarioResult, aggregate, cross_matrix, evaluate_scenario
from .percept import FamilyRegistry, PerceptionModel
from .protocol import ScenarioRunResult, run_scenario
from .selftrain import TrainConfig
from .world import Scenario, WorldConfig, generate_scenario, visible_object_indices

__all__ = [
    "suite_seed",
    "build_suite",
    "ground_truth_boxes",
    "scenario_ground_truth",
    "evaluate_run",
    "run_suite",
    "cross_scenario_matrix",
]

DEFAULT_IOU_THRESHOLDS = (0.3, 0.5, 0.7)


def suite_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence((base_seed, index, 0x57E)).generate_state(1)[0])


def build_suite(world: WorldConfig, base_seed: int, count: int,
                families: tuple[str, ...] = ("lidar_a", "lidar_b")) -> list[Scenario]:
    """Generate ``count`` scenarios with seeds derived from one base seed."""
    return [
        generate_scenario(world, seed=suite_seed(base_seed, i), families=families,
                          scenario_id=f"scn-{base_seed}-{i}")
        for i in range(count)
    ]


def ground_truth_boxes(scenario: Scenario, frame_index: int) -> list[ObjectBox]:
    """Objects visible to at least one agent in the frame (evaluation GT)."""
    frame = scenario.frames[frame_index]
    visible: set[int] = set()
    for agent in scenario.agents:
        visible |= visible_object_indices(frame, agent, scenario.config.rays_per_radian)
    return [frame.objects[oi] for oi in sorted(visible)]


def scenario_ground_truth(scenario: Scenario) -> dict[int, list[ObjectBox]]:
    """Evaluation GT for the query frames only."""
    return {fi: ground_truth_boxes(scenario, fi) for fi in scenario.query_indices}


def evaluate_run(scenario: Scenario, result: ScenarioRunResult,
                 thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS) -> ScenarioResult:
    gts = scenario_ground_truth(scenario)
    return evaluate_scenario(scenario.scenario_id, result.query_detections, gts, thresholds)


def run_suite(scenarios: list[Scenario], mode: str, models: dict[str, PerceptionModel],
              registry: FamilyRegistry, train_cfg: TrainConfig,
              conf_floor: float = 0.25, nms_iou: float = 0.15,
              adapter_reduction: int = 4, adapter_seed: int = 0,
              thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS,
              stage1_ego_mode: str = "solo",
              ) -> tuple[list[ScenarioResult], list[ScenarioRunResult]]:
    """Run one mode over a scenario suite and evaluate the query frames."""
    scenario_results: list[ScenarioResult] = []
    run_results: list[ScenarioRunResult] = []
    for scenario in scenarios:
        res = run_scenario(scenario, mode, models, registry, train_cfg,
                           conf_floor=conf_floor, nms_iou=nms_iou,
                           adapter_reduction=adapter_reduction, adapter_seed=adapter_seed,
                           stage1_ego_mode=stage1_ego_mode)
        run_results.append(res)
        scenario_results.append(evaluate_run(scenario, res, thresholds))
    return scenario_results, run_results


def suite_report(scenarios: list[Scenario], mode: str, models: dict[str, PerceptionModel],
                 registry: FamilyRegistry, train_cfg: TrainConfig,
                 config_fingerprint: str = "", seeds: list[int] | None = None,
                 **kwargs) -> tuple[Report, list[ScenarioRunResult]]:
    scenario_results, run_results = run_suite(scenarios, mode, models, registry, train_cfg, **kwargs)
    report = aggregate(scenario_results, mode=mode, config_fingerprint=config_fingerprint, seeds=seeds)
    return report, run_results


def cross_scenario_matrix(scenarios: list[Scenario], models: dict[str, PerceptionModel],
                          registry: FamilyRegistry, train_cfg: TrainConfig,
                          conf_floor: float = 0.25, nms_iou: float = 0.15,
                          adapter_reduction: int = 4, adapter_seed: int = 0,
                          iou: float = 0.5) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Train per-scenario adapters, evaluate each on every scenario.

    Adapters transfer across scenarios by encoder family (collaborator
    line-ups differ between scenarios, the family gap does not).  Returns
    (raw AP matrix, diagonal-normalized matrix, scenario ids).
    """
    n = len(scenarios)
    adapters_per_scenario: list[dict[str, AdapterParams]] = []
    for scenario in scenarios:
        res = run_scenario(scenario, "phcp", models, registry, train_cfg,
                           conf_floor=conf_floor, nms_iou=nms_iou,
                           adapter_reduction=adapter_reduction, adapter_seed=adapter_seed,
                           share_adapters_by_family=True)
        adapters_per_scenario.append(res.adapters)

    raw = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            res = run_scenario(scenarios[j], "phcp", models, registry, train_cfg,
                               conf_floor=conf_floor, nms_iou=nms_iou,
                               adapter_reduction=adapter_reduction, adapter_seed=adapter_seed,
                               share_adapters_by_family=True,
                               preset_adapters=adapters_per_scenario[i])
            gts = scenario_ground_truth(scenarios[j])
            from .metrics import ap_at_iou

            raw[i, j] = ap_at_iou(res.query_detections, gts, iou)

    ids = [s.scenario_id for s in scenarios]
    norm = cross_matrix(raw, ids)
    return raw, norm, ids


def with_shots(world: WorldConfig, k: int) -> WorldConfig:
    """The same world config with a different support length."""
    return replace(world, shots=k)
