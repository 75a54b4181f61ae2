"""Homogeneous base-model training: one encoder+fusion+head per family.

Each family is trained end-to-end on its own homogeneous scenario suite
(every agent runs that family) against ground-truth boxes visible to at
least one participating agent.  The optimization reuses the detection loss
and the warmup + multi-step schedule shape, with counts and learning rate
scaled for desk-scale runs.  After pretraining the models are frozen; the
collaboration protocol never updates them again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import backward
from .percept import FamilyRegistry, PerceptionModel, detect_head, encode, fuse, init_model
from .selftrain import PseudoLabelSet, SelfTrainError, TrainConfig, detection_loss, lr_schedule
from .world import Scenario, WorldConfig, generate_scenario, noise_seed_for, render_observation, visible_object_indices

__all__ = ["PretrainConfig", "pretrain_family", "pretrain_all", "ground_truth_labels"]


@dataclass(frozen=True)
class PretrainConfig:
    scenarios: int = 12
    frames_per_scenario: int = 6
    epochs: int = 10
    base_lr: float = 0.03
    warmup_epochs: int = 2
    milestones: tuple[int, ...] = (6, 8)
    gamma: float = 0.1
    momentum: float = 0.9
    seed: int = 7

    def schedule(self) -> TrainConfig:
        return TrainConfig(
            base_lr=self.base_lr,
            warmup_factor=0.001,
            warmup_epochs=self.warmup_epochs,
            milestones=self.milestones,
            gamma=self.gamma,
            epochs=self.epochs,
            momentum=self.momentum,
        )


def ground_truth_labels(scenario: Scenario, frame_index: int) -> PseudoLabelSet:
    """Hard targets from objects visible to at least one agent in the frame."""
    frame = scenario.frames[frame_index]
    visible: set[int] = set()
    for agent in scenario.agents:
        visible |= visible_object_indices(frame, agent, scenario.config.rays_per_radian)
    labels = tuple((frame.objects[oi], 1.0) for oi in sorted(visible))
    return PseudoLabelSet(labels=labels, mode="hard", threshold=0.0, source_agent="gt",
                          frame_index=frame_index)


def pretrain_family(family_id: str, registry: FamilyRegistry, world: WorldConfig,
                    cfg: PretrainConfig) -> PerceptionModel:
    """Train one family's full stack on its homogeneous scenario suite."""
    family = registry.get(family_id)
    train_world = replace(world, family_policy="homog", shots=0,
                          query_frames=cfg.frames_per_scenario)
    scenarios = [
        generate_scenario(train_world, seed=_pretrain_seed(cfg.seed, family_id, i),
                          families=(family_id,), scenario_id=f"pretrain-{family_id}-{i}")
        for i in range(cfg.scenarios)
    ]

    model = init_model(family, seed=_pretrain_seed(cfg.seed, family_id, 0x11))
    model.set_trainable(True)
    schedule_cfg = cfg.schedule()
    bev = world.bev_grid()
    params = list(model.params.values())
    velocity = {id(t): np.zeros_like(t.data) for t in params}

    samples = [(s, f) for s in scenarios for f in range(len(s.frames))]
    order_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x5E)))

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, schedule_cfg)
        perm = order_rng.permutation(len(samples))
        for si in perm:
            scenario, frame_index = samples[si]
            features = []
            for ai, agent in enumerate(scenario.agents):
                obs = render_observation(scenario.frames[frame_index], agent, scenario.config,
                                         noise_seed_for(scenario.seed, frame_index, ai))
                features.append(encode(obs, family, model, bev).values)
            raw = detect_head(fuse(features, model), model)
            labels = ground_truth_labels(scenario, frame_index)
            res = detection_loss(raw, labels, bev)
            loss_val = float(res.total.data)
            if not math.isfinite(loss_val):
                raise SelfTrainError(
                    f"pretraining diverged for family {family_id!r} "
                    f"(seed {cfg.seed}, epoch {epoch}, scenario {scenario.scenario_id}, frame {frame_index})"
                )
            for t in params:
                t.grad = None
            backward(res.total)
            for t in params:
                if t.grad is None:
                    continue
                v = velocity[id(t)]
                v *= cfg.momentum
                v += t.grad
                t.data = t.data - lr * v

    model.set_trainable(False)
    return model


def pretrain_all(registry: FamilyRegistry, world: WorldConfig, cfg: PretrainConfig,
                 family_ids: tuple[str, ...] | None = None) -> dict[str, PerceptionModel]:
    ids = family_ids if family_ids is not None else registry.ids()
    return {fid: pretrain_family(fid, registry, world, cfg) for fid in ids}


def _pretrain_seed(base: int, family_id: str, index: int) -> int:
    tag = sum(family_id.encode("utf-8"))
    return int(np.random.SeedSequence((base, tag, index)).generate_state(1)[0])
