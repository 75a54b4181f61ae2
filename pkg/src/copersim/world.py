"""Synthetic BEV scenario generation and toy range-sensor rendering.

A scenario holds moving oriented boxes, a handful of static agents with
individual fields of view, and a support/query frame split.  Rendering
ray-casts each agent's surroundings (first hit wins, so boxes occlude each
other and their own far sides) and rasterizes the noisy hit points onto a
shared, ego-aligned occupancy grid at sensor resolution.  Everything is a
pure function of (config, seed), so scenarios and observations are
reproducible bit for bit.

The observation grid is ``sensor_upsample`` times finer than the BEV grid
the encoders work on; encoders mean-pool it down as their first step.  That
mirrors raw sensor data being bulkier than the feature maps derived from it,
which is what makes the payload accounting of the collaboration schemes
meaningful.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .geometry import ObjectBox, box_corners, normalize_yaw, rotated_iou

__all__ = [
    "GridSpec",
    "WorldConfig",
    "AgentSpec",
    "Frame",
    "Scenario",
    "Observation",
    "WorldError",
    "generate_scenario",
    "render_observation",
    "visible_object_indices",
    "noise_seed_for",
    "in_fov",
    "scenario_to_json",
    "scenario_from_json",
]

SCENARIO_SCHEMA_VERSION = 1


class WorldError(RuntimeError):
    """Scenario generation could not satisfy a placement constraint."""


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned grid in world coordinates; origin is the lower-left corner."""

    cells_y: int
    cells_x: int
    meters_per_cell: float
    origin_x: float
    origin_y: float

    def cell_of(self, x: float, y: float) -> tuple[int, int] | None:
        ix = int(math.floor((x - self.origin_x) / self.meters_per_cell))
        iy = int(math.floor((y - self.origin_y) / self.meters_per_cell))
        if 0 <= iy < self.cells_y and 0 <= ix < self.cells_x:
            return iy, ix
        return None

    def cell_center(self, iy: int, ix: int) -> tuple[float, float]:
        return (
            self.origin_x + (ix + 0.5) * self.meters_per_cell,
            self.origin_y + (iy + 0.5) * self.meters_per_cell,
        )

    def contains(self, x: float, y: float) -> bool:
        return self.cell_of(x, y) is not None


@dataclass(frozen=True)
class WorldConfig:
    """Knobs for scenario generation and sensing."""

    bev_cells: int = 40
    meters_per_cell: float = 1.0
    sensor_upsample: int = 2
    object_count: tuple[int, int] = (5, 8)
    object_length: tuple[float, float] = (3.8, 4.8)
    object_width: tuple[float, float] = (1.7, 2.1)
    max_speed: float = 0.35          # meters per frame
    placement_iou_max: float = 0.3
    narrow_view_fraction: float = 0.5
    agent_count: int = 3
    ego_fov: float = math.pi / 2
    collab_fov: float = 2.0 * math.pi
    sensor_range: float = 28.0
    rays_per_radian: float = 80.0
    noise_sigma: float = 0.05
    shots: int = 5                   # support frames (k)
    query_frames: int = 10
    family_policy: str = "hetero"    # hetero | homog | mixed
    agent_clearance: float = 3.5
    placement_attempts: int = 60

    @property
    def span(self) -> float:
        return self.bev_cells * self.meters_per_cell

    @property
    def sensor_cells(self) -> int:
        return self.bev_cells * self.sensor_upsample

    def sensor_grid(self) -> GridSpec:
        half = 0.5 * self.span
        return GridSpec(
            cells_y=self.sensor_cells,
            cells_x=self.sensor_cells,
            meters_per_cell=self.meters_per_cell / self.sensor_upsample,
            origin_x=-half,
            origin_y=-half,
        )

    def bev_grid(self) -> GridSpec:
        half = 0.5 * self.span
        return GridSpec(
            cells_y=self.bev_cells,
            cells_x=self.bev_cells,
            meters_per_cell=self.meters_per_cell,
            origin_x=-half,
            origin_y=-half,
        )


@dataclass(frozen=True)
class AgentSpec:
    agent_id: str
    pose: tuple[float, float, float]    # x, y, yaw
    encoder_family: str
    sensor_range: float
    fov: float
    is_ego: bool = False


@dataclass(frozen=True)
class Frame:
    index: int
    objects: tuple[ObjectBox, ...]
    poses: dict[str, tuple[float, float, float]]


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    seed: int
    config: WorldConfig
    agents: tuple[AgentSpec, ...]
    frames: tuple[Frame, ...]
    support_indices: tuple[int, ...]
    query_indices: tuple[int, ...]

    @property
    def ego(self) -> AgentSpec:
        return next(a for a in self.agents if a.is_ego)

    @property
    def collaborators(self) -> tuple[AgentSpec, ...]:
        return tuple(a for a in self.agents if not a.is_ego)


@dataclass
class Observation:
    agent_id: str
    grid: np.ndarray                 # (1, Hs, Ws), values in [0, 1]
    spec: GridSpec


def in_fov(pose: tuple[float, float, float], fov: float, sensor_range: float, x: float, y: float) -> bool:
    """Whether the point lies inside the agent's sensing cone and range."""
    dx, dy = x - pose[0], y - pose[1]
    if math.hypot(dx, dy) > sensor_range:
        return False
    if fov >= 2.0 * math.pi - 1e-12:
        return True
    bearing = normalize_yaw(math.atan2(dy, dx) - pose[2])
    return abs(bearing) <= 0.5 * fov


def _box_segments(objects: tuple[ObjectBox, ...]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Edge segments (p0, p1) of all boxes plus the owning object index."""
    p0, p1, owner = [], [], []
    for oi, box in enumerate(objects):
        c = box_corners(box)
        for e in range(4):
            p0.append(c[e])
            p1.append(c[(e + 1) % 4])
            owner.append(oi)
    if not p0:
        return np.empty((0, 2)), np.empty((0, 2)), np.empty((0,), dtype=int)
    return np.asarray(p0), np.asarray(p1), np.asarray(owner, dtype=int)


def _ray_hits(frame: Frame, agent: AgentSpec, rays_per_radian: float) -> tuple[np.ndarray, np.ndarray]:
    """First-hit points and owning object index for every ray that hits."""
    ox, oy, yaw = agent.pose
    n_rays = max(8, int(round(agent.fov * rays_per_radian)))
    rel = (np.arange(n_rays) + 0.5) / n_rays * agent.fov - 0.5 * agent.fov
    angles = yaw + rel
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)          # (R,2)

    p0, p1, owner = _box_segments(frame.objects)
    if len(p0) == 0:
        return np.empty((0, 2)), np.empty((0,), dtype=int)

    e = p1 - p0                                                        # (E,2)
    rel0 = p0 - np.array([ox, oy])                                     # (E,2)
    # 2-D cross products broadcast rays against edges -> (R,E)
    denom = dirs[:, 0:1] * e[None, :, 1] - dirs[:, 1:2] * e[None, :, 0]
    num_t = rel0[None, :, 0] * e[None, :, 1] - rel0[None, :, 1] * e[None, :, 0]
    num_u = rel0[None, :, 0] * dirs[:, 1:2] - rel0[None, :, 1] * dirs[:, 0:1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num_t / denom
        u = num_u / denom
    valid = (np.abs(denom) > 1e-12) & (t > 1e-9) & (u >= 0.0) & (u <= 1.0)
    t = np.where(valid, t, np.inf)
    best = t.min(axis=1)
    hit = best <= agent.sensor_range
    if not np.any(hit):
        return np.empty((0, 2)), np.empty((0,), dtype=int)
    ray_idx = np.nonzero(hit)[0]
    seg_idx = t[ray_idx].argmin(axis=1)
    pts = np.array([ox, oy]) + dirs[ray_idx] * best[ray_idx, None]
    return pts, owner[seg_idx]


def render_observation(
    frame: Frame, agent: AgentSpec, config: WorldConfig, noise_seed: int
) -> Observation:
    """Rasterize the agent's first-hit boundary points onto the shared grid.

    Positional noise with ``config.noise_sigma`` is applied per hit using a
    generator derived from ``noise_seed`` only, so rendering is deterministic.
    """
    grid = config.sensor_grid()
    half = 0.5 * config.span
    if not (abs(agent.pose[0]) <= half and abs(agent.pose[1]) <= half):
        raise WorldError(f"agent {agent.agent_id} pose {agent.pose[:2]} outside the world")

    data = np.zeros((1, grid.cells_y, grid.cells_x), dtype=np.float64)
    pts, _ = _ray_hits(frame, agent, config.rays_per_radian)
    if len(pts):
        if config.noise_sigma > 0.0:
            rng = np.random.default_rng(np.random.SeedSequence(noise_seed))
            pts = pts + rng.normal(0.0, config.noise_sigma, size=pts.shape)
        m = grid.meters_per_cell
        ix = np.floor((pts[:, 0] - grid.origin_x) / m).astype(int)
        iy = np.floor((pts[:, 1] - grid.origin_y) / m).astype(int)
        ok = (ix >= 0) & (ix < grid.cells_x) & (iy >= 0) & (iy < grid.cells_y)
        data[0, iy[ok], ix[ok]] = 1.0
    return Observation(agent_id=agent.agent_id, grid=data, spec=grid)


def visible_object_indices(frame: Frame, agent: AgentSpec, rays_per_radian: float = 80.0) -> set[int]:
    """Objects with at least one first-hit ray from this agent."""
    _, owners = _ray_hits(frame, agent, rays_per_radian)
    return set(int(o) for o in owners)


def noise_seed_for(scenario_seed: int, frame_index: int, agent_index: int) -> int:
    """Stable per-(frame, agent) rendering noise seed."""
    return int(np.random.SeedSequence((scenario_seed, frame_index, agent_index, 0xA5)).generate_state(1)[0])


def _try_generate(config: WorldConfig, seed: int, attempt: int, scenario_id: str) -> Scenario | None:
    rng = np.random.default_rng(np.random.SeedSequence((seed, attempt)))
    half = 0.5 * config.span

    # ego sits exactly at the grid center so the shared grid is ego-aligned
    ego_pose = (0.0, 0.0, normalize_yaw(rng.uniform(-math.pi, math.pi)))
    agents = [AgentSpec("ego", ego_pose, "", config.sensor_range, config.ego_fov, is_ego=True)]
    n_collab = config.agent_count - 1
    base_bearing = rng.uniform(0.0, 2.0 * math.pi)
    for i in range(n_collab):
        bearing = base_bearing + 2.0 * math.pi * i / n_collab + rng.uniform(-0.3, 0.3)
        radius = rng.uniform(9.0, min(15.0, half - 4.0))
        x, y = radius * math.cos(bearing), radius * math.sin(bearing)
        yaw = normalize_yaw(math.atan2(-y, -x))
        agents.append(AgentSpec(f"agent{i + 1}", (float(x), float(y), yaw), "", config.sensor_range, config.collab_fov))

    n_objects = int(rng.integers(config.object_count[0], config.object_count[1] + 1))
    n_outside = math.ceil(config.narrow_view_fraction * n_objects)

    margin = 3.0
    boxes: list[ObjectBox] = []
    for oi in range(n_objects):
        want_outside = oi < n_outside
        placed = None
        for _ in range(60):
            x = rng.uniform(-half + margin, half - margin)
            y = rng.uniform(-half + margin, half - margin)
            if want_outside and in_fov(ego_pose, config.ego_fov, config.sensor_range, x, y):
                continue
            length = rng.uniform(*config.object_length)
            width = rng.uniform(*config.object_width)
            yaw = normalize_yaw(rng.uniform(-math.pi, math.pi))
            cand = ObjectBox(x, y, length, width, yaw)
            if any(math.hypot(cand.center_x - a.pose[0], cand.center_y - a.pose[1]) < config.agent_clearance
                   for a in agents):
                continue
            if any(rotated_iou(cand, other) > config.placement_iou_max for other in boxes):
                continue
            placed = cand
            break
        if placed is None:
            return None
        boxes.append(placed)

    velocities = (
        rng.uniform(-config.max_speed, config.max_speed, size=(n_objects, 2))
        if n_objects
        else np.zeros((0, 2))
    )

    total_frames = config.shots + config.query_frames
    poses = {a.agent_id: a.pose for a in agents}
    frames: list[Frame] = []
    for t in range(total_frames):
        objs = []
        for oi, b in enumerate(boxes):
            x = b.center_x + velocities[oi, 0] * t
            y = b.center_y + velocities[oi, 1] * t
            if not (abs(x) <= half - 1.0 and abs(y) <= half - 1.0):
                return None
            objs.append(ObjectBox(x, y, b.length, b.width, b.yaw))
        if n_objects:
            outside = sum(
                0 if in_fov(ego_pose, config.ego_fov, config.sensor_range, o.center_x, o.center_y) else 1
                for o in objs
            )
            if outside < n_outside:
                return None
        frames.append(Frame(index=t, objects=tuple(objs), poses=dict(poses)))

    return Scenario(
        scenario_id=scenario_id,
        seed=seed,
        config=config,
        agents=tuple(agents),
        frames=tuple(frames),
        support_indices=tuple(range(config.shots)),
        query_indices=tuple(range(config.shots, total_frames)),
    )


def generate_scenario(config: WorldConfig, seed: int, families: tuple[str, ...] = ("lidar_a", "lidar_b"),
                      scenario_id: str | None = None) -> Scenario:
    """Deterministically build a scenario satisfying all placement constraints.

    Family assignment follows ``config.family_policy``: the ego always runs
    the first registered family; ``hetero`` gives every collaborator the
    second one, ``homog`` the first, ``mixed`` alternates over the rest.
    """
    if not (2 <= config.agent_count <= 4):
        raise WorldError(f"agent_count {config.agent_count} outside [2, 4]")
    if scenario_id is None:
        scenario_id = f"scn-{seed}"
    scenario = None
    for attempt in range(config.placement_attempts):
        scenario = _try_generate(config, seed, attempt, scenario_id)
        if scenario is not None:
            break
    if scenario is None:
        raise WorldError(
            "could not place objects after "
            f"{config.placement_attempts} attempts (constraints: pairwise IoU <= {config.placement_iou_max}, "
            f"narrow-view fraction {config.narrow_view_fraction}, in-bounds motion)"
        )

    def family_for(index: int, is_ego: bool) -> str:
        if is_ego or config.family_policy == "homog" or len(families) == 1:
            return families[0]
        if config.family_policy == "hetero":
            return families[1]
        if config.family_policy == "mixed":
            return families[1 + (index % (len(families) - 1))]
        raise WorldError(f"unknown family_policy {config.family_policy!r}")

    agents = tuple(
        AgentSpec(a.agent_id, a.pose, family_for(i, a.is_ego), a.sensor_range, a.fov, a.is_ego)
        for i, a in enumerate(scenario.agents)
    )
    return Scenario(
        scenario_id=scenario.scenario_id,
        seed=scenario.seed,
        config=config,
        agents=agents,
        frames=scenario.frames,
        support_indices=scenario.support_indices,
        query_indices=scenario.query_indices,
    )


def scenario_to_json(scenario: Scenario) -> str:
    doc = {
        "schema_version": SCENARIO_SCHEMA_VERSION,
        "scenario_id": scenario.scenario_id,
        "seed": scenario.seed,
        "config": asdict(scenario.config),
        "agents": [asdict(a) for a in scenario.agents],
        "frames": [
            {
                "index": f.index,
                "objects": [[o.center_x, o.center_y, o.length, o.width, o.yaw] for o in f.objects],
                "poses": {k: list(v) for k, v in f.poses.items()},
            }
            for f in scenario.frames
        ],
        "support_indices": list(scenario.support_indices),
        "query_indices": list(scenario.query_indices),
    }
    return json.dumps(doc, sort_keys=True)


def scenario_from_json(text: str) -> Scenario:
    doc = json.loads(text)
    version = doc.get("schema_version")
    if version != SCENARIO_SCHEMA_VERSION:
        raise WorldError(f"unsupported scenario schema version {version!r}")
    cfg_raw = dict(doc["config"])
    for key in ("object_count", "object_length", "object_width"):
        cfg_raw[key] = tuple(cfg_raw[key])
    config = WorldConfig(**cfg_raw)
    agents = tuple(
        AgentSpec(a["agent_id"], tuple(a["pose"]), a["encoder_family"], a["sensor_range"], a["fov"], a["is_ego"])
        for a in doc["agents"]
    )
    frames = tuple(
        Frame(
            index=f["index"],
            objects=tuple(ObjectBox(*vals) for vals in f["objects"]),
            poses={k: tuple(v) for k, v in f["poses"].items()},
        )
        for f in doc["frames"]
    )
    return Scenario(
        scenario_id=doc["scenario_id"],
        seed=doc["seed"],
        config=config,
        agents=agents,
        frames=frames,
        support_indices=tuple(doc["support_indices"]),
        query_indices=tuple(doc["query_indices"]),
    )
