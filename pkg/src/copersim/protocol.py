"""Collaboration protocol: message codec, session state machine, mode runner.

Messages are serialized to a versioned little-endian wire format even when
produced and consumed in the same process, so ``payload_bytes`` is the exact
transmitted size rather than an estimate.  Feature maps travel uint8
per-channel quantized (the receiving side works on the dequantized values);
raw observations travel as full float64 grids; detections travel as
float64 box records.  Under the default grids this yields the classic
payload ordering: raw-data sharing > feature sharing > detection sharing.

The PHCP session runs Stage I for the first k frames of a collaboration
(features + detections inbound, ego predicts from its own feature alone),
fine-tunes one adapter per heterogeneous collaborator exactly once at the
k-frame boundary, then switches to Stage II (features only, adapted fusion).
Baseline modes reuse the same frame bundles: direct (zero-pad/truncate
channels, no adapter), late (detection union + NMS), early (max-combined
raw grids through the ego stack), and the homogeneous oracle (collaborators
re-encoded with the ego's family).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapter import AdapterParams, AdapterRegistry, adapter_forward
from .geometry import ObjectBox, greedy_nms, normalize_yaw
from .percept import (
    Detection,
    DetectionSet,
    FamilyRegistry,
    FeatureMap,
    PerceptError,
    PerceptionModel,
    decode_nms,
    detect_head,
    encode,
    fuse,
    pad_or_truncate_channels,
)
from .selftrain import StageOneFrame, TrainConfig, TrainingLog, build_support_set, fine_tune_adapter
from .world import GridSpec, Observation, Scenario, noise_seed_for, render_observation
from .autodiff import Tensor

__all__ = [
    "Message",
    "ProtocolError",
    "MODES",
    "CollabSession",
    "FrameBundle",
    "ScenarioRunResult",
    "encode_message",
    "decode_message",
    "run_scenario",
    "payload_report",
    "write_trace",
    "read_trace",
]

WIRE_VERSION = 1
TRACE_SCHEMA_VERSION = 1

KIND_STAGE1 = 1
KIND_STAGE2 = 2
KIND_LATE = 3
KIND_EARLY = 4

_KIND_NAMES = {KIND_STAGE1: "stage1", KIND_STAGE2: "stage2", KIND_LATE: "late", KIND_EARLY: "early"}
_KIND_CODES = {v: k for k, v in _KIND_NAMES.items()}

MODES = ("phcp", "direct", "late", "early", "homog_oracle")


class ProtocolError(RuntimeError):
    """Protocol misuse: unestablished session, bad wire data, missing weights."""


@dataclass
class Message:
    """Decoded wire message; payload_bytes is the exact serialized length."""

    version: int
    sender: str
    frame_index: int
    kind: str
    payload_bytes: int
    raw: bytes
    feature: FeatureMap | None = None
    detections: DetectionSet | None = None
    observation: Observation | None = None


def _quantize_feature(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lo = values.min(axis=(1, 2)).astype(np.float32)
    hi = values.max(axis=(1, 2)).astype(np.float32)
    span = (hi - lo).astype(np.float64)
    span[span == 0.0] = 1.0
    q = np.round((values - lo[:, None, None].astype(np.float64)) / span[:, None, None] * 255.0)
    return lo, hi, np.clip(q, 0, 255).astype(np.uint8)


def _dequantize_feature(lo: np.ndarray, hi: np.ndarray, q: np.ndarray) -> np.ndarray:
    span = (hi.astype(np.float64) - lo.astype(np.float64))
    return lo.astype(np.float64)[:, None, None] + q.astype(np.float64) / 255.0 * span[:, None, None]


def _write_str(buf: io.BytesIO, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<H", len(b)))
    buf.write(b)


def _read_str(buf: io.BytesIO) -> str:
    (n,) = struct.unpack("<H", buf.read(2))
    return buf.read(n).decode("utf-8")


def _write_grid(buf: io.BytesIO, grid: GridSpec) -> None:
    buf.write(struct.pack("<ddd", grid.meters_per_cell, grid.origin_x, grid.origin_y))


def _read_grid(buf: io.BytesIO, cells_y: int, cells_x: int) -> GridSpec:
    m, ox, oy = struct.unpack("<ddd", buf.read(24))
    return GridSpec(cells_y=cells_y, cells_x=cells_x, meters_per_cell=m, origin_x=ox, origin_y=oy)


def _write_feature(buf: io.BytesIO, fmap: FeatureMap) -> None:
    values = fmap.values.data
    c, h, w = values.shape
    _write_str(buf, fmap.family)
    buf.write(struct.pack("<HHH", c, h, w))
    _write_grid(buf, fmap.grid)
    lo, hi, q = _quantize_feature(values)
    buf.write(lo.astype("<f4").tobytes())
    buf.write(hi.astype("<f4").tobytes())
    buf.write(q.tobytes())


def _read_feature(buf: io.BytesIO) -> FeatureMap:
    family = _read_str(buf)
    c, h, w = struct.unpack("<HHH", buf.read(6))
    grid = _read_grid(buf, h, w)
    lo = np.frombuffer(buf.read(4 * c), dtype="<f4")
    hi = np.frombuffer(buf.read(4 * c), dtype="<f4")
    q = np.frombuffer(buf.read(c * h * w), dtype=np.uint8).reshape(c, h, w)
    return FeatureMap(values=Tensor(_dequantize_feature(lo, hi, q)), family=family, grid=grid)


def _write_detections(buf: io.BytesIO, dets: DetectionSet) -> None:
    buf.write(struct.pack("<I", len(dets.detections)))
    for d in dets.detections:
        b = d.box
        buf.write(struct.pack("<dddddd", b.center_x, b.center_y, b.length, b.width, b.yaw, d.confidence))


def _read_detections(buf: io.BytesIO, frame_index: int) -> DetectionSet:
    (n,) = struct.unpack("<I", buf.read(4))
    dets = []
    for _ in range(n):
        cx, cy, length, width, yaw, conf = struct.unpack("<dddddd", buf.read(48))
        dets.append(Detection(ObjectBox(cx, cy, length, width, yaw), conf))
    return DetectionSet(detections=tuple(dets), frame_index=frame_index)


def _write_observation(buf: io.BytesIO, obs: Observation) -> None:
    _, h, w = obs.grid.shape
    buf.write(struct.pack("<HH", h, w))
    _write_grid(buf, obs.spec)
    buf.write(np.ascontiguousarray(obs.grid[0], dtype="<f8").tobytes())


def _read_observation(buf: io.BytesIO, sender: str) -> Observation:
    h, w = struct.unpack("<HH", buf.read(4))
    spec = _read_grid(buf, h, w)
    data = np.frombuffer(buf.read(8 * h * w), dtype="<f8").reshape(1, h, w).copy()
    return Observation(agent_id=sender, grid=data, spec=spec)


def encode_message(sender: str, frame_index: int, kind: str, feature: FeatureMap | None = None,
                   detections: DetectionSet | None = None, observation: Observation | None = None) -> bytes:
    if kind not in _KIND_CODES:
        raise ProtocolError(f"unknown message kind {kind!r}")
    buf = io.BytesIO()
    buf.write(struct.pack("<BBI", WIRE_VERSION, _KIND_CODES[kind], frame_index))
    _write_str(buf, sender)
    if kind in ("stage1", "stage2"):
        if feature is None:
            raise ProtocolError(f"{kind} message requires a feature map")
        _write_feature(buf, feature)
    if kind in ("stage1", "late"):
        if detections is None:
            raise ProtocolError(f"{kind} message requires detections")
        _write_detections(buf, detections)
    if kind == "early":
        if observation is None:
            raise ProtocolError("early message requires an observation")
        _write_observation(buf, observation)
    return buf.getvalue()


def decode_message(blob: bytes) -> Message:
    buf = io.BytesIO(blob)
    version, kind_code, frame_index = struct.unpack("<BBI", buf.read(6))
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported wire version {version}")
    kind = _KIND_NAMES.get(kind_code)
    if kind is None:
        raise ProtocolError(f"unknown message kind code {kind_code}")
    sender = _read_str(buf)
    msg = Message(version=version, sender=sender, frame_index=frame_index, kind=kind,
                  payload_bytes=len(blob), raw=blob)
    if kind in ("stage1", "stage2"):
        msg.feature = _read_feature(buf)
    if kind in ("stage1", "late"):
        msg.detections = _read_detections(buf, frame_index)
    if kind == "early":
        msg.observation = _read_observation(buf, sender)
    return msg


def _transmit(sender: str, frame_index: int, kind: str, **content) -> Message:
    """Serialize then decode, so the consumer sees exactly the wire content."""
    return decode_message(encode_message(sender, frame_index, kind, **content))


@dataclass
class FrameBundle:
    """World-side per-frame products shared by every mode."""

    frame_index: int
    observations: dict[str, Observation]
    features: dict[str, FeatureMap]              # own-family features, full precision
    ego_family_features: dict[str, FeatureMap]   # collaborators re-encoded with the ego family
    group_detections: dict[str, DetectionSet]    # per collaborator: homogeneous-group predictions
    solo_detections: dict[str, DetectionSet]     # per agent: own-feature predictions


@dataclass
class _CollabState:
    family: str
    phase: str            # "stage1" | "stage2"
    remaining: int
    trained: bool = False


class CollabSession:
    """PHCP state machine for one ego across one scenario run."""

    def __init__(self, ego_id: str, ego_family: str, k: int, ego_model: PerceptionModel,
                 registry: AdapterRegistry, train_cfg: TrainConfig,
                 conf_floor: float, nms_iou: float, stage1_ego_mode: str = "solo"):
        if k < 1:
            raise ProtocolError(f"k must be >= 1, got {k}")
        if stage1_ego_mode not in ("solo", "late_fuse"):
            raise ProtocolError(f"unknown stage1_ego_mode {stage1_ego_mode!r}")
        self.ego_id = ego_id
        self.ego_family = ego_family
        self.k = k
        self.ego_model = ego_model
        self.registry = registry
        self.train_cfg = train_cfg
        self.conf_floor = conf_floor
        self.nms_iou = nms_iou
        self.stage1_ego_mode = stage1_ego_mode
        self.established = False
        self.states: dict[str, _CollabState] = {}
        self.stage1_records: list[StageOneFrame] = []
        self.training_logs: dict[str, TrainingLog] = {}
        self.train_calls: dict[str, int] = {}

    def establish(self, collaborators: dict[str, str]) -> None:
        """Register collaborator families and reset phases."""
        self.states = {
            cid: _CollabState(family=fam, phase="stage2" if fam == self.ego_family else "stage1",
                              remaining=0 if fam == self.ego_family else self.k)
            for cid, fam in collaborators.items()
        }
        self.established = True

    def heterogeneous_ids(self) -> list[str]:
        return sorted(cid for cid, st in self.states.items() if st.family != self.ego_family)

    def step(self, bundle: FrameBundle) -> tuple[DetectionSet, list[Message]]:
        """Advance the PHCP state machine by one frame."""
        if not self.established:
            raise ProtocolError("session not established; call establish() first")
        messages: list[Message] = []
        ego_feature = bundle.features[self.ego_id]
        grid = ego_feature.grid
        frame_index = bundle.frame_index

        stage1_active = any(st.phase == "stage1" for st in self.states.values())
        if stage1_active:
            features_rx: dict[str, FeatureMap] = {}
            dets_rx: dict[str, DetectionSet] = {}
            for cid in sorted(self.states):
                st = self.states[cid]
                if st.phase != "stage1":
                    continue
                msg = _transmit(cid, frame_index, "stage1",
                                feature=bundle.features[cid],
                                detections=bundle.group_detections[cid])
                messages.append(msg)
                features_rx[cid] = msg.feature
                dets_rx[cid] = msg.detections
                st.remaining -= 1
            self.stage1_records.append(StageOneFrame(
                frame_index=frame_index,
                ego_feature=ego_feature,
                features=features_rx,
                detections=dets_rx,
                families={cid: self.states[cid].family for cid in features_rx},
            ))

            # ego predicts from its own feature alone during Stage I
            fused = fuse([ego_feature.values], self.ego_model)
            raw = detect_head(fused, self.ego_model)
            result = decode_nms(raw, grid, self.conf_floor, self.nms_iou, frame_index)
            if self.stage1_ego_mode == "late_fuse":
                result = _merge_detections([result, *dets_rx.values()], self.nms_iou, frame_index)

            if all(st.remaining == 0 for st in self.states.values() if st.phase == "stage1"):
                self._finish_stage1()
            return result, messages

        # Stage II: features only, adapters applied
        candidates = [ego_feature.values]
        for cid in sorted(self.states):
            st = self.states[cid]
            msg = _transmit(cid, frame_index, "stage2", feature=bundle.features[cid])
            messages.append(msg)
            if st.family == self.ego_family:
                candidates.append(msg.feature.values)
            else:
                params = self.registry.get_or_create(cid, msg.feature.values.shape[0], st.family)
                candidates.append(adapter_forward(msg.feature, params).values)
        fused = fuse(candidates, self.ego_model)
        raw = detect_head(fused, self.ego_model)
        return decode_nms(raw, grid, self.conf_floor, self.nms_iou, frame_index), messages

    def _finish_stage1(self) -> None:
        for cid in self.heterogeneous_ids():
            st = self.states[cid]
            if st.trained:
                raise ProtocolError(f"adapter for {cid!r} already trained in this session")
            c_src = self.stage1_records[0].features[cid].values.shape[0]
            params = self.registry.get_or_create(cid, c_src, st.family)
            support = build_support_set(self.stage1_records, cid, self.ego_family,
                                        self.train_cfg.pseudo_mode, self._pseudo_threshold())
            self.training_logs[cid] = fine_tune_adapter(support, self.ego_model, params, self.train_cfg)
            self.train_calls[cid] = self.train_calls.get(cid, 0) + 1
            st.trained = True
            st.phase = "stage2"

    def _pseudo_threshold(self) -> float:
        return self.train_cfg.pseudo_threshold if self.train_cfg.pseudo_mode == "hard" else self.train_cfg.soft_floor


def _merge_detections(sets: list[DetectionSet], nms_iou: float, frame_index: int) -> DetectionSet:
    boxes: list[ObjectBox] = []
    confs: list[float] = []
    for ds in sets:
        for d in ds.detections:
            boxes.append(d.box)
            confs.append(d.confidence)
    kept = greedy_nms(boxes, confs, nms_iou)
    dets = sorted((Detection(boxes[i], confs[i]) for i in kept), key=lambda d: -d.confidence)
    return DetectionSet(detections=tuple(dets), frame_index=frame_index)


@dataclass
class ScenarioRunResult:
    scenario_id: str
    mode: str
    k: int
    query_detections: dict[int, DetectionSet]
    trace: list[Message] = field(default_factory=list)
    adapters: dict[str, AdapterParams] = field(default_factory=dict)
    training_logs: dict[str, TrainingLog] = field(default_factory=dict)


def build_frame_bundle(scenario: Scenario, frame_index: int, models: dict[str, PerceptionModel],
                       registry: FamilyRegistry, conf_floor: float, nms_iou: float,
                       need_group: bool = True, need_solo: bool = True,
                       need_ego_family: bool = True) -> FrameBundle:
    """Render, encode, and (optionally) pre-decode one frame for all agents."""
    frame = scenario.frames[frame_index]
    bev = scenario.config.bev_grid()
    ego = scenario.ego

    observations: dict[str, Observation] = {}
    features: dict[str, FeatureMap] = {}
    for idx, agent in enumerate(scenario.agents):
        if agent.encoder_family not in models:
            raise ProtocolError(
                f"no pretrained weights for family {agent.encoder_family!r}; run pretraining first"
            )
        obs = render_observation(frame, agent, scenario.config,
                                 noise_seed_for(scenario.seed, frame_index, idx))
        observations[agent.agent_id] = obs
        family = registry.get(agent.encoder_family)
        features[agent.agent_id] = encode(obs, family, models[agent.encoder_family], bev)

    ego_family_features: dict[str, FeatureMap] = {}
    if need_ego_family:
        ego_fam = registry.get(ego.encoder_family)
        for agent in scenario.collaborators:
            if agent.encoder_family == ego.encoder_family:
                ego_family_features[agent.agent_id] = features[agent.agent_id]
            else:
                ego_family_features[agent.agent_id] = encode(
                    observations[agent.agent_id], ego_fam, models[ego.encoder_family], bev
                )

    group_detections: dict[str, DetectionSet] = {}
    if need_group:
        by_family: dict[str, list[str]] = {}
        for agent in scenario.collaborators:
            by_family.setdefault(agent.encoder_family, []).append(agent.agent_id)
        for fam_id, members in by_family.items():
            model = models[fam_id]
            cands = [features[cid].values for cid in sorted(members)]
            raw = detect_head(fuse(cands, model), model)
            dets = decode_nms(raw, bev, conf_floor, nms_iou, frame_index)
            for cid in members:
                group_detections[cid] = dets

    solo_detections: dict[str, DetectionSet] = {}
    if need_solo:
        for agent in scenario.agents:
            model = models[agent.encoder_family]
            raw = detect_head(fuse([features[agent.agent_id].values], model), model)
            solo_detections[agent.agent_id] = decode_nms(raw, bev, conf_floor, nms_iou, frame_index)

    return FrameBundle(
        frame_index=frame_index,
        observations=observations,
        features=features,
        ego_family_features=ego_family_features,
        group_detections=group_detections,
        solo_detections=solo_detections,
    )


def run_scenario(scenario: Scenario, mode: str, models: dict[str, PerceptionModel],
                 registry: FamilyRegistry, train_cfg: TrainConfig,
                 conf_floor: float = 0.25, nms_iou: float = 0.15,
                 adapter_reduction: int = 4, adapter_seed: int = 0,
                 share_adapters_by_family: bool = False,
                 stage1_ego_mode: str = "solo",
                 preset_adapters: dict[str, AdapterParams] | None = None) -> ScenarioRunResult:
    """Run one scenario under one collaboration mode.

    Stage I consumes exactly the support frames; detections are recorded for
    the query frames only (for every mode, so comparisons are fair).  With
    ``preset_adapters`` the Stage-I phase is skipped and the given adapters
    are applied from the first frame (used by cross-scenario evaluation).
    """
    if mode not in MODES:
        raise ProtocolError(f"unknown mode {mode!r}; expected one of {MODES}")
    ego = scenario.ego
    ego_model = models[ego.encoder_family] if ego.encoder_family in models else None
    if ego_model is None:
        raise ProtocolError(f"no pretrained weights for family {ego.encoder_family!r}; run pretraining first")

    c_ego = registry.get(ego.encoder_family).channels
    adapter_registry = AdapterRegistry(c_ego=c_ego, reduction=adapter_reduction,
                                       ego_family=ego.encoder_family, seed=adapter_seed,
                                       share_by_family=share_adapters_by_family)
    session: CollabSession | None = None
    use_preset = preset_adapters is not None
    if mode == "phcp" and not use_preset:
        session = CollabSession(ego.agent_id, ego.encoder_family, scenario.config.shots, ego_model,
                                adapter_registry, train_cfg, conf_floor, nms_iou, stage1_ego_mode)
        session.establish({a.agent_id: a.encoder_family for a in scenario.collaborators})

    result = ScenarioRunResult(scenario_id=scenario.scenario_id, mode=mode,
                               k=scenario.config.shots, query_detections={})
    bev = scenario.config.bev_grid()
    query = set(scenario.query_indices)

    for frame_index in range(len(scenario.frames)):
        need_group = mode == "phcp" and not use_preset and session is not None and any(
            st.phase == "stage1" for st in session.states.values()
        )
        need_solo = mode == "late"
        need_ego_family = mode == "homog_oracle"
        bundle = build_frame_bundle(scenario, frame_index, models, registry, conf_floor, nms_iou,
                                    need_group=need_group, need_solo=need_solo,
                                    need_ego_family=need_ego_family)
        ego_feature = bundle.features[ego.agent_id]
        messages: list[Message] = []

        if mode == "phcp" and not use_preset:
            dets, messages = session.step(bundle)
        elif mode == "phcp" and use_preset:
            candidates = [ego_feature.values]
            for agent in sorted(scenario.collaborators, key=lambda a: a.agent_id):
                msg = _transmit(agent.agent_id, frame_index, "stage2", feature=bundle.features[agent.agent_id])
                messages.append(msg)
                if agent.encoder_family == ego.encoder_family:
                    candidates.append(msg.feature.values)
                else:
                    key = agent.encoder_family if share_adapters_by_family else agent.agent_id
                    params = preset_adapters[key]
                    candidates.append(adapter_forward(msg.feature, params).values)
            raw = detect_head(fuse(candidates, ego_model), ego_model)
            dets = decode_nms(raw, bev, conf_floor, nms_iou, frame_index)
        elif mode == "direct":
            candidates = [ego_feature.values]
            for agent in sorted(scenario.collaborators, key=lambda a: a.agent_id):
                msg = _transmit(agent.agent_id, frame_index, "stage2", feature=bundle.features[agent.agent_id])
                messages.append(msg)
                candidates.append(pad_or_truncate_channels(msg.feature.values, c_ego))
            raw = detect_head(fuse(candidates, ego_model), ego_model)
            dets = decode_nms(raw, bev, conf_floor, nms_iou, frame_index)
        elif mode == "late":
            received = [bundle.solo_detections[ego.agent_id]]
            for agent in sorted(scenario.collaborators, key=lambda a: a.agent_id):
                msg = _transmit(agent.agent_id, frame_index, "late",
                                detections=bundle.solo_detections[agent.agent_id])
                messages.append(msg)
                received.append(msg.detections)
            dets = _merge_detections(received, nms_iou, frame_index)
        elif mode == "early":
            combined = bundle.observations[ego.agent_id].grid.copy()
            for agent in sorted(scenario.collaborators, key=lambda a: a.agent_id):
                msg = _transmit(agent.agent_id, frame_index, "early",
                                observation=bundle.observations[agent.agent_id])
                messages.append(msg)
                combined = np.maximum(combined, msg.observation.grid)
            obs = Observation(agent_id=ego.agent_id, grid=combined,
                              spec=bundle.observations[ego.agent_id].spec)
            fmap = encode(obs, registry.get(ego.encoder_family), ego_model, bev)
            raw = detect_head(fuse([fmap.values], ego_model), ego_model)
            dets = decode_nms(raw, bev, conf_floor, nms_iou, frame_index)
        elif mode == "homog_oracle":
            candidates = [ego_feature.values]
            for agent in sorted(scenario.collaborators, key=lambda a: a.agent_id):
                msg = _transmit(agent.agent_id, frame_index, "stage2",
                                feature=bundle.ego_family_features[agent.agent_id])
                messages.append(msg)
                candidates.append(msg.feature.values)
            raw = detect_head(fuse(candidates, ego_model), ego_model)
            dets = decode_nms(raw, bev, conf_floor, nms_iou, frame_index)
        else:  # pragma: no cover
            raise ProtocolError(f"unhandled mode {mode!r}")

        result.trace.extend(messages)
        if frame_index in query:
            result.query_detections[frame_index] = dets

    if session is not None:
        result.training_logs = dict(session.training_logs)
        result.adapters = session.registry.snapshot_all()
    return result


def payload_report(results: list[ScenarioRunResult]) -> dict[str, dict[str, float]]:
    """Mean payload bytes per frame, per mode and per message kind (phase)."""
    if not results or all(not res.trace for res in results):
        raise ProtocolError("payload_report: empty trace")
    totals: dict[tuple[str, str], int] = {}
    frames: dict[tuple[str, str], set[tuple[str, int]]] = {}
    for res in results:
        for msg in res.trace:
            key = (res.mode, msg.kind)
            totals[key] = totals.get(key, 0) + msg.payload_bytes
            frames.setdefault(key, set()).add((res.scenario_id, msg.frame_index))
    table: dict[str, dict[str, float]] = {}
    for (mode, kind), total in totals.items():
        table.setdefault(mode, {})[kind] = total / len(frames[(mode, kind)])
    return table


def write_trace(path, messages: list[Message]) -> None:
    """Length-prefixed binary blocks plus a JSON index sidecar."""
    path = Path(path)
    index = {"schema_version": TRACE_SCHEMA_VERSION, "messages": []}
    with open(path, "wb") as fh:
        offset = 0
        for msg in messages:
            fh.write(struct.pack("<I", len(msg.raw)))
            fh.write(msg.raw)
            index["messages"].append({
                "offset": offset,
                "length": len(msg.raw),
                "sender": msg.sender,
                "frame_index": msg.frame_index,
                "kind": msg.kind,
                "payload_bytes": msg.payload_bytes,
            })
            offset += 4 + len(msg.raw)
    Path(str(path) + ".index.json").write_text(json.dumps(index, sort_keys=True, indent=1))


def read_trace(path) -> list[Message]:
    path = Path(path)
    messages = []
    blob = path.read_bytes()
    pos = 0
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        messages.append(decode_message(blob[pos : pos + n]))
        pos += n
    return messages
