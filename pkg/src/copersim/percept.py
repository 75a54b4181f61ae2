"""Toy heterogeneous encoders, attention fusion, detection head, and decoding.

Each encoder family mean-pools the sensor-resolution occupancy grid down to
the shared BEV grid, applies two same-padded convolutions with a
family-specific kernel size and activation, and finishes with a fixed
channel permutation plus per-channel affine.  The permutation/affine
constants are part of the family definition (not trained), so two families
occupy visibly different semantic spaces even on identical input.

Fusion is per-cell attention: a 1x1 scoring convolution rates every
candidate map, a softmax across candidates turns the scores into per-cell
convex weights, and the fused map is the weighted sum.  The head is a pair
of 1x1 convolutions producing objectness logits and six regression channels
(cell offsets, log dims, sin/cos yaw).  Decoding applies a confidence floor
and greedy rotated-IoU NMS.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as nd
from .autodiff import Tensor
from .geometry import ObjectBox, greedy_nms, normalize_yaw, rotated_iou  # noqa: F401  (rotated_iou re-exported)
from .world import GridSpec, Observation

__all__ = [
    "EncoderFamily",
    "FamilyRegistry",
    "default_registry",
    "PerceptionModel",
    "FeatureMap",
    "Detection",
    "DetectionSet",
    "RawHeadOutput",
    "PerceptError",
    "init_model",
    "encode",
    "fuse",
    "detect_head",
    "decode_nms",
    "pad_or_truncate_channels",
    "model_to_bytes",
    "model_from_bytes",
    "save_model",
    "load_model",
]

WEIGHTS_MAGIC = b"CPSM"
WEIGHTS_VERSION = 1

# decode-time clamps keep garbage regressions (e.g. unadapted fusion) finite
_REG_OFFSET_CLIP = 2.0          # cells
_REG_LOGDIM_CLIP = (-2.0, 3.0)  # log meters


class PerceptError(RuntimeError):
    """Perception stack misuse: unknown family, channel mismatch, etc."""


@dataclass(frozen=True)
class EncoderFamily:
    """Architecture constants of one encoder family (semantic space)."""

    family_id: str
    channels: int
    kernel_size: int
    activation: str              # relu | explin
    permutation: tuple[int, ...]
    affine_scale: tuple[float, ...]
    affine_shift: tuple[float, ...]

    def __post_init__(self):
        if self.kernel_size % 2 != 1:
            raise PerceptError(f"family {self.family_id}: kernel size must be odd")
        if sorted(self.permutation) != list(range(self.channels)):
            raise PerceptError(f"family {self.family_id}: invalid channel permutation")
        if len(self.affine_scale) != self.channels or len(self.affine_shift) != self.channels:
            raise PerceptError(f"family {self.family_id}: affine constants must have {self.channels} entries")


def make_family(family_id: str, channels: int, kernel_size: int, activation: str, seed: int,
                scale_range: tuple[float, float] = (0.7, 1.8)) -> EncoderFamily:
    """Derive a family's fixed permutation and affine constants from a seed."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xFA)))
    perm = tuple(int(i) for i in rng.permutation(channels))
    scale = tuple(float(s) for s in rng.uniform(scale_range[0], scale_range[1], size=channels))
    shift = tuple(float(s) for s in rng.uniform(-0.3, 0.3, size=channels))
    return EncoderFamily(family_id, channels, kernel_size, activation, perm, scale, shift)


class FamilyRegistry:
    """Registered encoder families, keyed by family id."""

    def __init__(self):
        self._families: dict[str, EncoderFamily] = {}

    def register(self, family: EncoderFamily) -> None:
        if family.family_id in self._families:
            raise PerceptError(f"family {family.family_id!r} already registered")
        self._families[family.family_id] = family

    def get(self, family_id: str) -> EncoderFamily:
        try:
            return self._families[family_id]
        except KeyError:
            raise PerceptError(f"unregistered encoder family {family_id!r}") from None

    def ids(self) -> tuple[str, ...]:
        return tuple(self._families)

    def __contains__(self, family_id: str) -> bool:
        return family_id in self._families


def default_registry() -> FamilyRegistry:
    reg = FamilyRegistry()
    reg.register(make_family("lidar_a", channels=16, kernel_size=5, activation="relu", seed=11))
    reg.register(make_family("lidar_b", channels=24, kernel_size=3, activation="explin", seed=23))
    return reg


@dataclass
class PerceptionModel:
    """Named parameter tensors of one family's encoder + fusion + head."""

    family_id: str
    params: dict[str, Tensor]

    def set_trainable(self, trainable: bool) -> None:
        for t in self.params.values():
            t.requires_grad = trainable
            t._live = trainable
            t.grad = None

    @property
    def trainable(self) -> bool:
        return any(t.requires_grad for t in self.params.values())


def init_model(family: EncoderFamily, seed: int, hidden: int | None = None) -> PerceptionModel:
    """He-style seeded initialization of all trainable parameters."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x1D)))
    c, k = family.channels, family.kernel_size
    h = hidden if hidden is not None else c

    def conv_init(c_out, c_in, kk):
        std = np.sqrt(2.0 / (c_in * kk * kk))
        return Tensor(rng.normal(0.0, std, size=(c_out, c_in, kk, kk)), requires_grad=True)

    params = {
        "enc.w1": conv_init(h, 1, k),
        "enc.b1": Tensor(np.zeros(h), requires_grad=True),
        "enc.w2": conv_init(c, h, k),
        "enc.b2": Tensor(np.zeros(c), requires_grad=True),
        "fuse.w": conv_init(1, c, 1),
        "fuse.b": Tensor(np.zeros(1), requires_grad=True),
        "head.obj_w": conv_init(1, c, 1),
        "head.obj_b": Tensor(np.zeros(1), requires_grad=True),
        "head.reg_w": conv_init(6, c, 1),
        "head.reg_b": Tensor(np.zeros(6), requires_grad=True),
    }
    return PerceptionModel(family_id=family.family_id, params=params)


@dataclass
class FeatureMap:
    """BEV feature tensor tagged with its semantic space and grid placement."""

    values: Tensor               # (C, H, W)
    family: str
    grid: GridSpec


@dataclass(frozen=True)
class Detection:
    box: ObjectBox
    confidence: float


@dataclass
class DetectionSet:
    """Decoded boxes with confidences, sorted descending."""

    detections: tuple[Detection, ...]
    frame_index: int
    frame_tag: str = "world"

    def __len__(self) -> int:
        return len(self.detections)

    def boxes(self) -> list[ObjectBox]:
        return [d.box for d in self.detections]

    def confidences(self) -> list[float]:
        return [d.confidence for d in self.detections]


@dataclass
class RawHeadOutput:
    objectness: Tensor           # (1, H, W) logits
    regression: Tensor           # (6, H, W): dx, dy, log l, log w, sin yaw, cos yaw


def _family_mix_conv(family: EncoderFamily) -> tuple[Tensor, Tensor]:
    """The family's fixed permutation+affine as a constant 1x1 convolution."""
    c = family.channels
    kern = np.zeros((c, c, 1, 1))
    for i in range(c):
        kern[i, family.permutation[i], 0, 0] = family.affine_scale[i]
    return Tensor(kern), Tensor(np.asarray(family.affine_shift))


def encode(obs: Observation, family: EncoderFamily, model: PerceptionModel, bev: GridSpec) -> FeatureMap:
    """Run one agent's observation through its family encoder.

    Pools the sensor grid down to the BEV grid, applies the two
    family-specific convolutions, then the fixed channel permutation and
    per-channel affine that manufacture the family's semantic space.
    """
    if model.family_id != family.family_id:
        raise PerceptError(f"model weights are for family {model.family_id!r}, not {family.family_id!r}")
    factor_f = obs.spec.cells_y / bev.cells_y
    factor = int(round(factor_f))
    if abs(factor_f - factor) > 1e-9 or obs.spec.cells_x != factor * bev.cells_x:
        raise PerceptError(
            f"observation grid {obs.spec.cells_y}x{obs.spec.cells_x} does not pool onto "
            f"BEV grid {bev.cells_y}x{bev.cells_x}"
        )
    x = Tensor(obs.grid)
    pooled = nd.avg_pool2(x, factor) if factor > 1 else x
    k = family.kernel_size
    pad = (k - 1) // 2
    h = nd.pointwise(nd.conv2d(pooled, model.params["enc.w1"], model.params["enc.b1"], pad), family.activation)
    f = nd.pointwise(nd.conv2d(h, model.params["enc.w2"], model.params["enc.b2"], pad), family.activation)
    mix_w, mix_b = _family_mix_conv(family)
    out = nd.conv2d(f, mix_w, mix_b, 0)
    return FeatureMap(values=out, family=family.family_id, grid=bev)


def fuse(candidates: list[Tensor], model: PerceptionModel) -> Tensor:
    """Per-cell attention fusion of ego-space candidate maps.

    Every candidate is scored by the frozen 1x1 scoring convolution; a
    softmax across candidates yields per-cell convex weights.
    """
    if not candidates:
        raise PerceptError("fuse: empty candidate sequence")
    c_ego = model.params["fuse.w"].shape[1]
    for i, cand in enumerate(candidates):
        if cand.data.ndim != 3 or cand.shape[0] != c_ego:
            raise PerceptError(
                f"fuse: candidate {i} has shape {cand.shape}, expected ({c_ego}, H, W); "
                "heterogeneous features must go through the adapter first"
            )
    scores = [nd.conv2d(cand, model.params["fuse.w"], model.params["fuse.b"], 0) for cand in candidates]
    weights = nd.softmax_stack(scores)
    out = nd.mul(candidates[0], weights[0])
    for cand, w in zip(candidates[1:], weights[1:]):
        out = nd.add(out, nd.mul(cand, w))
    return out


def detect_head(fused: Tensor, model: PerceptionModel) -> RawHeadOutput:
    """Objectness and regression planes from the fused map (1x1 convolutions)."""
    obj = nd.conv2d(fused, model.params["head.obj_w"], model.params["head.obj_b"], 0)
    reg = nd.conv2d(fused, model.params["head.reg_w"], model.params["head.reg_b"], 0)
    return RawHeadOutput(objectness=obj, regression=reg)


def decode_nms(raw: RawHeadOutput, grid: GridSpec, conf_floor: float = 0.25,
               nms_iou: float = 0.15, frame_index: int = 0) -> DetectionSet:
    """Threshold objectness, build boxes from the regression planes, run NMS."""
    if not (0.0 <= conf_floor <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise PerceptError(f"decode_nms: conf_floor {conf_floor} / nms_iou {nms_iou} outside [0, 1]")
    logits = raw.objectness.data[0]
    conf = 1.0 / (1.0 + np.exp(-np.clip(logits, -60.0, 60.0)))
    reg = raw.regression.data
    iy_all, ix_all = np.nonzero(conf >= conf_floor)
    m = grid.meters_per_cell

    cx = grid.origin_x + (ix_all + 0.5) * m + np.clip(reg[0, iy_all, ix_all], -_REG_OFFSET_CLIP, _REG_OFFSET_CLIP) * m
    cy = grid.origin_y + (iy_all + 0.5) * m + np.clip(reg[1, iy_all, ix_all], -_REG_OFFSET_CLIP, _REG_OFFSET_CLIP) * m
    length = np.exp(np.clip(reg[2, iy_all, ix_all], *_REG_LOGDIM_CLIP))
    width = np.exp(np.clip(reg[3, iy_all, ix_all], *_REG_LOGDIM_CLIP))
    yaw = np.arctan2(reg[4, iy_all, ix_all], reg[5, iy_all, ix_all])

    boxes = [
        ObjectBox(float(cx[i]), float(cy[i]), float(length[i]), float(width[i]), normalize_yaw(float(yaw[i])))
        for i in range(len(iy_all))
    ]
    confs = [float(conf[iy, ix]) for iy, ix in zip(iy_all, ix_all)]

    kept = greedy_nms(boxes, confs, nms_iou)
    dets = sorted((Detection(boxes[i], confs[i]) for i in kept), key=lambda d: -d.confidence)
    return DetectionSet(detections=tuple(dets), frame_index=frame_index)


def pad_or_truncate_channels(values: Tensor, channels: int) -> Tensor:
    """Zero-pad or truncate a (C,H,W) map to a channel count (no adaptation).

    This is the direct-fusion baseline's channel reconciliation; it makes no
    attempt to align semantic spaces.
    """
    c, h, w = values.shape
    if c == channels:
        return values
    data = values.data
    if c > channels:
        return Tensor(data[:channels].copy())
    out = np.zeros((channels, h, w))
    out[:c] = data
    return Tensor(out)


def model_to_bytes(model: PerceptionModel) -> bytes:
    """Versioned binary serialization with family id and per-tensor shape headers."""
    buf = io.BytesIO()
    fam = model.family_id.encode("utf-8")
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<HH", WEIGHTS_VERSION, len(fam)))
    buf.write(fam)
    names = sorted(model.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        nb = name.encode("utf-8")
        t = model.params[name]
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", t.data.ndim))
        for d in t.data.shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def model_from_bytes(blob: bytes) -> PerceptionModel:
    buf = io.BytesIO(blob)
    magic = buf.read(4)
    if magic != WEIGHTS_MAGIC:
        raise PerceptError("not a model weights blob (bad magic)")
    version, fam_len = struct.unpack("<HH", buf.read(4))
    if version != WEIGHTS_VERSION:
        raise PerceptError(f"unsupported weights version {version}")
    family_id = buf.read(fam_len).decode("utf-8")
    (count,) = struct.unpack("<I", buf.read(4))
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", buf.read(2))
        name = buf.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape).copy()
        params[name] = Tensor(data)
    return PerceptionModel(family_id=family_id, params=params)


def save_model(model: PerceptionModel, path) -> None:
    from pathlib import Path

    Path(path).write_bytes(model_to_bytes(model))


def load_model(path, registry: FamilyRegistry | None = None) -> PerceptionModel:
    from pathlib import Path

    model = model_from_bytes(Path(path).read_bytes())
    if registry is not None:
        family = registry.get(model.family_id)
        c = family.channels
        expect = {
            "enc.w2": (c, model.params["enc.w1"].shape[0], family.kernel_size, family.kernel_size),
            "fuse.w": (1, c, 1, 1),
            "head.obj_w": (1, c, 1, 1),
            "head.reg_w": (6, c, 1, 1),
        }
        for name, shape in expect.items():
            if model.params[name].shape != shape:
                raise PerceptError(
                    f"weights for {model.family_id!r}: tensor {name} has shape "
                    f"{model.params[name].shape}, expected {shape}"
                )
    return model
