"""Few-shot adapter self-training: pseudo-labels, loss, schedule, fine-tuning.

Stage-I traffic (collaborator features plus their group-fused predictions)
becomes a support set.  The ego then fine-tunes one adapter per
collaborator by running adapter -> frozen fusion -> frozen head -> loss and
taking plain SGD steps under a warmup + multi-step decay schedule.  Only
adapter parameters move; the fusion and head stay bit-identical.

The detection loss pairs a focal-modulated binary cross-entropy on the
objectness plane (soft targets supported, focal exponent 2) with a
smooth-L1 penalty on the six regression channels at positive cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import autodiff as nd
from .autodiff import Tensor, backward
from .adapter import AdapterParams, adapter_forward
from .geometry import ObjectBox
from .percept import DetectionSet, FeatureMap, PerceptError, PerceptionModel, RawHeadOutput, detect_head, fuse
from .world import GridSpec

__all__ = [
    "PseudoLabelSet",
    "StageOneFrame",
    "SupportEntry",
    "SupportSet",
    "TrainConfig",
    "TrainingLog",
    "SelfTrainError",
    "make_pseudo_labels",
    "build_support_set",
    "build_targets",
    "detection_loss",
    "LossBreakdown",
    "lr_schedule",
    "fine_tune_adapter",
]

FOCAL_GAMMA = 2  # focal exponent of the classification term


class SelfTrainError(RuntimeError):
    """Self-training preconditions violated or training diverged."""


@dataclass(frozen=True)
class PseudoLabelSet:
    """Training targets distilled from a collaborator's own predictions."""

    labels: tuple[tuple[ObjectBox, float], ...]   # (box, target_score)
    mode: str                                     # "hard" | "soft"
    threshold: float                              # tau (hard) or floor (soft)
    source_agent: str
    frame_index: int


@dataclass
class StageOneFrame:
    """Everything the ego received (or produced) in one Stage-I frame."""

    frame_index: int
    ego_feature: FeatureMap
    features: dict[str, FeatureMap]      # collaborator id -> feature, sender family space
    detections: dict[str, DetectionSet]  # collaborator id -> homogeneous-group predictions
    families: dict[str, str]             # collaborator id -> family id


@dataclass
class SupportEntry:
    frame_index: int
    ego_feature: FeatureMap
    group_features: tuple[FeatureMap, ...]
    labels: PseudoLabelSet


@dataclass
class SupportSet:
    collaborator_id: str
    family: str
    entries: tuple[SupportEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class TrainConfig:
    """Fine-tuning hyperparameters; defaults follow the reference recipe."""

    base_lr: float = 0.005
    warmup_factor: float = 0.001
    warmup_epochs: int = 8
    milestones: tuple[int, ...] = (12, 16)
    gamma: float = 0.1
    epochs: int = 20
    batch_size: int = 1
    pseudo_mode: str = "hard"        # hard | soft
    pseudo_threshold: float = 0.5    # tau for hard mode
    soft_floor: float = 0.2
    lambda_cls: float = 1.0
    lambda_reg: float = 2.0
    momentum: float = 0.0

    def __post_init__(self):
        if any(m <= self.warmup_epochs for m in self.milestones):
            raise SelfTrainError(f"milestones {self.milestones} must exceed warmup_epochs {self.warmup_epochs}")
        if self.milestones and self.epochs < max(self.milestones):
            raise SelfTrainError(f"epochs {self.epochs} must reach the last milestone {max(self.milestones)}")
        if self.pseudo_mode not in ("hard", "soft"):
            raise SelfTrainError(f"unknown pseudo_mode {self.pseudo_mode!r}")


def make_pseudo_labels(preds: DetectionSet, mode: str, threshold: float) -> PseudoLabelSet:
    """Filter predictions into training targets.

    hard: keep confidence >= threshold, target 1.  soft: keep confidence >=
    threshold (the floor) and carry the confidence as the target score.
    """
    if mode not in ("hard", "soft"):
        raise SelfTrainError(f"unknown pseudo-label mode {mode!r}")
    kept = []
    for det in preds.detections:
        if det.confidence < threshold:
            continue
        target = 1.0 if mode == "hard" else det.confidence
        kept.append((det.box, target))
    return PseudoLabelSet(
        labels=tuple(kept),
        mode=mode,
        threshold=threshold,
        source_agent="",
        frame_index=preds.frame_index,
    )


def build_support_set(records: list[StageOneFrame], collaborator_id: str, ego_family: str,
                      mode: str, threshold: float) -> SupportSet:
    """Assemble the per-collaborator support set from Stage-I traffic.

    For each support frame this collects the feature maps of every agent
    homogeneous with the collaborator and the pseudo-labels distilled from
    that group's own fused predictions.
    """
    if not records:
        raise SelfTrainError("no Stage-I frames recorded")
    families = records[0].families
    if collaborator_id not in families:
        raise SelfTrainError(f"unknown collaborator {collaborator_id!r}")
    family = families[collaborator_id]
    if family == ego_family:
        raise SelfTrainError(
            f"collaborator {collaborator_id!r} is homogeneous with the ego; no adapter is needed"
        )
    group = sorted(cid for cid, fam in families.items() if fam == family)
    entries = []
    for rec in records:
        labels = make_pseudo_labels(rec.detections[collaborator_id], mode, threshold)
        labels = PseudoLabelSet(
            labels=labels.labels,
            mode=labels.mode,
            threshold=labels.threshold,
            source_agent=collaborator_id,
            frame_index=rec.frame_index,
        )
        entries.append(
            SupportEntry(
                frame_index=rec.frame_index,
                ego_feature=rec.ego_feature,
                group_features=tuple(rec.features[cid] for cid in group),
                labels=labels,
            )
        )
    return SupportSet(collaborator_id=collaborator_id, family=family, entries=tuple(entries))


def build_targets(labels: PseudoLabelSet, grid: GridSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Rasterize labels into per-cell targets.

    Returns (score_target (1,H,W), positive_mask (1,H,W), regression_target
    (6,H,W), skipped) where skipped counts labels whose center fell outside
    the grid.  When two labels share a cell the stronger target wins.
    """
    h, w = grid.cells_y, grid.cells_x
    scores = np.zeros((1, h, w))
    mask = np.zeros((1, h, w))
    reg = np.zeros((6, h, w))
    skipped = 0
    m = grid.meters_per_cell
    for box, target in labels.labels:
        cell = grid.cell_of(box.center_x, box.center_y)
        if cell is None:
            skipped += 1
            continue
        iy, ix = cell
        if target <= scores[0, iy, ix]:
            continue
        cx0, cy0 = grid.cell_center(iy, ix)
        scores[0, iy, ix] = target
        mask[0, iy, ix] = 1.0
        reg[:, iy, ix] = (
            (box.center_x - cx0) / m,
            (box.center_y - cy0) / m,
            math.log(box.length),
            math.log(box.width),
            math.sin(box.yaw),
            math.cos(box.yaw),
        )
    return scores, mask, reg, skipped


@dataclass
class LossBreakdown:
    total: Tensor
    cls_term: float
    reg_term: float
    positives: int
    skipped: int


def detection_loss(raw: RawHeadOutput, labels: PseudoLabelSet, grid: GridSpec,
                   lambda_cls: float = 1.0, lambda_reg: float = 2.0) -> LossBreakdown:
    """Focal BCE over all cells plus smooth-L1 at positive cells.

    The classification target is the (possibly soft) label score at the cell
    containing each label center and 0 elsewhere; the focal weight is
    (target - p)^2 so confidently wrong cells dominate.  The regression term
    averages over positives and is 0 when there are none.
    """
    scores, mask, reg_target, skipped = build_targets(labels, grid)
    n_pos = int(mask.sum())

    x = raw.objectness
    t = Tensor(scores)
    p = nd.sigmoid(x)
    focal = nd.mul(nd.sub(t, p), nd.sub(t, p))
    bce = nd.add(nd.mul(t, nd.softplus(nd.mul(x, -1.0))), nd.mul(Tensor(1.0 - scores), nd.softplus(x)))
    cls = nd.tmean(nd.mul(focal, bce))

    diff = nd.sub(raw.regression, Tensor(reg_target))
    masked = nd.mul(nd.smooth_l1(diff), Tensor(mask))
    reg = nd.tsum(masked) * (1.0 / max(1, n_pos))

    total = cls * lambda_cls + reg * lambda_reg
    return LossBreakdown(
        total=total,
        cls_term=float(cls.data),
        reg_term=float(reg.data),
        positives=n_pos,
        skipped=skipped,
    )


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then multi-step decay at the milestones.

    Computed in exact rational arithmetic and rounded once at the end, so
    the emitted floats match their decimal values exactly.
    """
    if not (0 <= epoch < cfg.epochs):
        raise SelfTrainError(f"epoch {epoch} outside [0, {cfg.epochs})")
    base = Fraction(str(cfg.base_lr))
    wf = Fraction(str(cfg.warmup_factor))
    if epoch < cfg.warmup_epochs:
        lr = base * (wf + (1 - wf) * Fraction(epoch, cfg.warmup_epochs))
    else:
        lr = base
        g = Fraction(str(cfg.gamma))
        for milestone in cfg.milestones:
            if epoch >= milestone:
                lr *= g
    return float(lr)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    positives: int


@dataclass
class TrainingLog:
    collaborator_id: str
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,lr,loss,positives"]
        for r in self.epochs:
            lines.append(f"{r.epoch},{r.lr!r},{r.loss!r},{r.positives}")
        return "\n".join(lines) + "\n"


def fine_tune_adapter(support: SupportSet, ego_model: PerceptionModel, params: AdapterParams,
                      cfg: TrainConfig) -> TrainingLog:
    """Adapter-only SGD against the support set; fusion and head stay frozen.

    Every epoch visits the support entries in order (batch size 1): forward
    adapter -> fuse (with the ego's own feature for that frame) -> head ->
    loss, backward, plain gradient step at ``lr_schedule(epoch)``.
    """
    if not support.entries:
        raise SelfTrainError("empty support set")
    if ego_model.trainable:
        raise SelfTrainError("ego fusion/head must be frozen during adapter fine-tuning")
    trainable = params.trainable_tensors()
    if not all(t.requires_grad for t in trainable):
        raise SelfTrainError("adapter parameters must be trainable")

    velocity = {id(t): np.zeros_like(t.data) for t in trainable} if cfg.momentum > 0.0 else None
    log = TrainingLog(collaborator_id=support.collaborator_id)
    grid = support.entries[0].ego_feature.grid

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        losses = []
        positives = 0
        for entry in support.entries:
            adapted = [adapter_forward(f, params) for f in entry.group_features]
            candidates = [entry.ego_feature.values] + [a.values for a in adapted]
            fused = fuse(candidates, ego_model)
            raw = detect_head(fused, ego_model)
            res = detection_loss(raw, entry.labels, grid, cfg.lambda_cls, cfg.lambda_reg)
            loss_val = float(res.total.data)
            if not math.isfinite(loss_val):
                raise SelfTrainError(
                    f"non-finite loss while fine-tuning {support.collaborator_id!r} "
                    f"(epoch {epoch}, frame {entry.frame_index})"
                )
            for t in trainable:
                t.grad = None
            backward(res.total)
            for t in trainable:
                if t.grad is None:
                    continue
                if velocity is not None:
                    v = velocity[id(t)]
                    v *= cfg.momentum
                    v += t.grad
                    t.data = t.data - lr * v
                else:
                    t.data = t.data - lr * t.grad
            losses.append(loss_val)
            positives += res.positives
        log.epochs.append(EpochRecord(epoch=epoch, lr=lr, loss=float(np.mean(losses)), positives=positives))
    return log
