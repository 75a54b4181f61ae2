"""Detection metrics: AP at rotated-IoU thresholds, mSAP/wSAP, cross matrix.

Matching is greedy per frame (predictions in descending confidence, each
taking the highest-IoU unmatched ground-truth box at or above the
threshold); the precision-recall curve ranks all predictions globally and
AP integrates the full precision envelope (all-point interpolation, no
sampling grid).

mSAP is the arithmetic mean of per-scenario AP; wSAP is the worst
(minimum) scenario AP.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import ObjectBox, rotated_iou
from .percept import DetectionSet

__all__ = [
    "FrameMatch",
    "ScenarioResult",
    "Report",
    "MetricsError",
    "ap_at_iou",
    "aggregate",
    "cross_matrix",
]

REPORT_SCHEMA_VERSION = 1


class MetricsError(RuntimeError):
    """Metric aggregation misuse (empty input, degenerate normalization)."""


@dataclass(frozen=True)
class FrameMatch:
    frame_index: int
    true_positives: int
    predictions: int
    ground_truths: int


@dataclass
class ScenarioResult:
    scenario_id: str
    ap: dict[float, float]
    frame_count: int
    matches: dict[float, tuple[FrameMatch, ...]] = field(default_factory=dict)


@dataclass
class Report:
    mode: str
    scenarios: list[ScenarioResult]
    msap: dict[float, float]
    wsap: dict[float, float]
    config_fingerprint: str
    seeds: list[int]

    def to_json(self) -> str:
        doc = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "mode": self.mode,
            "config_fingerprint": self.config_fingerprint,
            "seeds": list(self.seeds),
            "msap": {str(k): v for k, v in sorted(self.msap.items())},
            "wsap": {str(k): v for k, v in sorted(self.wsap.items())},
            "scenarios": [
                {
                    "scenario_id": s.scenario_id,
                    "frame_count": s.frame_count,
                    "ap": {str(k): v for k, v in sorted(s.ap.items())},
                }
                for s in self.scenarios
            ],
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    def to_csv(self) -> str:
        lines = ["scenario,mode,iou,ap"]
        for s in self.scenarios:
            for iou in sorted(s.ap):
                lines.append(f"{s.scenario_id},{self.mode},{iou},{s.ap[iou]!r}")
        for iou in sorted(self.msap):
            lines.append(f"__msap__,{self.mode},{iou},{self.msap[iou]!r}")
        for iou in sorted(self.wsap):
            lines.append(f"__wsap__,{self.mode},{iou},{self.wsap[iou]!r}")
        return "\n".join(lines) + "\n"


def _match_frame(dets: DetectionSet, gts: list[ObjectBox], iou_thresh: float) -> list[tuple[float, bool]]:
    """Greedy confidence-ordered matching; returns (confidence, is_tp) rows."""
    taken = [False] * len(gts)
    rows: list[tuple[float, bool]] = []
    order = sorted(range(len(dets.detections)), key=lambda i: (-dets.detections[i].confidence, i))
    for i in order:
        det = dets.detections[i]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = rotated_iou(det.box, gt)
            if iou >= iou_thresh and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            taken[best_j] = True
            rows.append((det.confidence, True))
        else:
            rows.append((det.confidence, False))
    return rows


def ap_at_iou(preds: dict[int, DetectionSet], gts: dict[int, list[ObjectBox]], iou_thresh: float,
              collect: list[FrameMatch] | None = None) -> float:
    """Average precision over aligned frames at one rotated-IoU threshold.

    Conventions for degenerate inputs: no ground truth and no predictions
    gives 1.0; predictions with no ground truth anywhere gives 0.0.
    """
    rows: list[tuple[float, int, int, bool]] = []   # conf, frame, rank-in-frame, tp
    total_gt = 0
    for frame_index in sorted(gts):
        frame_gts = gts[frame_index]
        total_gt += len(frame_gts)
        dets = preds.get(frame_index, DetectionSet(detections=(), frame_index=frame_index))
        matched = _match_frame(dets, frame_gts, iou_thresh)
        if collect is not None:
            collect.append(FrameMatch(
                frame_index=frame_index,
                true_positives=sum(1 for _, tp in matched if tp),
                predictions=len(matched),
                ground_truths=len(frame_gts),
            ))
        for rank, (conf, tp) in enumerate(matched):
            rows.append((conf, frame_index, rank, tp))

    if total_gt == 0:
        return 1.0 if not rows else 0.0
    if not rows:
        return 0.0

    rows.sort(key=lambda r: (-r[0], r[1], r[2]))
    tp_flags = np.array([r[3] for r in rows], dtype=np.float64)
    cum_tp = np.cumsum(tp_flags)
    precision = cum_tp / np.arange(1, len(rows) + 1)
    recall = cum_tp / total_gt

    mrec = np.concatenate(([0.0], recall, [recall[-1]]))
    mpre = np.concatenate(([1.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def evaluate_scenario(scenario_id: str, preds: dict[int, DetectionSet],
                      gts: dict[int, list[ObjectBox]], iou_thresholds: tuple[float, ...]) -> ScenarioResult:
    """AP at each threshold plus per-frame match counts for one scenario."""
    ap: dict[float, float] = {}
    matches: dict[float, tuple[FrameMatch, ...]] = {}
    for thresh in iou_thresholds:
        frames: list[FrameMatch] = []
        ap[thresh] = ap_at_iou(preds, gts, thresh, collect=frames)
        matches[thresh] = tuple(frames)
    return ScenarioResult(scenario_id=scenario_id, ap=ap, frame_count=len(gts), matches=matches)


def aggregate(results: list[ScenarioResult], mode: str, config_fingerprint: str = "",
              seeds: list[int] | None = None) -> Report:
    """mSAP (mean) and wSAP (minimum) over scenarios per IoU threshold."""
    if not results:
        raise MetricsError("aggregate: no scenario results")
    thresholds = sorted(results[0].ap)
    for r in results:
        if sorted(r.ap) != thresholds:
            raise MetricsError(f"aggregate: scenario {r.scenario_id} has mismatched IoU thresholds")
    msap = {t: float(np.mean([r.ap[t] for r in results])) for t in thresholds}
    wsap = {t: float(min(r.ap[t] for r in results)) for t in thresholds}
    return Report(mode=mode, scenarios=list(results), msap=msap, wsap=wsap,
                  config_fingerprint=config_fingerprint, seeds=list(seeds or []))


def cross_matrix(raw_ap: np.ndarray, scenario_ids: list[str]) -> np.ndarray:
    """Normalize the cross-scenario AP matrix by its diagonal.

    Entry (i, j) is the AP of the adapter trained on scenario i evaluated on
    scenario j, divided by (j, j).  The diagonal becomes exactly 1.
    """
    raw_ap = np.asarray(raw_ap, dtype=np.float64)
    n = raw_ap.shape[0]
    if raw_ap.shape != (n, n) or n != len(scenario_ids):
        raise MetricsError(f"cross_matrix: expected square matrix matching {len(scenario_ids)} scenarios")
    diag = np.diag(raw_ap)
    for sid, d in zip(scenario_ids, diag):
        if d == 0.0:
            raise MetricsError(f"cross_matrix: degenerate scenario {sid!r} has zero self-AP")
    norm = raw_ap / diag[None, :]
    np.fill_diagonal(norm, 1.0)
    return norm


def matrix_to_csv(matrix: np.ndarray, scenario_ids: list[str]) -> str:
    lines = ["," + ",".join(scenario_ids)]
    for i, sid in enumerate(scenario_ids):
        lines.append(sid + "," + ",".join(repr(float(v)) for v in matrix[i]))
    return "\n".join(lines) + "\n"


def matrix_to_plot_data(matrix: np.ndarray, scenario_ids: list[str]) -> str:
    """(x, y, value) triples, one per line, for external plotting."""
    lines = ["x,y,value"]
    for i in range(len(scenario_ids)):
        for j in range(len(scenario_ids)):
            lines.append(f"{i},{j},{float(matrix[i, j])!r}")
    return "\n".join(lines) + "\n"
