"""Label assignment between predicted tracks and ground-truth tracks.

The track-centric scheme matches whole tracks first (by track IoU) and only
then assigns per-frame boxes from the winning candidates; the object-centric
scheme is the conventional per-frame max-IoU baseline kept for comparisons.
"""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .errors import PipelineError
from .geometry import Box7, ObjectClass, apply_pose, iou3d, normalize_yaw, to_canonical

OBJECT_CENTRIC_THRESHOLDS = {
    ObjectClass.VEHICLE: 0.45,
    ObjectClass.PEDESTRIAN: 0.35,
    ObjectClass.CYCLIST: 0.45,
}


@dataclass(frozen=True)
class GtTrack:
    """Ground-truth object track; frame gaps are allowed (occlusions)."""

    gt_track_id: int
    cls: ObjectClass
    entries: tuple          # of (frame_index, Box7)
    num_points_per_frame: tuple = None

    def __post_init__(self):
        entries = tuple((int(f), b) for f, b in self.entries)
        frames = [f for f, _ in entries]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise PipelineError("schema_error",
                                f"gt track {self.gt_track_id} frames not strictly increasing")
        object.__setattr__(self, "entries", entries)
        if self.num_points_per_frame is not None:
            npts = tuple(int(n) for n in self.num_points_per_frame)
            if len(npts) != len(entries):
                raise PipelineError("schema_error", "num_points_per_frame length mismatch")
            if any(n < 0 for n in npts):
                raise PipelineError("schema_error", "num_points_per_frame must be >= 0")
            object.__setattr__(self, "num_points_per_frame", npts)

    def boxes_by_frame(self) -> dict:
        return {f: b for f, b in self.entries}


@dataclass(frozen=True)
class ProposalLabel:
    """Target for one proposal box: the assigned GT box or Negative."""

    frame_index: int
    gt_track_id: int = None
    gt_box: Box7 = None
    iou: float = 0.0
    q: float = 0.0
    residual: tuple = None

    @property
    def positive(self) -> bool:
        return self.gt_box is not None


@dataclass(frozen=True)
class TrackAssignment:
    track_id: int
    matched: bool
    labels: tuple


@dataclass(frozen=True)
class AssignmentResult:
    tracks: tuple

    def by_track_id(self) -> dict:
        return {t.track_id: t for t in self.tracks}


def _boxes_by_frame(track) -> dict:
    if isinstance(track, GtTrack):
        return track.boxes_by_frame()
    return {e.frame_index: e.box for e in track.entries}


def _track_class(track) -> ObjectClass:
    return track.cls


def tiou(a, b) -> float:
    """Track IoU: summed per-frame iou3d over the common frames, divided by
    the size of the union of the two frame supports."""
    if _track_class(a) is not _track_class(b):
        raise PipelineError("schema_error", "tiou requires same-class tracks")
    boxes_a, boxes_b = _boxes_by_frame(a), _boxes_by_frame(b)
    union = len(boxes_a.keys() | boxes_b.keys())
    if union == 0:
        raise PipelineError("empty_tracks", "both tracks are empty")
    total = 0.0
    for f in sorted(boxes_a.keys() & boxes_b.keys()):
        x, y = boxes_a[f], boxes_b[f]
        # Canonical operand order keeps tiou(a, b) == tiou(b, a) bit-exact.
        if tuple(x.as_array()) > tuple(y.as_array()):
            x, y = y, x
        total += iou3d(x, y)
    return total / union


def soft_target(iou: float) -> float:
    """Soft classification target: min(1, max(0, 2*iou - 0.5))."""
    return min(1.0, max(0.0, 2.0 * iou - 0.5))


def residual_target(proposal: Box7, gt: Box7) -> np.ndarray:
    """Regression target from proposal to GT box.

    Center deltas are expressed in the proposal's canonical frame and divided
    by the proposal BEV diagonal (the z delta by the proposal height); sizes
    are log ratios; the yaw delta is normalized to (-pi, pi].
    """
    local = apply_pose(to_canonical(proposal), gt)
    diag = proposal.bev_diagonal
    return np.array([
        local.cx / diag,
        local.cy / diag,
        local.cz / proposal.h,
        math.log(gt.l / proposal.l),
        math.log(gt.w / proposal.w),
        math.log(gt.h / proposal.h),
        normalize_yaw(local.yaw),
    ])


def residual_decode(proposal: Box7, residual) -> Box7:
    """Inverse of residual_target: apply a residual to the proposal."""
    dx, dy, dz, dl, dw, dh, dyaw = (float(v) for v in residual)
    diag = proposal.bev_diagonal
    local = Box7(dx * diag, dy * diag, dz * proposal.h,
                 proposal.l * math.exp(dl), proposal.w * math.exp(dw),
                 proposal.h * math.exp(dh), dyaw)
    return apply_pose(to_canonical(proposal).inverse(), local)


def _label_for(frame_index, box, gt_track_id, gt_box):
    value = iou3d(box, gt_box)
    return ProposalLabel(frame_index, gt_track_id, gt_box, value, soft_target(value),
                         tuple(residual_target(box, gt_box)))


def two_round_assign(pred_tracks, gt_tracks, tiou_threshold=0.3) -> AssignmentResult:
    """Track-centric assignment.

    Round 1 collects, per predicted track, every same-class GT track whose
    TIoU exceeds the threshold. Round 2 walks the proposal frames and assigns
    the box of the highest-TIoU candidate that has a box at that frame (ties
    broken by lower gt_track_id); frames no candidate covers stay Negative.
    """
    if not 0.0 < tiou_threshold < 1.0:
        raise PipelineError("bad_config", f"tiou_threshold must be in (0, 1), got {tiou_threshold}")
    out = []
    for pred in pred_tracks:
        candidates = []
        for gt in gt_tracks:
            if gt.cls is not pred.cls:
                continue
            value = tiou(pred, gt)
            if value > tiou_threshold:
                candidates.append((value, gt))
        candidates.sort(key=lambda c: (-c[0], c[1].gt_track_id))
        candidate_boxes = [(gt.gt_track_id, gt.boxes_by_frame()) for _, gt in candidates]
        labels = []
        for entry in pred.entries:
            label = ProposalLabel(entry.frame_index)
            for gt_id, boxes in candidate_boxes:
                gt_box = boxes.get(entry.frame_index)
                if gt_box is not None:
                    label = _label_for(entry.frame_index, entry.box, gt_id, gt_box)
                    break
            labels.append(label)
        out.append(TrackAssignment(pred.track_id, bool(candidates), tuple(labels)))
    return AssignmentResult(tuple(out))


def object_centric_assign(pred_tracks, gt_tracks, thresholds=None) -> AssignmentResult:
    """Conventional per-frame baseline: each proposal takes its max-IoU GT box
    at the same frame and is positive iff that IoU clears the class threshold."""
    thresholds = dict(OBJECT_CENTRIC_THRESHOLDS) if thresholds is None else thresholds
    out = []
    for pred in pred_tracks:
        threshold = thresholds[pred.cls]
        gt_at = {}
        for gt in gt_tracks:
            if gt.cls is not pred.cls:
                continue
            for f, b in gt.entries:
                gt_at.setdefault(f, []).append((gt.gt_track_id, b))
        labels = []
        for entry in pred.entries:
            best_id, best_box, best_iou = None, None, 0.0
            for gt_id, gt_box in gt_at.get(entry.frame_index, ()):
                value = iou3d(entry.box, gt_box)
                if value > best_iou:
                    best_id, best_box, best_iou = gt_id, gt_box, value
            if best_box is not None and best_iou >= threshold:
                labels.append(_label_for(entry.frame_index, entry.box, best_id, best_box))
            else:
                labels.append(ProposalLabel(entry.frame_index, iou=best_iou))
        out.append(TrackAssignment(pred.track_id, any(l.positive for l in labels), tuple(labels)))
    return AssignmentResult(tuple(out))


class TrackCentricAssigner(BaseEstimator):
    """Config-friendly wrapper around two_round_assign."""

    def __init__(self, tiou_threshold=0.3):
        self.tiou_threshold = tiou_threshold

    def assign(self, pred_tracks, gt_tracks) -> AssignmentResult:
        return two_round_assign(pred_tracks, gt_tracks, self.tiou_threshold)


class ObjectCentricAssigner(BaseEstimator):
    """Config-friendly wrapper around object_centric_assign."""

    def __init__(self, vehicle_iou=0.45, pedestrian_iou=0.35, cyclist_iou=0.45):
        self.vehicle_iou = vehicle_iou
        self.pedestrian_iou = pedestrian_iou
        self.cyclist_iou = cyclist_iou

    def assign(self, pred_tracks, gt_tracks) -> AssignmentResult:
        return object_centric_assign(pred_tracks, gt_tracks, {
            ObjectClass.VEHICLE: self.vehicle_iou,
            ObjectClass.PEDESTRIAN: self.pedestrian_iou,
            ObjectClass.CYCLIST: self.cyclist_iou,
        })
