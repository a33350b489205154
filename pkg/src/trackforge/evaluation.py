"""Detection and tracking metrics: average precision, CLEAR-MOT scores,
failure inspection (totally-missed FNs, high-confidence FPs, high-precision
TPs), track life-cycle statistics, and motion-state classification.
"""

import enum
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator

from .assignment import GtTrack
from .errors import PipelineError
from .geometry import (
    LabeledBox,
    ObjectClass,
    bev_iou,
    bev_iou_matrix,
    iou3d,
    iou3d_matrix,
)
from .tracking import Tracklet

__all__ = [
    "MotionState",
    "ClearMotResult",
    "InspectionResult",
    "LifeCycleResult",
    "ClassReport",
    "EvalReport",
    "boxes_from_tracks",
    "boxes_from_gt",
    "average_precision",
    "clear_mot",
    "inspection",
    "life_cycle_analysis",
    "motion_state",
    "pool_sequences",
    "Evaluator",
]

AP_IOU_DEFAULTS = {
    ObjectClass.VEHICLE: 0.7,
    ObjectClass.PEDESTRIAN: 0.5,
    ObjectClass.CYCLIST: 0.5,
}
HIGH_TP_BEV_DEFAULTS = {
    ObjectClass.VEHICLE: 0.9,
    ObjectClass.PEDESTRIAN: 0.7,
    ObjectClass.CYCLIST: 0.7,
}
DYNAMIC_SPEED_DEFAULTS = {
    ObjectClass.VEHICLE: 1.0,
    ObjectClass.PEDESTRIAN: 0.2,
    ObjectClass.CYCLIST: 1.0,
}


class MotionState(enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


def boxes_from_tracks(tracks):
    """Flattens predicted tracks into per-frame labeled boxes."""
    out = []
    for t in tracks:
        for e in t.entries:
            out.append(LabeledBox(e.box, t.cls, e.score, e.frame_index))
    return out


def boxes_from_gt(gt_tracks):
    """Flattens ground-truth tracks into labeled boxes with score 1."""
    out = []
    for t in gt_tracks:
        for frame, box in t.entries:
            out.append(LabeledBox(box, t.cls, 1.0, frame))
    return out


def _pair_matrix(iou_fn, boxes_a, boxes_b):
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)))
    if iou_fn is iou3d:
        return iou3d_matrix(boxes_a, boxes_b)
    if iou_fn is bev_iou:
        return bev_iou_matrix(boxes_a, boxes_b)
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou_fn(a, b)
    return out


def _pred_order(preds):
    """Deterministic score-descending order with value-based tie breaking."""
    return sorted(range(len(preds)),
                  key=lambda i: (-preds[i].score, preds[i].frame_index,
                                 tuple(preds[i].box.as_array())))


def _greedy_match(preds, gts, iou_fn, threshold):
    """Score-descending greedy matching, one GT per prediction, same frame.

    Returns (order, tp_mask, matched_gt, matched_iou) where the arrays follow
    ``order`` (indices into preds sorted by descending score).
    """
    gt_frames = defaultdict(list)
    for j, g in enumerate(gts):
        gt_frames[g.frame_index].append(j)
    pred_frames = defaultdict(list)
    for i, p in enumerate(preds):
        pred_frames[p.frame_index].append(i)

    iou_cache = {}
    for frame, pidx in pred_frames.items():
        gidx = gt_frames.get(frame, [])
        mat = _pair_matrix(iou_fn, [preds[i].box for i in pidx],
                           [gts[j].box for j in gidx])
        for row, i in enumerate(pidx):
            iou_cache[i] = (gidx, mat[row])

    order = _pred_order(preds)
    taken = set()
    tp = np.zeros(len(order), dtype=bool)
    matched_gt = np.full(len(order), -1, dtype=int)
    matched_iou = np.zeros(len(order))
    for rank, i in enumerate(order):
        gidx, ious = iou_cache[i]
        best_j, best_iou = -1, 0.0
        for col, j in enumerate(gidx):
            if j in taken:
                continue
            if ious[col] > best_iou:
                best_j, best_iou = j, ious[col]
        if best_j >= 0 and best_iou >= threshold:
            taken.add(best_j)
            tp[rank] = True
            matched_gt[rank] = best_j
            matched_iou[rank] = best_iou
    return order, tp, matched_gt, matched_iou


def average_precision(preds, gts, iou_fn=iou3d, threshold=0.7):
    """All-point interpolated AP with greedy score-descending matching.

    ``preds`` and ``gts`` are labeled boxes of a single class; GT scores are
    ignored. Matching pairs boxes within the same frame only.
    """
    if not gts:
        raise PipelineError("no_ground_truth", "average precision needs ground truth boxes")
    if not preds:
        return 0.0
    _, tp, _, _ = _greedy_match(preds, gts, iou_fn, threshold)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / len(gts)
    precision = cum_tp / (cum_tp + cum_fp)
    # Precision envelope from the right, integrated over recall steps.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


@dataclass(frozen=True)
class ClearMotResult:
    mota: float
    motp: float
    ids_pct: float
    num_gt: int
    num_fn: int
    num_fp: int
    num_switches: int
    num_matches: int


def _threshold_for(thresholds, cls):
    if isinstance(thresholds, dict):
        return thresholds[cls]
    return float(thresholds)


def clear_mot(tracks, gt_tracks, iou_thresholds=None):
    """CLEAR protocol tracking scores.

    Matches within each class at its IoU threshold, carrying the previous
    frame's correspondences forward while they still clear the threshold,
    then resolving the rest with an optimal assignment. MOTA and IDS are
    reported against the total ground-truth box count, scaled by 100; MOTP
    is the mean (1 - iou3d) over matches, scaled by 100.
    """
    if iou_thresholds is None:
        iou_thresholds = {ObjectClass.VEHICLE: 0.7, ObjectClass.PEDESTRIAN: 0.5,
                          ObjectClass.CYCLIST: 0.5}

    gt_by_frame = defaultdict(list)
    for t in gt_tracks:
        for frame, box in t.entries:
            gt_by_frame[frame].append((t.gt_track_id, t.cls, box))
    pred_by_frame = defaultdict(list)
    for t in tracks:
        for e in t.entries:
            pred_by_frame[e.frame_index].append((t.track_id, t.cls, e.box))

    num_gt = sum(len(v) for v in gt_by_frame.values())
    if num_gt == 0:
        raise PipelineError("no_ground_truth", "CLEAR metrics need ground truth boxes")

    fn = fp = switches = 0
    motp_sum = 0.0
    matches_total = 0
    last_known = {}
    prev_matches = {}
    for frame in sorted(set(gt_by_frame) | set(pred_by_frame)):
        gts = gt_by_frame.get(frame, [])
        preds = pred_by_frame.get(frame, [])
        pred_pos = {tid: k for k, (tid, _, _) in enumerate(preds)}
        frame_matches = {}
        used_preds = set()

        # Carry over surviving correspondences from the previous frame.
        for gi, (gt_id, cls, box) in enumerate(gts):
            tid = prev_matches.get(gt_id)
            if tid is None or tid not in pred_pos or tid in used_preds:
                continue
            k = pred_pos[tid]
            if preds[k][1] is not cls:
                continue
            v = iou3d(box, preds[k][2])
            if v >= _threshold_for(iou_thresholds, cls):
                frame_matches[gt_id] = (tid, v)
                used_preds.add(tid)

        free_g = [gi for gi, (gt_id, _, _) in enumerate(gts) if gt_id not in frame_matches]
        free_p = [k for k, (tid, _, _) in enumerate(preds) if tid not in used_preds]
        if free_g and free_p:
            big = 1e6
            cost = np.full((len(free_g), len(free_p)), big)
            gmat = iou3d_matrix([gts[gi][2] for gi in free_g],
                                [preds[k][2] for k in free_p])
            for a, gi in enumerate(free_g):
                thr = _threshold_for(iou_thresholds, gts[gi][1])
                for b, k in enumerate(free_p):
                    if gts[gi][1] is preds[k][1] and gmat[a, b] >= thr:
                        cost[a, b] = 1.0 - gmat[a, b]
            rows, cols = linear_sum_assignment(cost)
            for a, b in zip(rows, cols):
                if cost[a, b] >= big:
                    continue
                gt_id = gts[free_g[a]][0]
                tid = preds[free_p[b]][0]
                frame_matches[gt_id] = (tid, gmat[a, b])

        for gt_id, (tid, v) in frame_matches.items():
            if gt_id in last_known and last_known[gt_id] != tid:
                switches += 1
            last_known[gt_id] = tid
            motp_sum += 1.0 - v
            matches_total += 1
        fn += len(gts) - len(frame_matches)
        fp += len(preds) - len(frame_matches)
        prev_matches = {gt_id: tid for gt_id, (tid, _) in frame_matches.items()}

    mota = (1.0 - (fn + fp + switches) / num_gt) * 100.0
    motp = (motp_sum / matches_total * 100.0) if matches_total else 0.0
    ids_pct = switches / num_gt * 100.0
    return ClearMotResult(mota, motp, ids_pct, num_gt, fn, fp, switches, matches_total)


@dataclass(frozen=True)
class InspectionResult:
    num_gt: int
    num_pred: int
    num_tp: int
    num_fp: int
    t_fn: int
    t_fn_ratio: float
    h_fp: int
    h_fp_ratio: float
    h_tp: int
    h_tp_ratio: float
    s_t: float
    s_t_reached: bool


def _cap_per_frame(preds, cap):
    by_frame = defaultdict(list)
    for p in preds:
        by_frame[p.frame_index].append(p)
    kept = []
    for frame in sorted(by_frame):
        group = sorted(by_frame[frame],
                       key=lambda p: (-p.score, tuple(p.box.as_array())))
        kept.extend(group[:cap])
    return kept


def _totally_missed(preds, gts):
    """Boolean per GT: no kept prediction in its frame overlaps it at all."""
    pred_frames = defaultdict(list)
    for p in preds:
        pred_frames[p.frame_index].append(p.box)
    missed = np.ones(len(gts), dtype=bool)
    by_frame = defaultdict(list)
    for j, g in enumerate(gts):
        by_frame[g.frame_index].append(j)
    for frame, gidx in by_frame.items():
        boxes = pred_frames.get(frame)
        if not boxes:
            continue
        mat = iou3d_matrix([gts[j].box for j in gidx], boxes)
        hit = mat.max(axis=1) > 0.0
        for row, j in enumerate(gidx):
            missed[j] = not hit[row]
    return missed


def inspection(preds, gts, normal_iou=0.7, high_bev_iou=0.9, cap=200):
    """Failure-profile counts for a single class.

    Predictions are truncated to the ``cap`` highest scores per frame. A GT
    box is totally missed (T-FN) when no kept prediction in its frame has any
    3D overlap with it. The calibration score ``s_t`` is the score of the
    prediction at which recall (greedy matching at ``normal_iou``) first
    reaches 50%; if recall never gets there, the minimum prediction score is
    used and ``s_t_reached`` is False. High-confidence FPs score at least
    ``s_t``; high-precision TPs match their GT with BEV IoU at least
    ``high_bev_iou``. Ratios are per GT (T-FN), per kept prediction (H-FP),
    and per TP (H-TP).
    """
    if not gts:
        raise PipelineError("no_ground_truth", "inspection needs ground truth boxes")
    kept = _cap_per_frame(preds, cap)
    t_fn = int(_totally_missed(kept, gts).sum())

    if not kept:
        return InspectionResult(len(gts), 0, 0, 0, t_fn, t_fn / len(gts),
                                0, 0.0, 0, 0.0, 0.0, False)

    order, tp, matched_gt, _ = _greedy_match(kept, gts, iou3d, normal_iou)
    scores = np.array([kept[i].score for i in order])
    recall = np.cumsum(tp) / len(gts)
    at_half = np.nonzero(recall >= 0.5)[0]
    if len(at_half):
        s_t = float(scores[at_half[0]])
        reached = True
    else:
        s_t = float(scores.min())
        reached = False

    h_fp = int(np.sum(~tp & (scores >= s_t)))
    h_tp = 0
    for rank, is_tp in enumerate(tp):
        if not is_tp:
            continue
        pred = kept[order[rank]]
        gt = gts[matched_gt[rank]]
        if bev_iou(pred.box, gt.box) >= high_bev_iou:
            h_tp += 1
    num_tp = int(tp.sum())
    num_fp = len(kept) - num_tp
    return InspectionResult(
        num_gt=len(gts), num_pred=len(kept), num_tp=num_tp, num_fp=num_fp,
        t_fn=t_fn, t_fn_ratio=t_fn / len(gts),
        h_fp=h_fp, h_fp_ratio=h_fp / len(kept),
        h_tp=h_tp, h_tp_ratio=(h_tp / num_tp) if num_tp else 0.0,
        s_t=s_t, s_t_reached=reached)


@dataclass(frozen=True)
class LifeCycleResult:
    lengths_s: tuple
    hist_counts: tuple
    hist_edges: tuple
    inferior_hist_counts: tuple
    inferior_track_ids: tuple


def life_cycle_analysis(gt_tracks, preds, cap=200, hz=10.0, bin_width_s=2.0):
    """Track-length histogram (seconds) and the inferior-track list.

    A GT track is inferior when more than 10% of its boxes are totally
    missed (zero 3D overlap with every kept prediction of that frame).
    """
    kept = _cap_per_frame(preds, cap)
    lengths = []
    inferior = []
    per_track_missed = {}
    for t in gt_tracks:
        boxes = [LabeledBox(box, t.cls, 1.0, frame) for frame, box in t.entries]
        missed = _totally_missed(kept, boxes)
        per_track_missed[t.gt_track_id] = missed
        lengths.append(len(t.entries) / hz)
        if missed.mean() > 0.10:
            inferior.append(t.gt_track_id)

    if lengths:
        top = max(lengths)
        edges = np.arange(0.0, top + bin_width_s, bin_width_s)
        if len(edges) < 2:
            edges = np.array([0.0, bin_width_s])
        counts, edges = np.histogram(lengths, bins=edges)
        inf_lengths = [l for l, t in zip(lengths, gt_tracks)
                       if t.gt_track_id in set(inferior)]
        inf_counts, _ = np.histogram(inf_lengths, bins=edges)
    else:
        counts = np.zeros(0, dtype=int)
        inf_counts = np.zeros(0, dtype=int)
        edges = np.array([0.0])
    return LifeCycleResult(tuple(lengths), tuple(int(c) for c in counts),
                           tuple(float(e) for e in edges),
                           tuple(int(c) for c in inf_counts), tuple(inferior))


def _entry_frames_and_centers(track):
    if isinstance(track, GtTrack):
        frames = [frame for frame, _ in track.entries]
        centers = [box.center for _, box in track.entries]
    else:
        frames = [e.frame_index for e in track.entries]
        centers = [e.box.center for e in track.entries]
    return frames, centers


def motion_state(track, speed_thresholds=None, hz=10.0):
    """Static/dynamic split by average speed (endpoint XY displacement over
    track duration). Single-entry tracks are static."""
    if speed_thresholds is None:
        speed_thresholds = DYNAMIC_SPEED_DEFAULTS
    frames, centers = _entry_frames_and_centers(track)
    if len(frames) < 2:
        return MotionState.STATIC
    duration = (frames[-1] - frames[0]) / hz
    disp = np.linalg.norm(np.asarray(centers[-1][:2]) - np.asarray(centers[0][:2]))
    threshold = _threshold_for(speed_thresholds, track.cls)
    return MotionState.DYNAMIC if disp / duration > threshold else MotionState.STATIC


@dataclass(frozen=True)
class ClassReport:
    cls: ObjectClass
    ap_3d: float
    ap_bev: float
    clear: ClearMotResult
    inspection: InspectionResult
    life_cycle: LifeCycleResult


@dataclass(frozen=True)
class EvalReport:
    classes: tuple

    def for_class(self, cls):
        for report in self.classes:
            if report.cls is cls:
                return report
        raise KeyError(cls)

    def as_dict(self):
        out = {}
        for r in self.classes:
            out[r.cls.value] = {
                "ap_3d": r.ap_3d,
                "ap_bev": r.ap_bev,
                "mota": r.clear.mota,
                "motp": r.clear.motp,
                "ids_pct": r.clear.ids_pct,
                "num_gt": r.clear.num_gt,
                "num_fn": r.clear.num_fn,
                "num_fp": r.clear.num_fp,
                "num_switches": r.clear.num_switches,
                "t_fn": r.inspection.t_fn,
                "t_fn_ratio": r.inspection.t_fn_ratio,
                "h_fp": r.inspection.h_fp,
                "h_fp_ratio": r.inspection.h_fp_ratio,
                "h_tp": r.inspection.h_tp,
                "h_tp_ratio": r.inspection.h_tp_ratio,
                "s_t": r.inspection.s_t,
                "s_t_reached": r.inspection.s_t_reached,
                "life_cycle": {
                    "lengths_s": list(r.life_cycle.lengths_s),
                    "hist_counts": list(r.life_cycle.hist_counts),
                    "hist_edges": list(r.life_cycle.hist_edges),
                    "inferior_hist_counts": list(r.life_cycle.inferior_hist_counts),
                    "inferior_track_ids": list(r.life_cycle.inferior_track_ids),
                },
            }
        return out


def pool_sequences(pairs):
    """Merges per-sequence (tracks, gt_tracks) pairs into one disjoint set.

    Frame indices and track ids are offset per sequence so that matching,
    CLEAR carry-over, and PR pooling never cross sequence boundaries.
    """
    pairs = [(list(tracks), list(gts)) for tracks, gts in pairs]
    max_frame = 0
    max_tid = 0
    max_gid = 0
    for tracks, gts in pairs:
        for t in tracks:
            max_frame = max(max_frame, t.entries[-1].frame_index)
            max_tid = max(max_tid, t.track_id)
        for g in gts:
            max_frame = max(max_frame, g.entries[-1][0])
            max_gid = max(max_gid, g.gt_track_id)
    frame_stride = max_frame + 1
    tid_stride = max_tid + 1
    gid_stride = max_gid + 1

    pooled_tracks = []
    pooled_gts = []
    for i, (tracks, gts) in enumerate(pairs):
        for t in tracks:
            entries = tuple(
                type(e)(e.frame_index + i * frame_stride, e.box, e.score, e.origin)
                for e in t.entries)
            pooled_tracks.append(Tracklet(t.track_id + i * tid_stride, t.cls, entries))
        for g in gts:
            entries = tuple((f + i * frame_stride, box) for f, box in g.entries)
            pooled_gts.append(GtTrack(g.gt_track_id + i * gid_stride, g.cls, entries,
                                      g.num_points_per_frame))
    return pooled_tracks, pooled_gts


class Evaluator(BaseEstimator):
    """Per-class evaluation over predicted tracks against ground truth."""

    def __init__(self, ap_iou=None, clear_iou=None, high_tp_bev_iou=None,
                 frame_cap=200, hz=10.0):
        self.ap_iou = ap_iou
        self.clear_iou = clear_iou
        self.high_tp_bev_iou = high_tp_bev_iou
        self.frame_cap = frame_cap
        self.hz = hz

    def _per_class(self, table, defaults, cls):
        if table is None:
            return defaults[cls]
        return _threshold_for(table, cls)

    def evaluate(self, tracks, gt_tracks) -> EvalReport:
        classes = sorted({t.cls for t in gt_tracks}, key=lambda c: c.value)
        reports = []
        for cls in classes:
            cls_tracks = [t for t in tracks if t.cls is cls]
            cls_gt = [t for t in gt_tracks if t.cls is cls]
            preds = boxes_from_tracks(cls_tracks)
            gts = boxes_from_gt(cls_gt)
            thr = self._per_class(self.ap_iou, AP_IOU_DEFAULTS, cls)
            ap3 = average_precision(preds, gts, iou3d, thr)
            apb = average_precision(preds, gts, bev_iou, thr)
            clear_thr = self._per_class(self.clear_iou, AP_IOU_DEFAULTS, cls)
            clear = clear_mot(cls_tracks, cls_gt, clear_thr)
            insp = inspection(preds, gts, normal_iou=thr,
                              high_bev_iou=self._per_class(
                                  self.high_tp_bev_iou, HIGH_TP_BEV_DEFAULTS, cls),
                              cap=self.frame_cap)
            cycle = life_cycle_analysis(cls_gt, preds, cap=self.frame_cap, hz=self.hz)
            reports.append(ClassReport(cls, ap3, apb, clear, insp, cycle))
        if not reports:
            raise PipelineError("no_ground_truth", "evaluation needs ground truth tracks")
        return EvalReport(tuple(reports))

    def evaluate_many(self, pairs) -> EvalReport:
        """Evaluates several sequences jointly (see :func:`pool_sequences`)."""
        tracks, gts = pool_sequences(pairs)
        return self.evaluate(tracks, gts)
