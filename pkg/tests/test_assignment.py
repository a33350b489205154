import math

import numpy as np
import pytest

from trackforge.assignment import (
    AssignmentResult,
    GtTrack,
    ObjectCentricAssigner,
    TrackCentricAssigner,
    object_centric_assign,
    residual_decode,
    residual_target,
    soft_target,
    tiou,
    two_round_assign,
)
from trackforge.errors import PipelineError
from trackforge.geometry import Box7, ObjectClass, iou3d
from trackforge.tracking import Origin, TrackEntry, Tracklet


def box(cx, cy=0.0, cz=1.0, l=4.0, w=2.0, h=1.5, yaw=0.0):
    return Box7(cx, cy, cz, l, w, h, yaw)


def pred_track(track_id, frame_boxes, cls=ObjectClass.VEHICLE):
    entries = tuple(TrackEntry(f, b, 0.9, Origin.DETECTED) for f, b in sorted(frame_boxes))
    return Tracklet(track_id, cls, entries)


def gt_track(gt_id, frame_boxes, cls=ObjectClass.VEHICLE):
    return GtTrack(gt_id, cls, tuple(sorted(frame_boxes, key=lambda fb: fb[0])))


def random_instance(rng, n_pred=3, n_gt=3, n_frames=10):
    preds, gts = [], []
    for i in range(n_pred):
        frames = sorted(rng.choice(n_frames, size=rng.integers(1, n_frames + 1), replace=False))
        fb = [(int(f), box(rng.uniform(0, 8), rng.uniform(0, 4), yaw=rng.uniform(-0.3, 0.3)))
              for f in frames]
        preds.append(pred_track(i, fb))
    for j in range(n_gt):
        frames = sorted(rng.choice(n_frames, size=rng.integers(1, n_frames + 1), replace=False))
        fb = [(int(f), box(rng.uniform(0, 8), rng.uniform(0, 4), yaw=rng.uniform(-0.3, 0.3)))
              for f in frames]
        gts.append(gt_track(j, fb))
    return preds, gts


def oracle_two_round(preds, gts, threshold):
    """Exhaustive reference: direct track-IoU evaluation, then per-frame max."""
    out = []
    for p in preds:
        pb = {e.frame_index: e.box for e in p.entries}
        candidates = []
        for g in gts:
            if g.cls is not p.cls:
                continue
            gb = dict(g.entries)
            union = set(pb) | set(gb)
            total = sum(iou3d(pb[f], gb[f]) for f in set(pb) & set(gb))
            if total / len(union) > threshold:
                candidates.append((total / len(union), g.gt_track_id, gb))
        per_frame = {}
        for f in pb:
            available = [c for c in candidates if f in c[2]]
            if available:
                best = max(available, key=lambda c: (c[0], -c[1]))
                per_frame[f] = (best[1], best[2][f])
        out.append((bool(candidates), per_frame))
    return out


def test_tiou_identical_tracks():
    t = pred_track(0, [(f, box(1.0 * f)) for f in range(5)])
    g = gt_track(0, [(f, box(1.0 * f)) for f in range(5)])
    assert tiou(t, g) == pytest.approx(1.0, abs=1e-12)
    assert tiou(t, t) == pytest.approx(1.0, abs=1e-12)


def test_tiou_disjoint_supports():
    a = gt_track(0, [(f, box(0.0)) for f in range(5)])
    b = gt_track(1, [(f, box(0.0)) for f in range(5, 10)])
    assert tiou(a, b) == 0.0


def test_tiou_partial_overlap_analytic():
    a = gt_track(0, [(f, box(0.0)) for f in range(0, 10)])
    b = gt_track(1, [(f, box(0.0)) for f in range(5, 15)])
    assert tiou(a, b) == pytest.approx(5 / 15, abs=1e-12)


def test_tiou_empty_tracks_error():
    a = gt_track(0, [])
    b = gt_track(1, [])
    with pytest.raises(PipelineError) as err:
        tiou(a, b)
    assert err.value.code == "empty_tracks"


def test_tiou_class_mismatch():
    a = gt_track(0, [(0, box(0.0))], cls=ObjectClass.VEHICLE)
    b = gt_track(1, [(0, box(0.0))], cls=ObjectClass.PEDESTRIAN)
    with pytest.raises(PipelineError):
        tiou(a, b)


def test_tiou_symmetry_and_bounds():
    rng = np.random.default_rng(2)
    for _ in range(30):
        preds, gts = random_instance(rng)
        a = gt_track(0, [(e.frame_index, e.box) for e in preds[0].entries])
        b = gts[0]
        v = tiou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == tiou(b, a)


def test_tiou_monotone_in_support():
    a = gt_track(0, [(f, box(0.0)) for f in range(5)])
    b = gt_track(1, [(f, box(0.2)) for f in range(5)])
    base = tiou(a, b)
    # A gains a frame with no counterpart: denominator grows, numerator fixed.
    a2 = gt_track(0, [(f, box(0.0)) for f in range(5)] + [(11, box(100.0))])
    assert tiou(a2, b) < base


def test_two_round_single_candidate():
    p = pred_track(0, [(f, box(0.1 * f)) for f in range(8)])
    g = gt_track(5, [(f, box(0.1 * f + 0.1)) for f in range(8)])
    res = two_round_assign([p], [g], tiou_threshold=0.5)
    ta = res.tracks[0]
    assert ta.matched
    assert all(l.positive and l.gt_track_id == 5 for l in ta.labels)
    for l in ta.labels:
        assert l.q == soft_target(l.iou)


def test_two_round_no_candidate_all_negative():
    p = pred_track(0, [(f, box(0.0)) for f in range(8)])
    g = gt_track(5, [(f, box(50.0)) for f in range(8)])
    res = two_round_assign([p], [g], tiou_threshold=0.3)
    ta = res.tracks[0]
    assert not ta.matched
    assert all(not l.positive and l.q == 0.0 and l.residual is None for l in ta.labels)


def test_two_round_prefers_higher_track_iou_candidate():
    # At frame 5 the proposal overlaps GT 1's box perfectly, but GT 2 has the
    # higher track IoU, so its (offset) box wins.
    p = pred_track(0, [(f, box(1.0 * f)) for f in range(10)])
    g2 = gt_track(2, [(f, box(1.0 * f + 0.3)) for f in range(10)])
    g1 = gt_track(1, [(f, box(1.0 * f) if f == 5 else box(1.0 * f + 60.0)) for f in range(10)])
    res = two_round_assign([p], [g1, g2], tiou_threshold=0.05)
    labels = {l.frame_index: l for l in res.tracks[0].labels}
    assert iou3d(p.entries[5].box, dict(g1.entries)[5]) > iou3d(p.entries[5].box, dict(g2.entries)[5])
    assert labels[5].gt_track_id == 2


def test_two_round_tie_breaks_by_lower_gt_id():
    p = pred_track(0, [(f, box(0.0)) for f in range(4)])
    g_hi = gt_track(9, [(f, box(0.0)) for f in range(4)])
    g_lo = gt_track(3, [(f, box(0.0)) for f in range(4)])
    res = two_round_assign([p], [g_hi, g_lo], tiou_threshold=0.5)
    assert all(l.gt_track_id == 3 for l in res.tracks[0].labels)


def test_two_round_matches_exhaustive_oracle():
    rng = np.random.default_rng(14)
    for _ in range(50):
        preds, gts = random_instance(rng, n_pred=int(rng.integers(1, 5)),
                                     n_gt=int(rng.integers(1, 5)))
        threshold = float(rng.uniform(0.05, 0.6))
        res = two_round_assign(preds, gts, threshold)
        want = oracle_two_round(preds, gts, threshold)
        for ta, (matched, per_frame) in zip(res.tracks, want):
            assert ta.matched == matched
            for l in ta.labels:
                if l.frame_index in per_frame:
                    gt_id, gt_box = per_frame[l.frame_index]
                    assert l.gt_track_id == gt_id
                    assert l.gt_box == gt_box
                else:
                    assert not l.positive


def test_round_two_only_uses_candidates():
    rng = np.random.default_rng(8)
    for _ in range(20):
        preds, gts = random_instance(rng)
        threshold = 0.25
        res = two_round_assign(preds, gts, threshold)
        for p, ta in zip(preds, res.tracks):
            candidate_ids = {g.gt_track_id for g in gts
                             if g.cls is p.cls and tiou(p, g) > threshold}
            for l in ta.labels:
                if l.positive:
                    assert l.gt_track_id in candidate_ids


def test_soft_target_values_and_shape():
    assert soft_target(0.25) == 0.0
    assert soft_target(0.5) == 0.5
    assert soft_target(0.75) == 1.0
    assert soft_target(0.1) == 0.0
    assert soft_target(0.9) == 1.0
    grid = np.linspace(0, 1, 101)
    vals = [soft_target(v) for v in grid]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    # Breakpoints exactly at 0.25 and 0.75.
    assert soft_target(0.25 - 1e-9) == 0.0 and soft_target(0.25 + 1e-9) > 0.0
    assert soft_target(0.75 - 1e-9) < 1.0 and soft_target(0.75 + 1e-9) == 1.0


def test_residual_identity_is_zero():
    b = box(3.0, -1.0, 0.5, yaw=0.7)
    assert np.allclose(residual_target(b, b), 0.0, atol=1e-12)


def test_residual_heading_shift():
    yaw = 0.6
    p = Box7(1.0, 2.0, 0.0, 4.0, 2.0, 1.5, yaw)
    g = Box7(1.0 + math.cos(yaw), 2.0 + math.sin(yaw), 0.0, 4.0, 2.0, 1.5, yaw)
    res = residual_target(p, g)
    assert res[0] == pytest.approx(1.0 / math.sqrt(20.0), abs=1e-12)
    assert np.allclose(res[1:], 0.0, atol=1e-9)


def test_residual_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(50):
        p = box(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-1, 1),
                l=rng.uniform(1, 5), w=rng.uniform(1, 3), h=rng.uniform(1, 2),
                yaw=rng.uniform(-math.pi, math.pi))
        g = box(p.cx + rng.normal(0, 1), p.cy + rng.normal(0, 1), p.cz + rng.normal(0, 0.3),
                l=p.l * rng.uniform(0.7, 1.4), w=p.w * rng.uniform(0.7, 1.4),
                h=p.h * rng.uniform(0.8, 1.2), yaw=p.yaw + rng.normal(0, 0.5))
        back = residual_decode(p, residual_target(p, g))
        assert np.allclose(back.as_array(), g.as_array(), atol=1e-9)


def test_object_centric_identical_positive():
    p = pred_track(0, [(0, box(0.0))])
    g = gt_track(0, [(0, box(0.0))])
    res = object_centric_assign([p], [g])
    assert res.tracks[0].labels[0].positive


def test_object_centric_threshold_boundary():
    p = pred_track(0, [(0, box(0.0))])
    # Slide a same-size box until the IoU is just below / above 0.45.
    lo = box(4.0 * (1 - 0.45) / (1 + 0.45) + 0.01)
    hi = box(4.0 * (1 - 0.45) / (1 + 0.45) - 0.01)
    assert iou3d(box(0.0), lo) < 0.45 < iou3d(box(0.0), hi)
    res = object_centric_assign([p], [gt_track(0, [(0, lo)])])
    assert not res.tracks[0].labels[0].positive
    assert res.tracks[0].labels[0].q == 0.0
    res = object_centric_assign([p], [gt_track(0, [(0, hi)])])
    assert res.tracks[0].labels[0].positive


def test_object_centric_pedestrian_threshold():
    p = pred_track(0, [(0, Box7(0, 0, 0, 0.8, 0.8, 1.7, 0))], cls=ObjectClass.PEDESTRIAN)
    g = Box7(0.34, 0, 0, 0.8, 0.8, 1.7, 0)
    v = iou3d(p.entries[0].box, g)
    assert 0.35 < v < 0.45
    res = object_centric_assign([p], [gt_track(0, [(0, g)], cls=ObjectClass.PEDESTRIAN)])
    assert res.tracks[0].labels[0].positive


def test_object_centric_matches_argmax_oracle():
    rng = np.random.default_rng(6)
    for _ in range(20):
        preds, gts = random_instance(rng)
        res = object_centric_assign(preds, gts)
        for p, ta in zip(preds, res.tracks):
            for e, l in zip(p.entries, ta.labels):
                best_iou, best_id = 0.0, None
                for g in gts:
                    if g.cls is not p.cls:
                        continue
                    gb = dict(g.entries).get(e.frame_index)
                    if gb is None:
                        continue
                    v = iou3d(e.box, gb)
                    if v > best_iou:
                        best_iou, best_id = v, g.gt_track_id
                if best_id is not None and best_iou >= 0.45:
                    assert l.gt_track_id == best_id
                    assert l.iou == pytest.approx(best_iou, abs=1e-12)
                else:
                    assert not l.positive


def test_assigner_wrappers_round_trip_params():
    a = TrackCentricAssigner(tiou_threshold=0.4)
    assert a.get_params() == {"tiou_threshold": 0.4}
    b = ObjectCentricAssigner().set_params(cyclist_iou=0.5)
    assert b.get_params()["cyclist_iou"] == 0.5
    p = pred_track(0, [(0, box(0.0))])
    g = gt_track(0, [(0, box(0.05))])
    res = a.assign([p], [g])
    assert isinstance(res, AssignmentResult)
