import numpy as np
import pytest

from trackforge.errors import PipelineError
from trackforge.geometry import ObjectClass, to_canonical
from trackforge.registration import chamfer
from trackforge.sim import (
    ClassMix,
    DetectorNoise,
    OcclusionWindow,
    ScenarioConfig,
    SequenceSimulator,
    default_mix,
    generate,
    scorecard,
)
from trackforge.tracking import BidirectionalTracker

VEH = ObjectClass.VEHICLE


def small_cfg(**kw):
    defaults = dict(seed=3, num_sequences=1, frames_per_sequence=30,
                    mix=default_mix(3, 2, 0), spawn_radius_m=40.0)
    defaults.update(kw)
    return ScenarioConfig(**defaults)


def only_mix(cls=VEH, count=1, motion=(1.0, 0.0, 0.0), size=(4.6, 2.0, 1.6)):
    return (ClassMix(cls, count, size, (0.0, 0.0, 0.0), (3.0, 8.0), motion),)


def test_generate_deterministic():
    cfg = small_cfg()
    a, = generate(cfg)
    b, = generate(cfg)
    assert a.sequence_id == b.sequence_id
    assert a.provenance == b.provenance
    for fa, fb in zip(a.detections.frames, b.detections.frames):
        assert fa.timestamp == fb.timestamp
        assert len(fa.detections) == len(fb.detections)
        for da, db in zip(fa.detections, fb.detections):
            assert da.box == db.box and da.score == db.score and da.cls is db.cls
    for pa, pb in zip(a.point_frames, b.point_frames):
        assert np.array_equal(pa.cloud.xyz, pb.cloud.xyz)
        assert np.array_equal(pa.cloud.intensity, pb.cloud.intensity)
    assert [t.entries for t in a.gt_tracks] == [t.entries for t in b.gt_tracks]


def test_zero_noise_detections_equal_gt():
    noise = DetectorNoise(noise_scale=0.0, drop_ceiling=0.0, drop_floor=0.0)
    cfg = small_cfg(noise=noise)
    res, = generate(cfg)
    gt_boxes = {t.gt_track_id: dict(t.entries) for t in res.gt_tracks}
    total = 0
    for frame, prov in zip(res.detections.frames, res.provenance):
        assert len(frame.detections) == len(prov)
        for det, gid in zip(frame.detections, prov):
            assert det.box == gt_boxes[gid][frame.frame_index]
            total += 1
    alive = sum(len(t.entries) for t in res.gt_tracks)
    assert total == alive  # nothing dropped


def test_occlusion_window_full_drop():
    window = OcclusionWindow(10, 17, 1.0)
    cfg = small_cfg(occlusions=(window,), short_track_prob=0.0)
    res, = generate(cfg)
    for frame in res.detections.frames:
        if window.covers(frame.frame_index):
            assert frame.detections == ()
        elif frame.frame_index not in (9, 17):
            pass  # outside the window detections follow the usual drop model


def test_provenance_one_to_one():
    cfg = small_cfg(clutter_per_frame=0.0)
    res, = generate(cfg)
    ids = {t.gt_track_id for t in res.gt_tracks}
    for frame, prov in zip(res.detections.frames, res.provenance):
        assert len(frame.detections) == len(prov)
        real = [g for g in prov if g >= 0]
        assert len(real) == len(prov)  # no clutter configured
        assert len(set(real)) == len(real)
        assert set(real) <= ids


def test_clutter_marked_in_provenance():
    cfg = small_cfg(seed=5, clutter_per_frame=2.0)
    res, = generate(cfg)
    flat = [g for prov in res.provenance for g in prov]
    assert any(g == -1 for g in flat)


def test_canonical_shell_is_frame_invariant():
    cfg = ScenarioConfig(seed=9, frames_per_sequence=12,
                         mix=only_mix(motion=(0.0, 1.0, 0.0)),
                         spawn_radius_m=20.0, min_spawn_m=10.0,
                         short_track_prob=0.0)
    res, = generate(cfg)
    track = res.gt_tracks[0]
    boxes = dict(track.entries)
    canon = {}
    for pf in res.point_frames:
        world = pf.world_points()
        if len(world) < 50:
            continue
        canon[pf.frame_index] = to_canonical(boxes[pf.frame_index]).transform_points(world)
    frames = sorted(canon)
    assert len(frames) >= 2
    d = chamfer(canon[frames[0]], canon[frames[-1]])
    assert d < 1.0  # same rigid surface, sampling noise only


def test_point_count_follows_range_curve():
    cfg = ScenarioConfig(seed=21, frames_per_sequence=150,
                         mix=only_mix(motion=(1.0, 0.0, 0.0)),
                         spawn_radius_m=30.0, min_spawn_m=30.0,
                         short_track_prob=0.0)
    res, = generate(cfg)
    track = res.gt_tracks[0]
    box = track.entries[0][1]
    r = float(np.linalg.norm(box.center))
    area = box.l * box.w + 2 * box.l * box.h + 2 * box.w * box.h
    expected = cfg.points_at_ref * (cfg.ref_range_m / r) ** 2 * (area / 30.0)
    mean = np.mean(track.num_points_per_frame)
    assert abs(mean - expected) < 0.15 * expected + 3.0


def test_ego_motion_moves_sensor_frame():
    cfg = ScenarioConfig(seed=4, frames_per_sequence=10,
                         mix=only_mix(motion=(1.0, 0.0, 0.0)),
                         spawn_radius_m=15.0, min_spawn_m=12.0,
                         short_track_prob=0.0, ego_speed_mps=5.0)
    res, = generate(cfg)
    first, last = res.point_frames[0], res.point_frames[-1]
    assert last.ego_pose.translation[0] == pytest.approx(5.0 * 9 / 10.0)
    # World-frame points stay on the static object even as the sensor moves.
    box = res.gt_tracks[0].entries[0][1]
    for pf in (first, last):
        if len(pf.cloud) == 0:
            continue
        world = pf.world_points()
        assert np.linalg.norm(world[:, :2] - box.center[:2], axis=1).max() < 4.0


def test_scorecard_static_full_tracks():
    window = OcclusionWindow(8, 15, 1.0)
    cfg = ScenarioConfig(seed=2, frames_per_sequence=40,
                         mix=only_mix(count=4), short_track_prob=0.0,
                         spawn_radius_m=25.0, min_spawn_m=10.0,
                         noise=DetectorNoise(drop_ceiling=0.0, drop_floor=0.0),
                         occlusions=(window,))
    card = scorecard(cfg, short_track_s=3.0)
    assert card.num_tracks == 4
    assert card.short_track_fraction == 0.0
    assert card.max_dropout_span == 7
    assert card.mean_dropout_span == pytest.approx(7.0)
    assert card.detection_rate == pytest.approx((40 - 7) / 40)
    assert card.tracks_per_class == {VEH: 4}
    assert card.as_dict()["num_tracks"] == 4


def test_scorecard_short_tracks_counted():
    cfg = small_cfg(seed=8, short_track_prob=1.0)
    card = scorecard(cfg, short_track_s=2.9)
    assert card.short_track_fraction == 1.0  # all lifespans < 50% of 3 s


def test_config_validation():
    with pytest.raises(PipelineError):
        ScenarioConfig(frames_per_sequence=0)
    with pytest.raises(PipelineError):
        ScenarioConfig(short_track_prob=1.5)
    with pytest.raises(PipelineError):
        OcclusionWindow(5, 5, 0.5)
    with pytest.raises(PipelineError):
        OcclusionWindow(0, 5, -0.1)
    with pytest.raises(PipelineError):
        DetectorNoise(drop_floor=0.5, drop_ceiling=0.2)
    with pytest.raises(PipelineError):
        ClassMix(VEH, -1, (4, 2, 1.5), (0, 0, 0), (1, 2), (1, 0, 0))
    with pytest.raises(PipelineError):
        ClassMix(VEH, 1, (4, 2, 1.5), (0, 0, 0), (1, 2), (0, 0, 0))


def test_simulator_estimator():
    sim = SequenceSimulator(seed=7, frames_per_sequence=15, vehicles=2,
                            pedestrians=1, cyclists=0, occlusions=((3, 6, 1.0),))
    params = sim.get_params()
    assert params["seed"] == 7 and params["frames_per_sequence"] == 15
    cfg = sim.build_config()
    assert cfg.occlusions[0] == OcclusionWindow(3, 6, 1.0)
    results = sim.generate()
    assert len(results) == 1
    assert len(results[0].detections.frames) == 15


def test_tracker_consumes_sim_output():
    cfg = small_cfg(seed=13, frames_per_sequence=25)
    res, = generate(cfg)
    tracks = BidirectionalTracker().track(res.detections)
    assert tracks
    for t in tracks:
        assert t.entries[0].frame_index >= 0
        assert t.entries[-1].frame_index < 25
