import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from trackforge.assignment import TrackCentricAssigner
from trackforge.errors import PipelineError
from trackforge.evaluation import Evaluator
from trackforge.geometry import Box7, ObjectClass, PointCloud, RigidPose
from trackforge.io import (
    DetectionRecord,
    config_section,
    gt_to_records,
    list_corpus_sequences,
    load_config,
    read_corpus_sequence,
    read_point_frame,
    read_records_jsonl,
    read_samples,
    records_to_gt,
    records_to_sequence,
    records_to_tracks,
    render_histogram_svg,
    render_report_csv,
    render_report_text,
    sequence_to_records,
    tracks_to_records,
    write_corpus_sequence,
    write_point_frame,
    write_records_jsonl,
    write_report_json,
    write_samples,
)
from trackforge.samples import PointFrame, build_sample
from trackforge.sim import ScenarioConfig, default_mix, generate
from trackforge.tracking import BidirectionalTracker, Origin, TrackEntry, Tracklet


@pytest.fixture(scope="module")
def sim_result():
    cfg = ScenarioConfig(seed=11, frames_per_sequence=20, mix=default_mix(3, 2, 0),
                         spawn_radius_m=35.0)
    return generate(cfg)[0]


# -- JSONL --------------------------------------------------------------------

def test_detection_records_round_trip(tmp_path, sim_result):
    records = sequence_to_records(sim_result.detections)
    path = write_records_jsonl(tmp_path / "dets.jsonl", records)
    back = read_records_jsonl(path)
    assert back == records
    seq = records_to_sequence(back, num_frames=20, hz=10.0)
    assert seq.sequence_id == sim_result.sequence_id
    assert len(seq.frames) == 20
    for orig, got in zip(sim_result.detections.frames, seq.frames):
        assert got.timestamp == pytest.approx(orig.timestamp, abs=1e-9)
        assert [d.box for d in got.detections] == [d.box for d in orig.detections]
        assert [d.score for d in got.detections] == [d.score for d in orig.detections]
        if orig.detections:
            assert got.timestamp == orig.timestamp


def test_track_records_round_trip(tmp_path, sim_result):
    tracks = BidirectionalTracker().track(sim_result.detections)
    records = tracks_to_records(sim_result.sequence_id, tracks, hz=10.0)
    path = write_records_jsonl(tmp_path / "tracks.jsonl", records)
    assert records_to_tracks(read_records_jsonl(path)) == tracks


def test_gt_records_round_trip(tmp_path, sim_result):
    records = gt_to_records(sim_result.sequence_id, sim_result.gt_tracks)
    path = write_records_jsonl(tmp_path / "gt.jsonl", records)
    back = records_to_gt(read_records_jsonl(path))
    assert len(back) == len(sim_result.gt_tracks)
    for got, orig in zip(back, sim_result.gt_tracks):
        assert got.gt_track_id == orig.gt_track_id
        assert got.cls is orig.cls
        assert got.entries == orig.entries


@pytest.mark.parametrize("line,fragment", [
    ('{"nope"', "invalid JSON"),
    ('[1, 2]', "record must be a JSON object"),
    ('{"sequence_id": "s", "frame_index": 0, "timestamp_s": 0.0, "class": "Vehicle", "box": [0,0,0,4,2,1.5], "score": 0.5}', "7 numbers"),
    ('{"sequence_id": "s", "frame_index": 0, "timestamp_s": 0.0, "class": "Robot", "box": [0,0,0,4,2,1.5,0], "score": 0.5}', "unknown class"),
    ('{"sequence_id": "s", "frame_index": 0, "timestamp_s": 0.0, "class": "Vehicle", "box": [0,0,0,4,2,1.5,9.0], "score": 0.5}', "yaw"),
    ('{"sequence_id": "s", "frame_index": -1, "timestamp_s": 0.0, "class": "Vehicle", "box": [0,0,0,4,2,1.5,0], "score": 0.5}', "frame_index"),
    ('{"sequence_id": "s", "frame_index": 0, "timestamp_s": 0.0, "class": "Vehicle", "box": [0,0,0,4,2,1.5,0], "score": 1.5}', "score"),
    ('{"sequence_id": "s", "frame_index": 0, "timestamp_s": 0.0, "class": "Vehicle", "box": [0,0,0,0,2,1.5,0], "score": 0.5}', ""),
    ('{"sequence_id": "s", "frame_index": 0, "timestamp_s": 0.0, "class": "Vehicle", "box": [0,0,0,4,2,1.5,0], "score": 0.5, "origin": "psychic"}', "origin"),
    ('{"frame_index": 0, "timestamp_s": 0.0, "class": "Vehicle", "box": [0,0,0,4,2,1.5,0], "score": 0.5}', "sequence_id"),
])
def test_jsonl_schema_errors_name_file_and_line(tmp_path, line, fragment):
    good = json.dumps(DetectionRecord("s", 0, 0.0, ObjectClass.VEHICLE,
                                      Box7(0, 0, 0, 4, 2, 1.5, 0), 0.5).to_json_dict())
    path = tmp_path / "bad.jsonl"
    path.write_text(good + "\n" + line + "\n")
    with pytest.raises(PipelineError) as err:
        read_records_jsonl(path)
    assert err.value.code == "schema_error"
    assert f"{path}:2" in str(err.value)
    assert fragment in str(err.value)


def test_records_to_sequence_guards(tmp_path):
    rec = DetectionRecord("s", 5, 0.5, ObjectClass.VEHICLE, Box7(0, 0, 0, 4, 2, 1.5, 0), 0.5)
    with pytest.raises(PipelineError):
        records_to_sequence([rec], num_frames=3, hz=10.0)
    other = DetectionRecord("s", 5, 0.7, ObjectClass.VEHICLE, Box7(0, 0, 0, 4, 2, 1.5, 0), 0.5)
    with pytest.raises(PipelineError):
        records_to_sequence([rec, other])
    two_seq = DetectionRecord("t", 5, 0.5, ObjectClass.VEHICLE, Box7(0, 0, 0, 4, 2, 1.5, 0), 0.5)
    with pytest.raises(PipelineError):
        records_to_sequence([rec, two_seq])
    only_s = records_to_sequence([rec, two_seq], sequence_id="s")
    assert only_s.sequence_id == "s" and len(only_s.frames) == 1


# -- point frames ---------------------------------------------------------------

def test_point_frame_round_trip_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.normal(0, 20, (57, 3)).astype(np.float32).astype(np.float64),
                       rng.uniform(0, 1, 57).astype(np.float32).astype(np.float64))
    pose = RigidPose.from_yaw_translation(0.3, [4.0, -2.0, 0.5])
    frame = PointFrame(12, cloud, pose)
    a = tmp_path / "000012.lpc"
    write_point_frame(a, frame)
    assert a.stat().st_size == 10 + 16 * 57 + 96
    back = read_point_frame(a)
    assert back.frame_index == 12
    assert np.array_equal(back.cloud.xyz, cloud.xyz)
    assert np.array_equal(back.cloud.intensity, cloud.intensity)
    assert np.array_equal(back.ego_pose.as_flat(), pose.as_flat())
    b = tmp_path / "copy.lpc"
    write_point_frame(b, back)
    assert a.read_bytes() == b.read_bytes()


def test_point_frame_rejects_bad_bytes(tmp_path):
    frame = PointFrame(0, PointCloud(np.zeros((3, 3))), RigidPose.identity())
    path = write_point_frame(tmp_path / "000000.lpc", frame)
    blob = path.read_bytes()

    (tmp_path / "trail.lpc").write_bytes(blob + b"x")
    with pytest.raises(PipelineError):
        read_point_frame(tmp_path / "trail.lpc", frame_index=0)
    (tmp_path / "short.lpc").write_bytes(blob[:-5])
    with pytest.raises(PipelineError):
        read_point_frame(tmp_path / "short.lpc", frame_index=0)
    (tmp_path / "magic.lpc").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(PipelineError):
        read_point_frame(tmp_path / "magic.lpc", frame_index=0)
    (tmp_path / "vers.lpc").write_bytes(blob[:4] + b"\x09\x00" + blob[6:])
    with pytest.raises(PipelineError):
        read_point_frame(tmp_path / "vers.lpc", frame_index=0)
    (tmp_path / "named.lpc").write_bytes(blob)
    with pytest.raises(PipelineError):
        read_point_frame(tmp_path / "named.lpc")  # no index in filename
    assert read_point_frame(tmp_path / "named.lpc", frame_index=4).frame_index == 4


# -- sample container -------------------------------------------------------------

def _samples_from_sim(sim_result, with_assignment=True):
    tracks = BidirectionalTracker().track(sim_result.detections)
    samples = []
    assigner = TrackCentricAssigner(tiou_threshold=0.2)
    assignments = assigner.assign(tracks, sim_result.gt_tracks).by_track_id()
    for t in tracks[:4]:
        s = build_sample(t, sim_result.point_frames, sim_result.sequence_id)
        if with_assignment:
            s = type(s)(s.sequence_id, s.track_id, s.cls, s.proposals, s.points,
                        s.base_pose, assignments[t.track_id])
        samples.append(s)
    return samples


def test_samples_round_trip(tmp_path, sim_result):
    samples = _samples_from_sim(sim_result)
    a = tmp_path / "train.samples"
    write_samples(a, samples)
    back = read_samples(a)
    assert len(back) == len(samples)
    for got, orig in zip(back, samples):
        assert got.sequence_id == orig.sequence_id
        assert got.track_id == orig.track_id
        assert got.cls is orig.cls
        assert got.proposals == orig.proposals  # f64 boxes survive exactly
        assert np.array_equal(got.base_pose.as_flat(), orig.base_pose.as_flat())
        assert np.allclose(got.points.xyz, orig.points.xyz, atol=1e-4)
        assert np.array_equal(got.points.channels["source_frame"],
                              orig.points.channels["source_frame"])
        assert np.array_equal(got.points.channels["source_index"],
                              orig.points.channels["source_index"])
        assert np.array_equal(got.points.channels["timestamp_code"],
                              orig.points.channels["timestamp_code"])
        assert got.assignment.matched == orig.assignment.matched
        assert got.assignment.labels == tuple(
            type(l)(l.frame_index, l.gt_track_id, l.gt_box, l.iou, l.q,
                    tuple(l.residual) if l.residual is not None else None)
            for l in orig.assignment.labels)
    b = tmp_path / "copy.samples"
    write_samples(b, back)
    assert a.read_bytes() == b.read_bytes()


def test_samples_without_assignment(tmp_path, sim_result):
    samples = _samples_from_sim(sim_result, with_assignment=False)
    path = write_samples(tmp_path / "bare.samples", samples)
    back = read_samples(path)
    assert all(s.assignment is None for s in back)


def test_samples_reject_bad_bytes(tmp_path, sim_result):
    samples = _samples_from_sim(sim_result)[:1]
    path = write_samples(tmp_path / "one.samples", samples)
    blob = path.read_bytes()
    (tmp_path / "trail.samples").write_bytes(blob + b"\x00")
    with pytest.raises(PipelineError) as err:
        read_samples(tmp_path / "trail.samples")
    assert "trailing garbage" in str(err.value)
    (tmp_path / "short.samples").write_bytes(blob[:-9])
    with pytest.raises(PipelineError):
        read_samples(tmp_path / "short.samples")
    (tmp_path / "magic.samples").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(PipelineError):
        read_samples(tmp_path / "magic.samples")


def test_samples_flag_overflow(tmp_path):
    box = Box7(0, 0, 0, 4, 2, 1.5, 0)
    entries = (TrackEntry(0, box, 0.9, Origin.DETECTED),
               TrackEntry(300, box, 0.9, Origin.DETECTED))
    track = Tracklet(1, ObjectClass.VEHICLE, entries)
    pts = np.zeros((10, 3))
    frames = [PointFrame(0, PointCloud(pts), RigidPose.identity()),
              PointFrame(300, PointCloud(pts), RigidPose.identity())]
    sample = build_sample(track, frames, "seq")
    with pytest.raises(PipelineError) as err:
        write_samples(tmp_path / "x.samples", [sample])
    assert "one byte" in str(err.value)


def test_empty_point_sample_round_trip(tmp_path):
    box = Box7(0, 0, 0, 4, 2, 1.5, 0)
    track = Tracklet(1, ObjectClass.VEHICLE,
                     (TrackEntry(0, box, 0.9, Origin.DETECTED),))
    sample = build_sample(track, [], "seq")
    path = write_samples(tmp_path / "empty.samples", [sample])
    back, = read_samples(path)
    assert len(back.points) == 0
    assert back.proposals == sample.proposals


# -- corpus ---------------------------------------------------------------------

def test_corpus_round_trip(tmp_path, sim_result):
    seq_dir = write_corpus_sequence(tmp_path, sim_result, hz=10.0)
    assert list_corpus_sequences(tmp_path) == [seq_dir]
    corpus = read_corpus_sequence(seq_dir)
    assert corpus.sequence_id == sim_result.sequence_id
    assert corpus.hz == 10.0
    assert len(corpus.point_frames) == 20
    for got, orig in zip(corpus.point_frames, sim_result.point_frames):
        assert np.array_equal(got.cloud.xyz,
                              orig.cloud.xyz.astype(np.float32).astype(np.float64))
        assert np.array_equal(got.ego_pose.as_flat(), orig.ego_pose.as_flat())
    for got, orig in zip(corpus.detections.frames, sim_result.detections.frames):
        assert [d.box for d in got.detections] == [d.box for d in orig.detections]
        assert got.ego_pose.as_flat().tolist() == orig.ego_pose.as_flat().tolist()
    assert len(corpus.gt_tracks) == len(sim_result.gt_tracks)
    assert {t.gt_track_id for t in corpus.gt_tracks} == \
        {t.gt_track_id for t in sim_result.gt_tracks}


def test_corpus_missing_index(tmp_path):
    (tmp_path / "seqx").mkdir()
    with pytest.raises(PipelineError):
        read_corpus_sequence(tmp_path / "seqx")


# -- config and reports ------------------------------------------------------------

def test_load_config(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("track:\n  gate_iou: 0.2\n  extension: forward\nsimulate:\n  seed: 4\n")
    cfg = load_config(path)
    assert config_section(cfg, "track") == {"gate_iou": 0.2, "extension": "forward"}
    assert config_section(cfg, "missing") == {}
    (tmp_path / "empty.yaml").write_text("")
    assert load_config(tmp_path / "empty.yaml") == {}
    (tmp_path / "bad.yaml").write_text("a:\n' dangling")
    with pytest.raises(PipelineError) as err:
        load_config(tmp_path / "bad.yaml")
    assert err.value.code == "schema_error"
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(PipelineError):
        load_config(tmp_path / "list.yaml")
    with pytest.raises(PipelineError):
        config_section({"track": [1, 2]}, "track")


@pytest.fixture(scope="module")
def small_report(sim_result):
    from trackforge.assignment import GtTrack
    gts = [t for t in sim_result.gt_tracks if len(t.entries) > 2][:4]
    preds = []
    for t in gts:
        entries = tuple(TrackEntry(f, b, 0.9, Origin.DETECTED) for f, b in t.entries)
        preds.append(Tracklet(t.gt_track_id + 100, t.cls, entries))
    return Evaluator().evaluate(preds, gts)


def test_report_renderers(tmp_path, small_report):
    path = write_report_json(tmp_path / "report.json", small_report)
    data = json.loads(path.read_text())
    assert set(data) == {r.cls.value for r in small_report.classes}
    text = render_report_text(small_report)
    assert "MOTA" in text and "T-FN" in text
    csv = render_report_csv(small_report)
    assert len(csv.strip().splitlines()) == len(small_report.classes) + 1
    svg = render_histogram_svg(small_report.classes[0].life_cycle)
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    assert svg == render_histogram_svg(small_report.classes[0].life_cycle)
