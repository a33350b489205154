"""On-disk formats: detection/track JSON-lines, binary point frames, the
track-sample container, corpus directories, config files, and report
rendering.

JSON-lines carry boxes and tracks (human-diffable); point data is binary.
All readers validate eagerly and report the offending file plus line or byte
offset. Writers are deterministic: identical inputs produce identical bytes.
"""

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .assignment import GtTrack, ProposalLabel, TrackAssignment
from .errors import PipelineError
from .geometry import Box7, LabeledBox, ObjectClass, PointCloud, RigidPose
from .samples import TIMESTAMP_SCALE, PointFrame, Proposal, TrackSample
from .tracking import DetectionFrame, Origin, SequenceDetections, TrackEntry, Tracklet

__all__ = [
    "DetectionRecord",
    "write_records_jsonl",
    "read_records_jsonl",
    "sequence_to_records",
    "tracks_to_records",
    "gt_to_records",
    "records_to_sequence",
    "records_to_tracks",
    "records_to_gt",
    "write_point_frame",
    "read_point_frame",
    "write_samples",
    "read_samples",
    "write_corpus_sequence",
    "read_corpus_sequence",
    "list_corpus_sequences",
    "load_config",
    "config_section",
    "write_report_json",
    "render_report_text",
    "render_report_csv",
    "render_histogram_svg",
]

POINT_FRAME_MAGIC = b"LPC1"
POINT_FRAME_VERSION = 1
SAMPLE_MAGIC = b"TSMP"
SAMPLE_VERSION = 1

_CLASS_CODES = {ObjectClass.VEHICLE: 0, ObjectClass.PEDESTRIAN: 1, ObjectClass.CYCLIST: 2}
_CODE_CLASSES = {v: k for k, v in _CLASS_CODES.items()}


# ---------------------------------------------------------------------------
# JSON-lines records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectionRecord:
    """One box observation: a raw detection, a track entry, or a GT entry."""

    sequence_id: str
    frame_index: int
    timestamp_s: float
    cls: ObjectClass
    box: Box7
    score: float
    track_id: int = None
    origin: Origin = None

    def to_json_dict(self):
        out = {
            "sequence_id": self.sequence_id,
            "frame_index": self.frame_index,
            "timestamp_s": self.timestamp_s,
            "class": self.cls.value,
            "box": [self.box.cx, self.box.cy, self.box.cz,
                    self.box.l, self.box.w, self.box.h, self.box.yaw],
            "score": self.score,
        }
        if self.track_id is not None:
            out["track_id"] = self.track_id
        if self.origin is not None:
            out["origin"] = self.origin.value
        return out


def write_records_jsonl(path, records):
    path = Path(path)
    lines = [json.dumps(r.to_json_dict(), sort_keys=True) for r in records]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def _schema(path, line, message):
    return PipelineError("schema_error", f"{path}:{line}: {message}")


def _parse_record(obj, path, line) -> DetectionRecord:
    if not isinstance(obj, dict):
        raise _schema(path, line, "record must be a JSON object")
    for key in ("sequence_id", "frame_index", "timestamp_s", "class", "box", "score"):
        if key not in obj:
            raise _schema(path, line, f"missing field {key!r}")
    if not isinstance(obj["sequence_id"], str):
        raise _schema(path, line, "sequence_id must be a string")
    frame = obj["frame_index"]
    if not isinstance(frame, int) or isinstance(frame, bool) or frame < 0:
        raise _schema(path, line, "frame_index must be a nonnegative integer")
    if not isinstance(obj["timestamp_s"], (int, float)):
        raise _schema(path, line, "timestamp_s must be a number")
    try:
        cls = ObjectClass(obj["class"])
    except ValueError:
        raise _schema(path, line, f"unknown class {obj['class']!r}") from None
    box = obj["box"]
    if (not isinstance(box, list) or len(box) != 7
            or not all(isinstance(v, (int, float)) for v in box)):
        raise _schema(path, line, "box must be a list of 7 numbers")
    if not all(math.isfinite(v) for v in box):
        raise _schema(path, line, "box values must be finite")
    if not -math.pi < box[6] <= math.pi:
        raise _schema(path, line, f"yaw {box[6]} outside (-pi, pi]")
    score = obj["score"]
    if not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
        raise _schema(path, line, "score must be a number in [0, 1]")
    track_id = obj.get("track_id")
    if track_id is not None and (not isinstance(track_id, int) or track_id < 0):
        raise _schema(path, line, "track_id must be a nonnegative integer")
    origin = obj.get("origin")
    if origin is not None:
        try:
            origin = Origin(origin)
        except ValueError:
            raise _schema(path, line, f"unknown origin {obj['origin']!r}") from None
    try:
        parsed_box = Box7.from_array(box)
    except PipelineError as err:
        raise _schema(path, line, err.message) from None
    return DetectionRecord(obj["sequence_id"], frame, float(obj["timestamp_s"]),
                           cls, parsed_box, float(score), track_id, origin)


def read_records_jsonl(path):
    path = Path(path)
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise _schema(path, line_no, f"invalid JSON ({err.msg})") from None
            records.append(_parse_record(obj, path, line_no))
    return records


def sequence_to_records(seq: SequenceDetections):
    records = []
    for frame in seq.frames:
        for det in frame.detections:
            records.append(DetectionRecord(seq.sequence_id, frame.frame_index,
                                           frame.timestamp, det.cls, det.box, det.score))
    return records


def tracks_to_records(sequence_id, tracks, hz=10.0):
    records = []
    for track in tracks:
        for e in track.entries:
            records.append(DetectionRecord(sequence_id, e.frame_index, e.frame_index / hz,
                                           track.cls, e.box, e.score, track.track_id,
                                           e.origin))
    return records


def gt_to_records(sequence_id, gt_tracks, hz=10.0):
    records = []
    for track in gt_tracks:
        for frame, box in track.entries:
            records.append(DetectionRecord(sequence_id, frame, frame / hz, track.cls,
                                           box, 1.0, track.gt_track_id))
    return records


def _single_sequence_id(records, sequence_id):
    ids = {r.sequence_id for r in records}
    if sequence_id is not None:
        return sequence_id
    if len(ids) > 1:
        raise PipelineError("schema_error",
                            f"records span several sequences: {sorted(ids)}")
    return next(iter(ids)) if ids else "empty"


def records_to_sequence(records, sequence_id=None, num_frames=None, hz=None,
                        ego_poses=None) -> SequenceDetections:
    """Rebuilds per-frame detection containers from flat records.

    Frames without any record are restored as empty: their count comes from
    ``num_frames`` (timestamps at frame/hz) when given, otherwise the range
    between the first and last populated frame with timestamps interpolated
    at the median frame step. Ego poses default to identity.
    """
    sequence_id = _single_sequence_id(records, sequence_id)
    records = [r for r in records if r.sequence_id == sequence_id]
    by_frame = {}
    stamps = {}
    for r in records:
        by_frame.setdefault(r.frame_index, []).append(LabeledBox(r.box, r.cls, r.score,
                                                                 r.frame_index))
        prev = stamps.setdefault(r.frame_index, r.timestamp_s)
        if prev != r.timestamp_s:
            raise PipelineError("schema_error",
                                f"frame {r.frame_index} has conflicting timestamps")
    if num_frames is not None:
        if hz is None:
            raise PipelineError("bad_config", "num_frames needs hz for empty-frame timestamps")
        if by_frame and max(by_frame) >= num_frames:
            raise PipelineError("schema_error",
                                f"record frame {max(by_frame)} outside 0..{num_frames - 1}")
        frame_range = range(num_frames)
    elif by_frame:
        frame_range = range(min(by_frame), max(by_frame) + 1)
    else:
        frame_range = range(0)

    if hz is not None:
        step = 1.0 / hz
    else:
        keys = sorted(stamps)
        diffs = [(stamps[b] - stamps[a]) / (b - a)
                 for a, b in zip(keys, keys[1:])]
        step = float(np.median(diffs)) if diffs else 0.1

    frames = []
    anchor = min(stamps) if stamps else 0
    anchor_ts = stamps.get(anchor, 0.0)
    for f in frame_range:
        ts = stamps.get(f, anchor_ts + (f - anchor) * step)
        ego = ego_poses.get(f, RigidPose.identity()) if ego_poses else RigidPose.identity()
        frames.append(DetectionFrame(f, ts, ego, tuple(by_frame.get(f, ()))))
    return SequenceDetections(sequence_id, tuple(frames))


def records_to_tracks(records):
    by_track = {}
    classes = {}
    for r in records:
        if r.track_id is None:
            raise PipelineError("schema_error", "track record without track_id")
        if classes.setdefault(r.track_id, r.cls) is not r.cls:
            raise PipelineError("schema_error",
                                f"track {r.track_id} has conflicting classes")
        origin = r.origin if r.origin is not None else Origin.DETECTED
        by_track.setdefault(r.track_id, []).append(
            TrackEntry(r.frame_index, r.box, r.score, origin))
    tracks = []
    for tid in sorted(by_track):
        entries = tuple(sorted(by_track[tid], key=lambda e: e.frame_index))
        tracks.append(Tracklet(tid, classes[tid], entries))
    return tracks


def records_to_gt(records):
    by_track = {}
    classes = {}
    for r in records:
        if r.track_id is None:
            raise PipelineError("schema_error", "GT record without track_id")
        if classes.setdefault(r.track_id, r.cls) is not r.cls:
            raise PipelineError("schema_error",
                                f"GT track {r.track_id} has conflicting classes")
        by_track.setdefault(r.track_id, []).append((r.frame_index, r.box))
    return [GtTrack(tid, classes[tid], tuple(sorted(by_track[tid])))
            for tid in sorted(by_track)]


# ---------------------------------------------------------------------------
# Binary point frames
# ---------------------------------------------------------------------------

def write_point_frame(path, frame: PointFrame):
    """Writes points + ego pose; byte length is exactly 10 + 16n + 96."""
    path = Path(path)
    n = len(frame.cloud)
    table = np.empty((n, 4), dtype="<f4")
    table[:, :3] = frame.cloud.xyz
    table[:, 3] = frame.cloud.intensity
    blob = (struct.pack("<4sHI", POINT_FRAME_MAGIC, POINT_FRAME_VERSION, n)
            + table.tobytes()
            + frame.ego_pose.as_flat().astype("<f8").tobytes())
    path.write_bytes(blob)
    return path


def read_point_frame(path, frame_index=None) -> PointFrame:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 10:
        raise PipelineError("schema_error", f"{path}:0: truncated header")
    magic, version, n = struct.unpack_from("<4sHI", blob, 0)
    if magic != POINT_FRAME_MAGIC:
        raise PipelineError("schema_error", f"{path}:0: bad magic {magic!r}")
    if version != POINT_FRAME_VERSION:
        raise PipelineError("schema_error", f"{path}:4: unsupported version {version}")
    expected = 10 + 16 * n + 96
    if len(blob) != expected:
        raise PipelineError("schema_error",
                            f"{path}:{min(len(blob), expected)}: expected {expected} bytes, "
                            f"got {len(blob)}")
    table = np.frombuffer(blob, dtype="<f4", count=4 * n, offset=10).reshape(n, 4)
    pose = RigidPose.from_flat(np.frombuffer(blob, dtype="<f8", count=12, offset=10 + 16 * n))
    if frame_index is None:
        try:
            frame_index = int(path.stem)
        except ValueError:
            raise PipelineError("schema_error",
                                f"{path}:0: frame index not in filename; pass frame_index")
    cloud = PointCloud(table[:, :3].astype(np.float64), table[:, 3].astype(np.float64))
    return PointFrame(frame_index, cloud, pose)


# ---------------------------------------------------------------------------
# Track-sample container
# ---------------------------------------------------------------------------

_POINT_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                         ("intensity", "<f4"), ("flag", "u1"), ("src", "<u4")])


def _pack_label(label: ProposalLabel) -> bytes:
    head = struct.pack("<IBdd", label.frame_index, 1 if label.positive else 0,
                       label.iou, label.q)
    if not label.positive:
        return head
    residual = label.residual if label.residual is not None else ()
    has_res = 1 if len(residual) else 0
    body = struct.pack("<QB", label.gt_track_id, has_res)
    body += struct.pack("<7d", *label.gt_box.as_array())
    if has_res:
        body += struct.pack("<7d", *residual)
    return head + body


def _pack_sample(sample: TrackSample) -> bytes:
    seq = sample.sequence_id.encode("utf-8")
    parts = [struct.pack("<I", len(seq)), seq,
             struct.pack("<QB", sample.track_id, _CLASS_CODES[sample.cls]),
             sample.base_pose.as_flat().astype("<f8").tobytes(),
             struct.pack("<I", len(sample.proposals))]
    for p in sample.proposals:
        parts.append(struct.pack("<I7dd", p.frame_index, *p.box.as_array(), p.score))

    cloud = sample.points
    first_frame = sample.proposals[0].frame_index
    table = np.empty(len(cloud), dtype=_POINT_DTYPE)
    table["x"], table["y"], table["z"] = cloud.xyz.T
    table["intensity"] = cloud.intensity
    offsets = cloud.channels["source_frame"] - first_frame
    if len(offsets) and (offsets.min() < 0 or offsets.max() > 255):
        raise PipelineError("schema_error",
                            "point source frame offset does not fit one byte")
    table["flag"] = offsets.astype(np.uint8)
    table["src"] = cloud.channels["source_index"]
    parts.append(struct.pack("<I", len(cloud)))
    parts.append(table.tobytes())

    if sample.assignment is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<BBI", 1, 1 if sample.assignment.matched else 0,
                                 len(sample.assignment.labels)))
        for label in sample.assignment.labels:
            parts.append(_pack_label(label))
    payload = b"".join(parts)
    return struct.pack("<Q", len(payload)) + payload


class _Cursor:
    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.pos = 0

    def fail(self, message):
        raise PipelineError("schema_error", f"{self.path}:{self.pos}: {message}")

    def take(self, size):
        if self.pos + size > len(self.blob):
            self.fail(f"unexpected end of file (need {size} bytes)")
        out = self.blob[self.pos:self.pos + size]
        self.pos += size
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_sample(cur: _Cursor) -> TrackSample:
    (seq_len,) = cur.unpack("<I")
    sequence_id = cur.take(seq_len).decode("utf-8")
    track_id, code = cur.unpack("<QB")
    if code not in _CODE_CLASSES:
        cur.fail(f"unknown class code {code}")
    cls = _CODE_CLASSES[code]
    base_pose = RigidPose.from_flat(np.frombuffer(cur.take(96), dtype="<f8"))
    (n_prop,) = cur.unpack("<I")
    proposals = []
    for _ in range(n_prop):
        vals = cur.unpack("<I7dd")
        proposals.append(Proposal(vals[0], Box7.from_array(vals[1:8]), vals[8]))
    if not proposals:
        cur.fail("sample without proposals")
    (n_points,) = cur.unpack("<I")
    table = np.frombuffer(cur.take(n_points * _POINT_DTYPE.itemsize), dtype=_POINT_DTYPE)
    first_frame = proposals[0].frame_index
    source_frame = table["flag"].astype(np.int64) + first_frame
    points = PointCloud(
        np.column_stack([table["x"], table["y"], table["z"]]).astype(np.float64),
        table["intensity"].astype(np.float64),
        {
            "timestamp_code": TIMESTAMP_SCALE * source_frame,
            "source_frame": source_frame,
            "source_index": table["src"].astype(np.int64),
        })

    (has_assignment,) = cur.unpack("<B")
    assignment = None
    if has_assignment:
        matched, n_labels = cur.unpack("<BI")
        labels = []
        for _ in range(n_labels):
            frame, positive, iou, q = cur.unpack("<IBdd")
            if positive:
                gt_id, has_res = cur.unpack("<QB")
                gt_box = Box7.from_array(cur.unpack("<7d"))
                residual = tuple(cur.unpack("<7d")) if has_res else None
                labels.append(ProposalLabel(frame, gt_id, gt_box, iou, q, residual))
            else:
                labels.append(ProposalLabel(frame, iou=iou, q=q))
        assignment = TrackAssignment(track_id, bool(matched), tuple(labels))
    return TrackSample(sequence_id, track_id, cls, tuple(proposals), points,
                       base_pose, assignment)


def write_samples(path, samples):
    path = Path(path)
    samples = list(samples)
    blob = struct.pack("<4sHI", SAMPLE_MAGIC, SAMPLE_VERSION, len(samples))
    blob += b"".join(_pack_sample(s) for s in samples)
    path.write_bytes(blob)
    return path


def read_samples(path):
    path = Path(path)
    cur = _Cursor(path.read_bytes(), path)
    magic, version, count = cur.unpack("<4sHI")
    if magic != SAMPLE_MAGIC:
        cur.fail(f"bad magic {magic!r}")
    if version != SAMPLE_VERSION:
        cur.fail(f"unsupported version {version}")
    samples = []
    for _ in range(count):
        (length,) = cur.unpack("<Q")
        end = cur.pos + length
        samples.append(_unpack_sample(cur))
        if cur.pos != end:
            cur.fail(f"record length mismatch (expected end at {end})")
    if cur.pos != len(cur.blob):
        cur.fail("trailing garbage after last record")
    return samples


# ---------------------------------------------------------------------------
# Corpus directories
# ---------------------------------------------------------------------------

def write_corpus_sequence(root, result, hz=10.0):
    """Writes one simulated sequence: detections, GT, frames, and an index."""
    root = Path(root)
    seq_dir = root / result.sequence_id
    frames_dir = seq_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    write_records_jsonl(seq_dir / "detections.jsonl",
                        sequence_to_records(result.detections))
    write_records_jsonl(seq_dir / "gt.jsonl",
                        gt_to_records(result.sequence_id, result.gt_tracks, hz))
    for pf in result.point_frames:
        write_point_frame(frames_dir / f"{pf.frame_index:06d}.lpc", pf)
    index = {
        "sequence_id": result.sequence_id,
        "num_frames": len(result.point_frames),
        "hz": hz,
        "detections": "detections.jsonl",
        "gt": "gt.jsonl",
        "frames_dir": "frames",
    }
    (seq_dir / "index.json").write_text(json.dumps(index, sort_keys=True, indent=2) + "\n",
                                        encoding="utf-8")
    return seq_dir


@dataclass(frozen=True, eq=False)
class CorpusSequence:
    sequence_id: str
    hz: float
    detections: SequenceDetections
    gt_tracks: tuple
    point_frames: tuple


def read_corpus_sequence(seq_dir) -> CorpusSequence:
    seq_dir = Path(seq_dir)
    index_path = seq_dir / "index.json"
    try:
        index = json.loads(index_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise PipelineError("schema_error", f"{index_path}:0: missing index") from None
    except json.JSONDecodeError as err:
        raise _schema(index_path, err.lineno, f"invalid JSON ({err.msg})") from None
    for key in ("sequence_id", "num_frames", "hz", "detections", "frames_dir"):
        if key not in index:
            raise _schema(index_path, 1, f"missing field {key!r}")
    point_frames = []
    frames_dir = seq_dir / index["frames_dir"]
    for f in range(index["num_frames"]):
        point_frames.append(read_point_frame(frames_dir / f"{f:06d}.lpc"))
    ego_poses = {pf.frame_index: pf.ego_pose for pf in point_frames}
    records = read_records_jsonl(seq_dir / index["detections"])
    detections = records_to_sequence(records, sequence_id=index["sequence_id"],
                                     num_frames=index["num_frames"], hz=index["hz"],
                                     ego_poses=ego_poses)
    gt_tracks = ()
    gt_name = index.get("gt")
    if gt_name and (seq_dir / gt_name).exists():
        gt_tracks = tuple(records_to_gt(read_records_jsonl(seq_dir / gt_name)))
    return CorpusSequence(index["sequence_id"], float(index["hz"]), detections,
                          gt_tracks, tuple(point_frames))


def list_corpus_sequences(root):
    root = Path(root)
    return sorted(p for p in root.iterdir() if (p / "index.json").exists())


# ---------------------------------------------------------------------------
# Config and reports
# ---------------------------------------------------------------------------

def load_config(path) -> dict:
    path = Path(path)
    try:
        config = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        line = mark.line + 1 if mark else 0
        raise _schema(path, line, f"invalid YAML ({err})") from None
    if config is None:
        return {}
    if not isinstance(config, dict):
        raise _schema(path, 1, "config must be a mapping of sections")
    return config


def config_section(config, name) -> dict:
    section = config.get(name, {})
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise PipelineError("bad_config", f"config section {name!r} must be a mapping")
    return dict(section)


def write_report_json(path, report):
    path = Path(path)
    path.write_text(json.dumps(report.as_dict(), sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")
    return path


def render_report_text(report) -> str:
    lines = []
    for r in report.classes:
        lines.append(f"[{r.cls.value}]")
        lines.append(f"  AP_3D         {r.ap_3d:.4f}")
        lines.append(f"  AP_BEV        {r.ap_bev:.4f}")
        lines.append(f"  MOTA          {r.clear.mota:.2f}")
        lines.append(f"  MOTP          {r.clear.motp:.2f}")
        lines.append(f"  IDS%          {r.clear.ids_pct:.3f}")
        lines.append(f"  T-FN          {r.inspection.t_fn} ({r.inspection.t_fn_ratio:.3f})")
        lines.append(f"  H-FP          {r.inspection.h_fp} ({r.inspection.h_fp_ratio:.3f})")
        lines.append(f"  H-TP          {r.inspection.h_tp} ({r.inspection.h_tp_ratio:.3f})")
        flag = "" if r.inspection.s_t_reached else " (recall < 50%)"
        lines.append(f"  s_t           {r.inspection.s_t:.4f}{flag}")
        lines.append(f"  inferior      {len(r.life_cycle.inferior_track_ids)}"
                     f" of {len(r.life_cycle.lengths_s)} tracks")
    return "\n".join(lines) + "\n"


def render_report_csv(report) -> str:
    header = ("class,ap_3d,ap_bev,mota,motp,ids_pct,t_fn,t_fn_ratio,"
              "h_fp,h_fp_ratio,h_tp,h_tp_ratio,s_t,s_t_reached,num_inferior,num_tracks")
    rows = [header]
    for r in report.classes:
        rows.append(",".join(str(v) for v in (
            r.cls.value, r.ap_3d, r.ap_bev, r.clear.mota, r.clear.motp,
            r.clear.ids_pct, r.inspection.t_fn, r.inspection.t_fn_ratio,
            r.inspection.h_fp, r.inspection.h_fp_ratio, r.inspection.h_tp,
            r.inspection.h_tp_ratio, r.inspection.s_t, r.inspection.s_t_reached,
            len(r.life_cycle.inferior_track_ids), len(r.life_cycle.lengths_s))))
    return "\n".join(rows) + "\n"


def render_histogram_svg(life_cycle, title="track length (s)",
                         width=640, height=360) -> str:
    """Deterministic minimal SVG: track-length bars with the inferior-track
    share overlaid."""
    counts = life_cycle.hist_counts
    inferior = life_cycle.inferior_hist_counts
    edges = life_cycle.hist_edges
    margin = 45
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin
    top = max(counts) if counts else 1
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
        f'font-family="monospace" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
    ]
    n = max(len(counts), 1)
    bar_w = plot_w / n
    for i, c in enumerate(counts):
        h = plot_h * c / top if top else 0
        x = margin + i * bar_w
        y = height - margin - h
        parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar_w * 0.9:.2f}" '
                     f'height="{h:.2f}" fill="#7799cc"/>')
        if i < len(inferior) and inferior[i]:
            ih = plot_h * inferior[i] / top
            parts.append(f'<rect x="{x:.2f}" y="{height - margin - ih:.2f}" '
                         f'width="{bar_w * 0.9:.2f}" height="{ih:.2f}" fill="#cc5555"/>')
        if i < len(edges):
            parts.append(f'<text x="{x:.2f}" y="{height - margin + 16}" '
                         f'font-family="monospace" font-size="10">{edges[i]:g}</text>')
    parts.append(f'<text x="{margin - 6}" y="{margin}" text-anchor="end" '
                 f'font-family="monospace" font-size="10">{top}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
