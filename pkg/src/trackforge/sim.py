"""Synthetic-world generator: ground-truth tracks with simple motion models,
surface-sampled point frames, and detector outputs derived from the ground
truth through a point-count-aware noise model.

Point frames carry sensor-frame clouds together with the ego pose, matching
the on-disk format; ``PointFrame.world_points()`` recovers world coordinates.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .assignment import GtTrack
from .errors import PipelineError
from .geometry import Box7, LabeledBox, ObjectClass, PointCloud, RigidPose, normalize_yaw, to_canonical
from .samples import PointFrame
from .tracking import DetectionFrame, SequenceDetections
from .validation import check_probability, keyed_rng

__all__ = [
    "OcclusionWindow",
    "ClassMix",
    "DetectorNoise",
    "ScenarioConfig",
    "SimResult",
    "Scorecard",
    "default_mix",
    "generate",
    "scorecard",
    "SequenceSimulator",
]

STATIC, CONSTANT_VELOCITY, TURN = "static", "constant-velocity", "turn"


@dataclass(frozen=True)
class OcclusionWindow:
    """Frames in [start_frame, end_frame) lose detections with drop_prob."""

    start_frame: int
    end_frame: int
    drop_prob: float

    def __post_init__(self):
        if not 0 <= self.start_frame < self.end_frame:
            raise PipelineError("bad_config",
                                f"bad occlusion window [{self.start_frame}, {self.end_frame})")
        check_probability(self.drop_prob, "drop_prob")

    def covers(self, frame):
        return self.start_frame <= frame < self.end_frame


@dataclass(frozen=True)
class ClassMix:
    cls: ObjectClass
    count: int
    size_mean: tuple
    size_std: tuple
    speed_range: tuple
    motion_weights: tuple  # (static, constant-velocity, turn)

    def __post_init__(self):
        if self.count < 0:
            raise PipelineError("bad_config", "object count must be >= 0")
        if min(self.motion_weights) < 0 or sum(self.motion_weights) <= 0:
            raise PipelineError("bad_config", "motion weights must be nonnegative, not all zero")


def default_mix(vehicles=8, pedestrians=4, cyclists=1):
    return (
        ClassMix(ObjectClass.VEHICLE, vehicles, (4.6, 2.0, 1.6), (0.4, 0.15, 0.1),
                 (3.0, 10.0), (0.35, 0.45, 0.2)),
        ClassMix(ObjectClass.PEDESTRIAN, pedestrians, (0.9, 0.85, 1.7), (0.08, 0.08, 0.1),
                 (0.6, 1.8), (0.3, 0.6, 0.1)),
        ClassMix(ObjectClass.CYCLIST, cyclists, (1.8, 0.8, 1.7), (0.15, 0.08, 0.1),
                 (2.0, 6.0), (0.1, 0.7, 0.2)),
    )


@dataclass(frozen=True)
class DetectorNoise:
    """Box jitter plus a drop/score model driven by per-object point count.

    Center jitter is uniform within +-frac*dimension along the box's local
    axes; length/width scales draw from length_scale_range, height from
    height_scale_range. noise_scale shrinks every geometric perturbation
    toward zero (0 reproduces the GT boxes exactly). The drop probability
    decays with point count n as floor + (ceiling - floor) * exp(-n / tau),
    and the score saturates as n / (n + score_half_points) plus Gaussian
    noise.
    """

    center_jitter_frac: tuple = (0.2, 0.2, 0.1)
    length_scale_range: tuple = (0.8, 1.2)
    height_scale_range: tuple = (0.9, 1.1)
    yaw_jitter_rad: float = 0.2
    yaw_flip_prob: float = 0.0
    noise_scale: float = 1.0
    drop_ceiling: float = 0.9
    drop_floor: float = 0.02
    drop_tau_points: float = 25.0
    score_half_points: float = 30.0
    score_noise: float = 0.05

    def __post_init__(self):
        check_probability(self.drop_ceiling, "drop_ceiling")
        check_probability(self.drop_floor, "drop_floor")
        check_probability(self.yaw_flip_prob, "yaw_flip_prob")
        if self.drop_floor > self.drop_ceiling:
            raise PipelineError("bad_config", "drop_floor above drop_ceiling")
        if self.noise_scale < 0:
            raise PipelineError("bad_config", "noise_scale must be >= 0")

    def drop_prob(self, num_points):
        span = self.drop_ceiling - self.drop_floor
        return self.drop_floor + span * math.exp(-num_points / self.drop_tau_points)


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    num_sequences: int = 1
    frames_per_sequence: int = 200
    hz: float = 10.0
    mix: tuple = field(default_factory=default_mix)
    occlusions: tuple = ()
    noise: DetectorNoise = field(default_factory=DetectorNoise)
    points_at_ref: float = 512.0
    ref_range_m: float = 10.0
    max_points_per_object: int = 2048
    spawn_radius_m: float = 65.0
    min_spawn_m: float = 5.0
    short_track_prob: float = 0.2
    clutter_per_frame: float = 0.0
    ego_speed_mps: float = 0.0

    def __post_init__(self):
        if self.frames_per_sequence <= 0:
            raise PipelineError("bad_config", "frames_per_sequence must be > 0")
        if self.num_sequences <= 0:
            raise PipelineError("bad_config", "num_sequences must be > 0")
        if self.hz <= 0:
            raise PipelineError("bad_config", "hz must be > 0")
        check_probability(self.short_track_prob, "short_track_prob")
        if self.clutter_per_frame < 0:
            raise PipelineError("bad_config", "clutter_per_frame must be >= 0")
        object.__setattr__(self, "mix", tuple(self.mix))
        object.__setattr__(self, "occlusions", tuple(self.occlusions))


@dataclass(frozen=True, eq=False)
class SimResult:
    sequence_id: str
    detections: SequenceDetections
    gt_tracks: tuple
    point_frames: tuple
    provenance: tuple  # per frame: gt_track_id per detection, -1 for clutter


@dataclass
class _SimObject:
    gt_id: int
    cls: ObjectClass
    size: tuple
    motion: str
    first_frame: int
    last_frame: int  # inclusive
    state: np.ndarray  # x, y, heading
    speed: float
    yaw_rate: float
    boxes: dict = field(default_factory=dict)
    num_points: dict = field(default_factory=dict)

    def alive(self, frame):
        return self.first_frame <= frame <= self.last_frame


def _face_samples(rng, l, w, h, n):
    """n points on the five upward/side faces of an origin box."""
    areas = np.array([w * h, w * h, l * h, l * h, l * w])
    counts = rng.multinomial(n, areas / areas.sum())
    parts = []
    for face, count in enumerate(counts):
        if count == 0:
            continue
        u = rng.uniform(-0.5, 0.5, size=(count, 2))
        if face == 0:
            parts.append(np.column_stack([np.full(count, l / 2), u[:, 0] * w, u[:, 1] * h]))
        elif face == 1:
            parts.append(np.column_stack([np.full(count, -l / 2), u[:, 0] * w, u[:, 1] * h]))
        elif face == 2:
            parts.append(np.column_stack([u[:, 0] * l, np.full(count, w / 2), u[:, 1] * h]))
        elif face == 3:
            parts.append(np.column_stack([u[:, 0] * l, np.full(count, -w / 2), u[:, 1] * h]))
        else:
            parts.append(np.column_stack([u[:, 0] * l, u[:, 1] * w, np.full(count, h / 2)]))
    if not parts:
        return np.zeros((0, 3))
    return np.concatenate(parts)


def _spawn_objects(cfg, seq_index):
    rng = keyed_rng(cfg.seed, "sim-world", seq_index)
    frames = cfg.frames_per_sequence
    dt = 1.0 / cfg.hz
    objects = []
    gt_id = 0
    for mix in cfg.mix:
        for _ in range(mix.count):
            mean = np.asarray(mix.size_mean)
            size = np.clip(mean + rng.normal(0, mix.size_std, 3), 0.5 * mean, 1.5 * mean)
            weights = np.asarray(mix.motion_weights, dtype=float)
            motion = rng.choice([STATIC, CONSTANT_VELOCITY, TURN], p=weights / weights.sum())
            radius = rng.uniform(cfg.min_spawn_m, cfg.spawn_radius_m)
            angle = rng.uniform(-np.pi, np.pi)
            heading = rng.uniform(-np.pi, np.pi)
            speed = 0.0 if motion == STATIC else rng.uniform(*mix.speed_range)
            yaw_rate = rng.uniform(0.05, 0.2) * rng.choice([-1.0, 1.0]) if motion == TURN else 0.0
            if rng.uniform() < cfg.short_track_prob:
                length = max(2, int(rng.uniform(0.1, 0.5) * frames))
                first = int(rng.integers(0, frames - length + 1))
                last = first + length - 1
            else:
                first, last = 0, frames - 1
            obj = _SimObject(gt_id, mix.cls, tuple(float(v) for v in size), motion,
                             first, last,
                             np.array([radius * np.cos(angle), radius * np.sin(angle), heading]),
                             float(speed), float(yaw_rate))
            x, y, yaw = obj.state
            for f in range(first, last + 1):
                obj.boxes[f] = Box7(x, y, size[2] / 2, size[0], size[1], size[2],
                                    normalize_yaw(yaw))
                x += speed * dt * math.cos(yaw)
                y += speed * dt * math.sin(yaw)
                yaw += yaw_rate * dt
            objects.append(obj)
            gt_id += 1
    return objects


def _jitter_box(rng, box, noise):
    s = noise.noise_scale
    fx, fy, fz = noise.center_jitter_frac
    local = np.array([rng.uniform(-fx, fx) * box.l,
                      rng.uniform(-fy, fy) * box.w,
                      rng.uniform(-fz, fz) * box.h]) * s
    lo, hi = noise.length_scale_range
    sl = 1.0 + (rng.uniform(lo, hi) - 1.0) * s
    sw = 1.0 + (rng.uniform(lo, hi) - 1.0) * s
    lo, hi = noise.height_scale_range
    sh = 1.0 + (rng.uniform(lo, hi) - 1.0) * s
    dyaw = rng.uniform(-noise.yaw_jitter_rad, noise.yaw_jitter_rad) * s
    flip = math.pi if rng.uniform() < noise.yaw_flip_prob else 0.0
    world_shift = to_canonical(box).inverse().rotation @ local
    return Box7(box.cx + world_shift[0], box.cy + world_shift[1], box.cz + world_shift[2],
                box.l * sl, box.w * sw, box.h * sh,
                normalize_yaw(box.yaw + dyaw + flip))


def _generate_sequence(cfg, seq_index):
    objects = _spawn_objects(cfg, seq_index)
    dt = 1.0 / cfg.hz
    frames = []
    point_frames = []
    provenance = []
    for f in range(cfg.frames_per_sequence):
        rng = keyed_rng(cfg.seed, "sim-frame", seq_index, f)
        ego = RigidPose.from_yaw_translation(0.0, [cfg.ego_speed_mps * f * dt, 0.0, 0.0])
        ego_xyz = ego.translation
        clouds = []
        dets = []
        frame_prov = []
        for obj in objects:
            if not obj.alive(f):
                continue
            box = obj.boxes[f]
            r = max(1.0, float(np.linalg.norm(box.center - ego_xyz)))
            area = (box.l * box.w + 2 * box.l * box.h + 2 * box.w * box.h)
            expected = cfg.points_at_ref * (cfg.ref_range_m / r) ** 2 * (area / 30.0)
            n = int(min(cfg.max_points_per_object, rng.poisson(expected)))
            obj.num_points[f] = n
            if n > 0:
                canonical = _face_samples(rng, box.l, box.w, box.h, n)
                world = to_canonical(box).inverse().transform_points(canonical)
                local = ego.inverse().transform_points(world)
                clouds.append(PointCloud(local, intensity=rng.uniform(0, 1, n)))

            drop = cfg.noise.drop_prob(n)
            for window in cfg.occlusions:
                if window.covers(f):
                    drop = max(drop, window.drop_prob)
            if rng.uniform() < drop:
                continue
            det_box = _jitter_box(rng, box, cfg.noise)
            score = float(np.clip(n / (n + cfg.noise.score_half_points)
                                  + rng.normal(0, cfg.noise.score_noise), 0.01, 1.0))
            dets.append(LabeledBox(det_box, obj.cls, score, f))
            frame_prov.append(obj.gt_id)

        if cfg.clutter_per_frame > 0:
            classes = [m.cls for m in cfg.mix if m.count > 0] or [ObjectClass.VEHICLE]
            for _ in range(int(rng.poisson(cfg.clutter_per_frame))):
                radius = rng.uniform(cfg.min_spawn_m, cfg.spawn_radius_m)
                angle = rng.uniform(-np.pi, np.pi)
                box = Box7(radius * np.cos(angle), radius * np.sin(angle), 0.8,
                           rng.uniform(3.5, 5.0), rng.uniform(1.7, 2.2),
                           rng.uniform(1.4, 1.8), rng.uniform(-np.pi, np.pi))
                cls = classes[int(rng.integers(0, len(classes)))]
                dets.append(LabeledBox(box, cls, float(rng.uniform(0.05, 0.5)), f))
                frame_prov.append(-1)

        cloud = PointCloud.concatenate(clouds) if clouds else PointCloud.empty()
        point_frames.append(PointFrame(f, cloud, ego))
        frames.append(DetectionFrame(f, f * dt, ego, tuple(dets)))
        provenance.append(tuple(frame_prov))

    gt_tracks = []
    for obj in objects:
        entries = tuple((f, obj.boxes[f]) for f in sorted(obj.boxes))
        counts = tuple(obj.num_points[f] for f, _ in entries)
        gt_tracks.append(GtTrack(obj.gt_id, obj.cls, entries, counts))
    sequence_id = f"seq{seq_index:03d}"
    return SimResult(sequence_id, SequenceDetections(sequence_id, tuple(frames)),
                     tuple(gt_tracks), tuple(point_frames), tuple(provenance))


def generate(cfg: ScenarioConfig):
    """Deterministic synthetic corpus: one SimResult per sequence."""
    return tuple(_generate_sequence(cfg, s) for s in range(cfg.num_sequences))


@dataclass(frozen=True)
class Scorecard:
    num_sequences: int
    num_tracks: int
    tracks_per_class: dict
    point_quantiles: tuple  # (10%, 50%, 90%) of per-box point counts
    detection_rate: float
    max_dropout_span: int
    mean_dropout_span: float
    short_track_fraction: float

    def as_dict(self):
        return {
            "num_sequences": self.num_sequences,
            "num_tracks": self.num_tracks,
            "tracks_per_class": {c.value: n for c, n in self.tracks_per_class.items()},
            "point_quantiles": list(self.point_quantiles),
            "detection_rate": self.detection_rate,
            "max_dropout_span": self.max_dropout_span,
            "mean_dropout_span": self.mean_dropout_span,
            "short_track_fraction": self.short_track_fraction,
        }


def scorecard(cfg: ScenarioConfig, short_track_s: float = 10.0) -> Scorecard:
    """Tabulates the difficulty of the corpus ``generate(cfg)`` produces."""
    results = generate(cfg)
    counts = []
    per_class = {}
    detected = 0
    total_boxes = 0
    spans = []
    short = 0
    tracks = 0
    for res in results:
        detected_ids = [{gid for gid in prov if gid >= 0} for prov in res.provenance]
        for t in res.gt_tracks:
            tracks += 1
            per_class[t.cls] = per_class.get(t.cls, 0) + 1
            counts.extend(t.num_points_per_frame)
            total_boxes += len(t.entries)
            if len(t.entries) / cfg.hz < short_track_s:
                short += 1
            span = 0
            for frame, _ in t.entries:
                if t.gt_track_id in detected_ids[frame]:
                    detected += 1
                    if span:
                        spans.append(span)
                    span = 0
                else:
                    span += 1
            if span:
                spans.append(span)
    q = tuple(float(v) for v in np.percentile(counts, [10, 50, 90])) if counts else (0.0,) * 3
    return Scorecard(
        num_sequences=len(results),
        num_tracks=tracks,
        tracks_per_class=per_class,
        point_quantiles=q,
        detection_rate=detected / total_boxes if total_boxes else 0.0,
        max_dropout_span=max(spans) if spans else 0,
        mean_dropout_span=float(np.mean(spans)) if spans else 0.0,
        short_track_fraction=short / tracks if tracks else 0.0,
    )


class SequenceSimulator(BaseEstimator):
    """Estimator-style front end over :func:`generate`."""

    def __init__(self, seed=0, num_sequences=1, frames_per_sequence=200, hz=10.0,
                 vehicles=8, pedestrians=4, cyclists=1, occlusions=(),
                 noise_scale=1.0, clutter_per_frame=0.0, short_track_prob=0.2,
                 spawn_radius_m=65.0, ego_speed_mps=0.0, points_at_ref=512.0):
        self.seed = seed
        self.num_sequences = num_sequences
        self.frames_per_sequence = frames_per_sequence
        self.hz = hz
        self.vehicles = vehicles
        self.pedestrians = pedestrians
        self.cyclists = cyclists
        self.occlusions = occlusions
        self.noise_scale = noise_scale
        self.clutter_per_frame = clutter_per_frame
        self.short_track_prob = short_track_prob
        self.spawn_radius_m = spawn_radius_m
        self.ego_speed_mps = ego_speed_mps
        self.points_at_ref = points_at_ref

    def build_config(self) -> ScenarioConfig:
        windows = tuple(w if isinstance(w, OcclusionWindow) else OcclusionWindow(*w)
                        for w in self.occlusions)
        return ScenarioConfig(
            seed=self.seed, num_sequences=self.num_sequences,
            frames_per_sequence=self.frames_per_sequence, hz=self.hz,
            mix=default_mix(self.vehicles, self.pedestrians, self.cyclists),
            occlusions=windows, noise=DetectorNoise(noise_scale=self.noise_scale),
            points_at_ref=self.points_at_ref, spawn_radius_m=self.spawn_radius_m,
            short_track_prob=self.short_track_prob,
            clutter_per_frame=self.clutter_per_frame, ego_speed_mps=self.ego_speed_mps)

    def generate(self):
        return generate(self.build_config())

    def scorecard(self, short_track_s=10.0):
        return scorecard(self.build_config(), short_track_s)
