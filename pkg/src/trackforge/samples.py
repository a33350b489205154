"""Track sample construction for the external track refiner.

A track sample bundles every frame of one track: per-frame crops with an
expanded proposal, capped at 1024 points each, expressed in the first
proposal's box frame, with per-point timestamp codes and provenance channels.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator

from .errors import PipelineError
from .geometry import (
    Box7,
    ObjectClass,
    PointCloud,
    RigidPose,
    apply_pose,
    points_in_box,
    to_canonical,
)
from .validation import keyed_rng

SAMPLE_POINT_CAP = 1024
PROPOSAL_EXPAND_M = 2.0      # total growth per dimension (1 m per side)
OBJECT_CROP_MARGIN_M = 0.5
TIMESTAMP_SCALE = 0.01

TTA_ROTATION_ANGLES = (-2.0 * math.pi / 3.0, 0.0, 2.0 * math.pi / 3.0)


@dataclass(frozen=True, eq=False)
class PointFrame:
    """One frame of sensor points plus the ego pose mapping them to world."""

    frame_index: int
    cloud: PointCloud
    ego_pose: RigidPose

    def world_points(self) -> np.ndarray:
        return self.ego_pose.transform_points(self.cloud.xyz)


@dataclass(frozen=True)
class Proposal:
    frame_index: int
    box: Box7
    score: float


@dataclass(frozen=True, eq=False)
class TrackSample:
    """All frames of one track in the first proposal's canonical frame.

    ``points`` carries channels ``timestamp_code`` (0.01 x source frame),
    ``source_frame`` and ``source_index`` (provenance into the raw frame
    cloud). ``base_pose`` maps world coordinates into the sample frame.
    """

    sequence_id: str
    track_id: int
    cls: ObjectClass
    proposals: tuple
    points: PointCloud
    base_pose: RigidPose
    assignment: object = None

    def proposal_at(self, frame_index: int):
        for p in self.proposals:
            if p.frame_index == frame_index:
                return p
        return None


def build_sample(track, point_frames, sequence_id,
                 expand_m=PROPOSAL_EXPAND_M, max_points=SAMPLE_POINT_CAP) -> TrackSample:
    """Crop, downsample and canonicalize a whole track into one sample.

    Args:
        track: Tracklet whose entries provide the proposals.
        point_frames: PointFrame list or {frame_index: PointFrame}; frames
            missing from it contribute empty crops.
        sequence_id: keys the deterministic downsampling generator together
            with (track_id, frame_index).
    """
    if not track.entries:
        raise PipelineError("empty_track", f"track {track.track_id} has no proposals")
    if not isinstance(point_frames, dict):
        point_frames = {pf.frame_index: pf for pf in point_frames}
    base_pose = to_canonical(track.entries[0].box)
    margin = (expand_m, expand_m, expand_m)
    pieces = []
    for entry in track.entries:
        pf = point_frames.get(entry.frame_index)
        if pf is None or len(pf.cloud) == 0:
            continue
        world = pf.world_points()
        index = np.flatnonzero(points_in_box(entry.box, world, margin))
        if len(index) > max_points:
            rng = keyed_rng(sequence_id, track.track_id, entry.frame_index)
            index = index[np.sort(rng.choice(len(index), size=max_points, replace=False))]
        if len(index) == 0:
            continue
        n = len(index)
        pieces.append(PointCloud(
            base_pose.transform_points(world[index]),
            pf.cloud.intensity[index],
            {
                "timestamp_code": np.full(n, TIMESTAMP_SCALE * entry.frame_index),
                "source_frame": np.full(n, entry.frame_index, dtype=np.int64),
                "source_index": index.astype(np.int64),
            }))
    points = PointCloud.concatenate(pieces) if pieces else PointCloud.empty(
        ("timestamp_code", "source_frame", "source_index"))
    proposals = tuple(Proposal(e.frame_index, apply_pose(base_pose, e.box), e.score)
                      for e in track.entries)
    return TrackSample(sequence_id, track.track_id, track.cls, proposals, points, base_pose)


def object_crop(sample: TrackSample, frame_index: int,
                margin=OBJECT_CROP_MARGIN_M) -> PointCloud:
    """Crop the sample's concatenated points with one frame's proposal
    expanded by ``margin``, flagging points that came from that frame."""
    proposal = sample.proposal_at(frame_index)
    if proposal is None:
        raise PipelineError("schema_error", f"frame {frame_index} not in sample")
    mask = points_in_box(proposal.box, sample.points.xyz, (margin, margin, margin))
    crop = sample.points.select(mask)
    flag = (crop.channels["source_frame"] == frame_index).astype(np.uint8)
    return crop.with_channel("current_frame_flag", flag)


# ---------------------------------------------------------------------------
# Scene transforms (augmentation and TTA)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneTransform:
    """Flip, rotate about +z, scale, and shift vertically; in that order."""

    rotation: float = 0.0
    flip_x: bool = False    # negate x coordinates
    flip_y: bool = False    # negate y coordinates
    scale: float = 1.0
    dz: float = 0.0

    def is_identity(self) -> bool:
        return (self.rotation == 0.0 and not self.flip_x and not self.flip_y
                and self.scale == 1.0 and self.dz == 0.0)

    def _flip_signs(self):
        return (-1.0 if self.flip_x else 1.0), (-1.0 if self.flip_y else 1.0)

    def apply_points(self, xyz: np.ndarray) -> np.ndarray:
        if self.is_identity():
            return xyz
        sx, sy = self._flip_signs()
        x = xyz[:, 0] * sx
        y = xyz[:, 1] * sy
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        out = np.empty_like(xyz)
        out[:, 0] = self.scale * (c * x - s * y)
        out[:, 1] = self.scale * (s * x + c * y)
        out[:, 2] = self.scale * xyz[:, 2] + self.dz
        return out

    def unapply_points(self, xyz: np.ndarray) -> np.ndarray:
        if self.is_identity():
            return xyz
        sx, sy = self._flip_signs()
        z = (xyz[:, 2] - self.dz) / self.scale
        c, s = math.cos(-self.rotation), math.sin(-self.rotation)
        x = (c * xyz[:, 0] - s * xyz[:, 1]) / self.scale
        y = (s * xyz[:, 0] + c * xyz[:, 1]) / self.scale
        out = np.empty_like(xyz)
        out[:, 0] = x * sx
        out[:, 1] = y * sy
        out[:, 2] = z
        return out

    def _flip_yaw(self, yaw: float) -> float:
        sx, sy = self._flip_signs()
        return math.atan2(sy * math.sin(yaw), sx * math.cos(yaw))

    def apply_box(self, box: Box7) -> Box7:
        if self.is_identity():
            return box
        center = self.apply_points(box.center.reshape(1, 3))[0]
        yaw = self._flip_yaw(box.yaw) + self.rotation
        return Box7(center[0], center[1], center[2],
                    box.l * self.scale, box.w * self.scale, box.h * self.scale, yaw)

    def unapply_box(self, box: Box7) -> Box7:
        if self.is_identity():
            return box
        center = self.unapply_points(box.center.reshape(1, 3))[0]
        yaw = self._flip_yaw(box.yaw - self.rotation)
        return Box7(center[0], center[1], center[2],
                    box.l / self.scale, box.w / self.scale, box.h / self.scale, yaw)


def _transform_sample(sample: TrackSample, transform: SceneTransform) -> TrackSample:
    points = PointCloud(transform.apply_points(sample.points.xyz),
                        sample.points.intensity, dict(sample.points.channels))
    proposals = tuple(replace(p, box=transform.apply_box(p.box)) for p in sample.proposals)
    # Geometric labels refer to the untransformed scene; downstream re-assigns.
    return replace(sample, proposals=proposals, points=points, assignment=None)


def augment(sample: TrackSample, seed, rotation_range=0.78, flip_prob=0.5,
            scale_range=(0.95, 1.05), max_vertical_shift=0.2,
            center_jitter=(0.2, 0.2, 0.1), size_jitter=(0.8, 1.2),
            height_jitter=(0.9, 1.1), heading_jitter=0.2) -> TrackSample:
    """One global scene transform plus independent per-proposal box jitter.

    The global rotation/flip/scale/vertical-shift moves points and proposals
    together; the jitter perturbs each proposal box alone (center shifts
    proportional to its size, along its own axes). Deterministic in ``seed``.
    """
    rng = np.random.default_rng(seed)
    transform = SceneTransform(
        rotation=float(rng.uniform(-rotation_range, rotation_range)),
        flip_x=bool(rng.random() < flip_prob),
        flip_y=bool(rng.random() < flip_prob),
        scale=float(rng.uniform(scale_range[0], scale_range[1])),
        dz=float(rng.uniform(-max_vertical_shift, max_vertical_shift)))
    out = _transform_sample(sample, transform)
    jittered = []
    for p in out.proposals:
        b = p.box
        local_shift = np.array([rng.uniform(-center_jitter[0], center_jitter[0]) * b.l,
                                rng.uniform(-center_jitter[1], center_jitter[1]) * b.w,
                                rng.uniform(-center_jitter[2], center_jitter[2]) * b.h])
        shift = to_canonical(b).inverse().rotation @ local_shift
        jittered.append(replace(p, box=Box7(
            b.cx + shift[0], b.cy + shift[1], b.cz + shift[2],
            b.l * rng.uniform(size_jitter[0], size_jitter[1]),
            b.w * rng.uniform(size_jitter[0], size_jitter[1]),
            b.h * rng.uniform(height_jitter[0], height_jitter[1]),
            b.yaw + rng.uniform(-heading_jitter, heading_jitter))))
    return replace(out, proposals=tuple(jittered))


@dataclass(frozen=True, eq=False)
class TtaVariant:
    tag: str
    transform: SceneTransform
    sample: TrackSample


_FLIPS = (("", False, False), ("flip_x", True, False),
          ("flip_y", False, True), ("flip_xy", True, True))


def tta_tags(with_rotations=False):
    tags = []
    rotations = TTA_ROTATION_ANGLES if with_rotations else (0.0,)
    for ri in range(len(rotations)):
        prefix = f"rot{ri}_" if with_rotations else ""
        for name, _, _ in _FLIPS:
            tags.append((prefix + name).strip("_") or "identity")
    return tags


def tta_variants(sample: TrackSample, with_rotations=False):
    """Double-flip variants (4), optionally crossed with the three test-time
    rotations (12), each tagged with its transform for inverse mapping."""
    variants = []
    rotations = TTA_ROTATION_ANGLES if with_rotations else (0.0,)
    for ri, angle in enumerate(rotations):
        prefix = f"rot{ri}_" if with_rotations else ""
        for name, fx, fy in _FLIPS:
            tag = (prefix + name).strip("_") or "identity"
            transform = SceneTransform(rotation=angle, flip_x=fx, flip_y=fy)
            variants.append(TtaVariant(tag, transform, _transform_sample(sample, transform)))
    return variants


class TrackSampleBuilder(BaseEstimator):
    """Config-friendly wrapper over build_sample/augment."""

    def __init__(self, expand_m=PROPOSAL_EXPAND_M, max_points=SAMPLE_POINT_CAP,
                 object_crop_margin_m=OBJECT_CROP_MARGIN_M, tta_rotations=False):
        self.expand_m = expand_m
        self.max_points = max_points
        self.object_crop_margin_m = object_crop_margin_m
        self.tta_rotations = tta_rotations

    def build(self, track, point_frames, sequence_id) -> TrackSample:
        return build_sample(track, point_frames, sequence_id,
                            expand_m=self.expand_m, max_points=self.max_points)

    def variants(self, sample: TrackSample):
        return tta_variants(sample, with_rotations=self.tta_rotations)
