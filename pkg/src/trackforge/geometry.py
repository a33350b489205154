"""Rigid 3D geometry kernel: oriented boxes, rigid poses, rotated IoU, cropping.

All operations are pure functions over immutable value types; boxes live in a
right-handed frame with yaw measured around +z from the +x axis, length along
the heading.
"""

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import PipelineError
from .validation import check_finite, check_points

# On-edge points within this distance of a clip edge count as inside, so IoU
# of touching boxes is deterministic.
EDGE_EPS = 1e-9
# Intersection areas below this are floating-point dust and collapse to 0.
MIN_INTERSECTION_AREA = 1e-12


class ObjectClass(Enum):
    VEHICLE = "Vehicle"
    PEDESTRIAN = "Pedestrian"
    CYCLIST = "Cyclist"


def normalize_yaw(yaw):
    """Map an angle (scalar or array) to the canonical interval (-pi, pi]."""
    arr = np.asarray(yaw, dtype=float)
    wrapped = np.mod(arr + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    # In-range values pass through untouched; the mod arithmetic above can
    # perturb them by an ulp.
    wrapped = np.where((arr > -np.pi) & (arr <= np.pi), arr, wrapped)
    if np.isscalar(yaw) or np.ndim(yaw) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Box7:
    """7-DoF oriented box: center (m), size (m), yaw (rad) around +z."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise PipelineError("schema_error", f"box sizes must be positive, got {(self.l, self.w, self.h)}")
        for v in (self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw):
            if not math.isfinite(v):
                raise PipelineError("schema_error", "box has non-finite component")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @classmethod
    def from_array(cls, arr) -> "Box7":
        cx, cy, cz, l, w, h, yaw = (float(v) for v in arr)
        return cls(cx, cy, cz, l, w, h, yaw)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw])

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    @property
    def bev_area(self) -> float:
        return self.l * self.w

    @property
    def bev_diagonal(self) -> float:
        return math.hypot(self.l, self.w)

    def with_size(self, l, w, h) -> "Box7":
        return replace(self, l=float(l), w=float(w), h=float(h))


@dataclass(frozen=True)
class RigidPose:
    """Proper rigid transform: x_out = rotation @ x_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(3)
        check_finite(rot, "rotation")
        check_finite(tra, "translation")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9):
            raise PipelineError("schema_error", "rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise PipelineError("schema_error", "rotation determinant is not +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw_translation(cls, yaw: float, translation) -> "RigidPose":
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, np.asarray(translation, dtype=np.float64))

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self after other: (self @ other)(x) = self(other(x))."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "RigidPose") -> "RigidPose":
        return self.compose(other)

    def inverse(self) -> "RigidPose":
        rot_t = self.rotation.T
        return RigidPose(rot_t, -rot_t @ self.translation)

    def transform_points(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.rotation.T + self.translation

    def as_flat(self) -> np.ndarray:
        """12 floats: row-major rotation then translation (file layout)."""
        return np.concatenate([self.rotation.reshape(9), self.translation])

    @classmethod
    def from_flat(cls, flat) -> "RigidPose":
        flat = np.asarray(flat, dtype=np.float64).reshape(12)
        return cls(flat[:9].reshape(3, 3), flat[9:])


@dataclass(frozen=True)
class PointCloud:
    """N points with coordinates, intensity and named per-point channels."""

    xyz: np.ndarray
    intensity: np.ndarray = None
    channels: dict = field(default_factory=dict)

    def __post_init__(self):
        xyz = check_points(self.xyz)
        object.__setattr__(self, "xyz", xyz)
        inten = self.intensity
        if inten is None:
            inten = np.zeros(len(xyz))
        inten = np.asarray(inten, dtype=np.float64).reshape(len(xyz))
        object.__setattr__(self, "intensity", inten)
        for name, ch in self.channels.items():
            ch = np.asarray(ch)
            if ch.shape[0] != len(xyz):
                raise PipelineError("schema_error", f"channel {name!r} length mismatch")
            self.channels[name] = ch

    @classmethod
    def empty(cls, channel_names=()) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), {n: np.zeros(0) for n in channel_names})

    def __len__(self) -> int:
        return len(self.xyz)

    def select(self, index) -> "PointCloud":
        return PointCloud(self.xyz[index], self.intensity[index],
                          {n: ch[index] for n, ch in self.channels.items()})

    def with_channel(self, name, values) -> "PointCloud":
        channels = dict(self.channels)
        channels[name] = np.asarray(values)
        return PointCloud(self.xyz, self.intensity, channels)

    def transformed(self, pose: RigidPose) -> "PointCloud":
        return PointCloud(pose.transform_points(self.xyz), self.intensity, dict(self.channels))

    @classmethod
    def concatenate(cls, clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        names = set(clouds[0].channels)
        for c in clouds:
            if set(c.channels) != names:
                raise PipelineError("schema_error", "point cloud channel sets differ")
        return cls(np.concatenate([c.xyz for c in clouds]),
                   np.concatenate([c.intensity for c in clouds]),
                   {n: np.concatenate([c.channels[n] for c in clouds]) for n in names})


@dataclass(frozen=True)
class LabeledBox:
    """A classified, scored per-frame detection."""

    box: Box7
    cls: ObjectClass
    score: float
    frame_index: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise PipelineError("schema_error", f"score must be in [0, 1], got {self.score}")
        if self.frame_index < 0:
            raise PipelineError("schema_error", "frame_index must be >= 0")


# ---------------------------------------------------------------------------
# Rotated-rectangle IoU via sequential half-plane clipping
# ---------------------------------------------------------------------------

def _bev_corners(cx, cy, l, w, yaw):
    """Counter-clockwise BEV corners of a yaw-rotated rectangle."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = 0.5 * l, 0.5 * w
    out = []
    for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        out.append((cx + c * dx - s * dy, cy + s * dx + c * dy))
    return out


def box_corners_bev(box: Box7) -> np.ndarray:
    """4x2 array of BEV corners, counter-clockwise."""
    return np.array(_bev_corners(box.cx, box.cy, box.l, box.w, box.yaw))


def _clip_polygon(subject, clip):
    """Sutherland-Hodgman clip of ``subject`` against convex CCW ``clip``.

    Points within EDGE_EPS of a clip edge count as inside.
    """
    output = subject
    n = len(clip)
    for i in range(n):
        if not output:
            return []
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inputs = output
        output = []
        px, py = inputs[-1]
        prev_side = ex * (py - ay) - ey * (px - ax)
        for qx, qy in inputs:
            side = ex * (qy - ay) - ey * (qx - ax)
            if side >= -EDGE_EPS:
                if prev_side < -EDGE_EPS:
                    t = prev_side / (prev_side - side)
                    output.append((px + t * (qx - px), py + t * (qy - py)))
                output.append((qx, qy))
            elif prev_side >= -EDGE_EPS:
                t = prev_side / (prev_side - side)
                output.append((px + t * (qx - px), py + t * (qy - py)))
            px, py, prev_side = qx, qy, side
    return output


def _polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    area = 0.0
    px, py = poly[-1]
    for qx, qy in poly:
        area += px * qy - qx * py
        px, py = qx, qy
    return 0.5 * abs(area)


def _bev_intersection_area(a: Box7, b: Box7) -> float:
    inter = _clip_polygon(_bev_corners(a.cx, a.cy, a.l, a.w, a.yaw),
                          _bev_corners(b.cx, b.cy, b.l, b.w, b.yaw))
    area = _polygon_area(inter)
    return 0.0 if area < MIN_INTERSECTION_AREA else area


def bev_iou(a: Box7, b: Box7) -> float:
    """IoU of the two boxes' yaw-rotated footprints in the x-y plane."""
    if a == b:
        return 1.0
    inter = _bev_intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    # Polygon clipping can drift off the true area by an ulp; IoU is bounded.
    return min(1.0, inter / (a.bev_area + b.bev_area - inter))


def _vertical_overlap(a: Box7, b: Box7) -> float:
    lo = max(a.cz - 0.5 * a.h, b.cz - 0.5 * b.h)
    hi = min(a.cz + 0.5 * a.h, b.cz + 0.5 * b.h)
    return hi - lo


def iou3d(a: Box7, b: Box7) -> float:
    """Volumetric IoU: BEV intersection area times vertical overlap."""
    if a == b:
        return 1.0
    dz = _vertical_overlap(a, b)
    if dz <= 0.0:
        return 0.0
    inter_area = _bev_intersection_area(a, b)
    if inter_area == 0.0:
        return 0.0
    inter = inter_area * dz
    return min(1.0, inter / (a.volume + b.volume - inter))


def _candidate_pairs(boxes_a, boxes_b, need_vertical):
    """Indices of pairs whose bounding circles (and z spans) overlap."""
    pa = np.array([[b.cx, b.cy, b.cz, b.bev_diagonal, b.h] for b in boxes_a])
    pb = np.array([[b.cx, b.cy, b.cz, b.bev_diagonal, b.h] for b in boxes_b])
    dx = pa[:, None, 0] - pb[None, :, 0]
    dy = pa[:, None, 1] - pb[None, :, 1]
    reach = 0.5 * (pa[:, None, 3] + pb[None, :, 3])
    near = dx * dx + dy * dy <= reach * reach
    if need_vertical:
        near &= np.abs(pa[:, None, 2] - pb[None, :, 2]) < 0.5 * (pa[:, None, 4] + pb[None, :, 4])
    return np.argwhere(near)


def iou3d_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise volumetric IoU with a cheap center-distance prefilter."""
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if not len(boxes_a) or not len(boxes_b):
        return out
    for i, j in _candidate_pairs(boxes_a, boxes_b, need_vertical=True):
        out[i, j] = iou3d(boxes_a[i], boxes_b[j])
    return out


def bev_iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise BEV IoU with a cheap center-distance prefilter."""
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if not len(boxes_a) or not len(boxes_b):
        return out
    for i, j in _candidate_pairs(boxes_a, boxes_b, need_vertical=False):
        out[i, j] = bev_iou(boxes_a[i], boxes_b[j])
    return out


# ---------------------------------------------------------------------------
# Cropping and canonical frames
# ---------------------------------------------------------------------------

def to_canonical(box: Box7) -> RigidPose:
    """Pose mapping world coordinates into the box frame (center at origin,
    heading along +x)."""
    inv = RigidPose.from_yaw_translation(box.yaw, box.center).inverse()
    return inv


def points_in_box(box: Box7, xyz: np.ndarray, margin_xyz=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Boolean mask of points inside the box enlarged by ``margin_xyz``.

    Margins are total per dimension (half per side); the test is closed, so
    points exactly on the enlarged boundary count as inside.
    """
    mx, my, mz = margin_xyz
    if mx < 0 or my < 0 or mz < 0:
        raise PipelineError("bad_config", "crop margins must be >= 0")
    xyz = np.asarray(xyz, dtype=np.float64)
    if xyz.size == 0:
        return np.zeros(0, dtype=bool)
    local = to_canonical(box).transform_points(xyz)
    return ((np.abs(local[:, 0]) <= 0.5 * (box.l + mx))
            & (np.abs(local[:, 1]) <= 0.5 * (box.w + my))
            & (np.abs(local[:, 2]) <= 0.5 * (box.h + mz)))


def crop_points(box: Box7, margin_xyz, cloud: PointCloud) -> PointCloud:
    """Points of ``cloud`` inside the box enlarged by ``margin_xyz``."""
    return cloud.select(points_in_box(box, cloud.xyz, margin_xyz))


def apply_pose(pose: RigidPose, x):
    """Apply a rigid pose to a Box7 or a PointCloud, returning the same type.

    Boxes keep their size; yaw is recomputed from the transformed heading
    vector and re-normalized.
    """
    if isinstance(x, Box7):
        center = pose.rotation @ x.center + pose.translation
        heading = pose.rotation @ np.array([math.cos(x.yaw), math.sin(x.yaw), 0.0])
        yaw = math.atan2(heading[1], heading[0])
        return Box7(center[0], center[1], center[2], x.l, x.w, x.h, yaw)
    if isinstance(x, PointCloud):
        return x.transformed(pose)
    raise TypeError(f"cannot apply pose to {type(x).__name__}")
