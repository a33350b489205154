"""Bidirectional multi-object tracking over per-frame 3D detections.

Constant-velocity Kalman filtering, IoU-gated bipartite association, an
immortal lifecycle that fills detection gaps with predicted pseudo-boxes,
forward extension past the last detection, and backward extension by
re-estimating the motion backwards in time (backtracing).
"""

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator

from .errors import PipelineError
from .geometry import Box7, LabeledBox, ObjectClass, RigidPose, iou3d_matrix, normalize_yaw
from .validation import check_finite

STATE_DIM = 10  # cx, cy, cz, yaw, l, w, h, vx, vy, vz
OBS_DIM = 7     # cx, cy, cz, yaw, l, w, h

_F = np.eye(STATE_DIM)
_F[0, 7] = _F[1, 8] = _F[2, 9] = 1.0
_H = np.eye(OBS_DIM, STATE_DIM)

# Pseudo-boxes are built from filter state; sizes are clamped to stay valid.
_MIN_SIZE = 0.01


class Origin(Enum):
    """How a track entry came to exist."""

    DETECTED = "detected"
    FILLED = "filled"
    FORWARD_EXT = "forward_ext"
    BACKWARD_EXT = "backward_ext"


@dataclass(frozen=True)
class KalmanState:
    """Gaussian belief over (cx, cy, cz, yaw, l, w, h, vx, vy, vz)."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(STATE_DIM)
        cov = np.array(self.covariance, dtype=np.float64).reshape(STATE_DIM, STATE_DIM)
        check_finite(mean, "mean")
        check_finite(cov, "covariance")
        if not np.allclose(cov, cov.T, atol=1e-9):
            raise PipelineError("schema_error", "covariance is not symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise PipelineError("schema_error", "covariance is not positive-definite") from None
        mean[3] = normalize_yaw(mean[3])
        cov = 0.5 * (cov + cov.T)
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    def box(self) -> Box7:
        m = self.mean
        return Box7(m[0], m[1], m[2],
                    max(m[4], _MIN_SIZE), max(m[5], _MIN_SIZE), max(m[6], _MIN_SIZE),
                    m[3])


@dataclass(frozen=True)
class TrackEntry:
    frame_index: int
    box: Box7
    score: float
    origin: Origin


@dataclass(frozen=True)
class Tracklet:
    """One tracked object: ordered per-frame entries tagged by origin."""

    track_id: int
    cls: ObjectClass
    entries: tuple

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise PipelineError("empty_track", f"track {self.track_id} has no entries")
        frames = [e.frame_index for e in entries]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise PipelineError("schema_error", f"track {self.track_id} frames not strictly increasing")
        object.__setattr__(self, "entries", entries)

    @property
    def first_frame(self) -> int:
        return self.entries[0].frame_index

    @property
    def last_frame(self) -> int:
        return self.entries[-1].frame_index

    def is_gap_free(self) -> bool:
        return self.last_frame - self.first_frame + 1 == len(self.entries)

    def detected_entries(self):
        return [e for e in self.entries if e.origin is Origin.DETECTED]

    def detected_span(self) -> int:
        det = self.detected_entries()
        if not det:
            return 0
        return det[-1].frame_index - det[0].frame_index + 1

    def entry_at(self, frame_index: int):
        for e in self.entries:
            if e.frame_index == frame_index:
                return e
        return None


@dataclass(frozen=True)
class DetectionFrame:
    frame_index: int
    timestamp: float
    ego_pose: RigidPose
    detections: tuple

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))
        for det in self.detections:
            if det.frame_index != self.frame_index:
                raise PipelineError("schema_error",
                                    f"detection frame {det.frame_index} != frame {self.frame_index}")


@dataclass(frozen=True)
class SequenceDetections:
    """All per-frame detections of one drive, with ego poses."""

    sequence_id: str
    frames: tuple

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        for prev, cur in zip(frames, frames[1:]):
            if cur.frame_index != prev.frame_index + 1:
                raise PipelineError("schema_error", "frame indices must be consecutive")
            if cur.timestamp <= prev.timestamp:
                raise PipelineError("schema_error", "timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------------------
# Kalman filter primitives
# ---------------------------------------------------------------------------

def kf_predict(state: KalmanState, process_noise_diag) -> KalmanState:
    """One constant-velocity step: positions advance by velocities, yaw and
    sizes random-walk, covariance picks up process noise."""
    q = np.asarray(process_noise_diag, dtype=np.float64).reshape(STATE_DIM)
    mean = _F @ state.mean
    cov = _F @ state.covariance @ _F.T + np.diag(q)
    return KalmanState(mean, cov)


def align_yaw_hemisphere(obs_yaw: float, ref_yaw: float) -> float:
    """Flip the observed yaw by pi when it disagrees with the reference by
    more than pi/2, so near-antiparallel detections update cleanly."""
    delta = normalize_yaw(obs_yaw - ref_yaw)
    if abs(delta) > math.pi / 2:
        return normalize_yaw(obs_yaw + math.pi)
    return obs_yaw


def kf_update(state: KalmanState, obs: Box7, obs_noise_diag) -> KalmanState:
    """Linear measurement update on (cx, cy, cz, yaw, l, w, h)."""
    r = np.asarray(obs_noise_diag, dtype=np.float64).reshape(OBS_DIM)
    yaw = align_yaw_hemisphere(obs.yaw, state.mean[3])
    z = np.array([obs.cx, obs.cy, obs.cz, yaw, obs.l, obs.w, obs.h])
    innovation = z - _H @ state.mean
    innovation[3] = normalize_yaw(innovation[3])
    s = _H @ state.covariance @ _H.T + np.diag(r)
    try:
        np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        raise PipelineError("degenerate_innovation", "innovation covariance is singular") from None
    gain = np.linalg.solve(s, _H @ state.covariance).T
    mean = state.mean + gain @ innovation
    shrink = np.eye(STATE_DIM) - gain @ _H
    cov = shrink @ state.covariance @ shrink.T + gain @ np.diag(r) @ gain.T
    return KalmanState(mean, cov)


def associate(predicted, detections, gate):
    """Optimal bipartite matching between predicted track boxes and detections.

    Minimizes the total (1 - iou3d); matched pairs below the IoU gate are
    dropped back to unmatched.

    Args:
        predicted: list of (track_key, Box7).
        detections: list of LabeledBox.
        gate: minimum iou3d for a kept match, in (0, 1).

    Returns:
        (matches, unmatched_track_keys, unmatched_detection_indices) where
        matches is a list of (track_key, detection_index).
    """
    if not 0.0 < gate < 1.0:
        raise PipelineError("bad_config", f"gate must be in (0, 1), got {gate}")
    if not predicted or not detections:
        return [], [key for key, _ in predicted], list(range(len(detections)))
    iou = iou3d_matrix([b for _, b in predicted], [d.box for d in detections])
    rows, cols = linear_sum_assignment(1.0 - iou)
    matches = []
    matched_rows, matched_cols = set(), set()
    for r, c in zip(rows, cols):
        if iou[r, c] >= gate:
            matches.append((predicted[r][0], int(c)))
            matched_rows.add(r)
            matched_cols.add(c)
    unmatched_tracks = [predicted[r][0] for r in range(len(predicted)) if r not in matched_rows]
    unmatched_dets = [c for c in range(len(detections)) if c not in matched_cols]
    return matches, unmatched_tracks, unmatched_dets


# ---------------------------------------------------------------------------
# Tracker
# ---------------------------------------------------------------------------

@dataclass
class _LiveTrack:
    track_id: int
    cls: ObjectClass
    state: KalmanState
    entries: list = field(default_factory=list)
    last_detected_score: float = 0.0


class BidirectionalTracker(BaseEstimator):
    """Offline tracker with an immortal track lifecycle.

    Tracks are never terminated inside a sequence: frames without a matched
    detection receive a Filled pseudo-box from the motion model. After the
    last detection, tracks whose detected span exceeds ``long_track_frames``
    are extended to the sequence end and all others ``short_ext_frames``
    further; backtracing then prepends a backward extension of the same
    length rule. Extension entries whose center leaves the perception radius
    around the ego vehicle are cut off.

    Parameters mirror the structured config file one-to-one.
    """

    def __init__(self, gate_iou=0.1, long_track_frames=100, short_ext_frames=20,
                 perception_radius_m=85.0, extension="bidirectional",
                 process_noise_pos=0.05, process_noise_size=0.01,
                 process_noise_vel=0.1, obs_noise_pos=0.1, obs_noise_size=0.05,
                 init_velocity_std=1.0):
        self.gate_iou = gate_iou
        self.long_track_frames = long_track_frames
        self.short_ext_frames = short_ext_frames
        self.perception_radius_m = perception_radius_m
        self.extension = extension
        self.process_noise_pos = process_noise_pos
        self.process_noise_size = process_noise_size
        self.process_noise_vel = process_noise_vel
        self.obs_noise_pos = obs_noise_pos
        self.obs_noise_size = obs_noise_size
        self.init_velocity_std = init_velocity_std

    # -- noise helpers ------------------------------------------------------

    def _q_diag(self):
        p, s, v = self.process_noise_pos, self.process_noise_size, self.process_noise_vel
        return np.array([p, p, p, p, s, s, s, v, v, v]) ** 2

    def _r_diag(self):
        p, s = self.obs_noise_pos, self.obs_noise_size
        return np.array([p, p, p, p, s, s, s]) ** 2

    def _initial_state(self, box: Box7) -> KalmanState:
        mean = np.zeros(STATE_DIM)
        mean[:OBS_DIM] = [box.cx, box.cy, box.cz, box.yaw, box.l, box.w, box.h]
        cov = np.zeros((STATE_DIM, STATE_DIM))
        cov[:OBS_DIM, :OBS_DIM] = np.diag(10.0 * self._r_diag())
        cov[OBS_DIM:, OBS_DIM:] = np.eye(3) * self.init_velocity_std ** 2
        return KalmanState(mean, cov)

    # -- public entry points ------------------------------------------------

    def track(self, seq: SequenceDetections):
        """Run the configured variant: "none", "forward" or "bidirectional"."""
        if self.extension == "none":
            return self._forward(seq, extend_tail=False)
        if self.extension == "forward":
            return self.run_forward(seq)
        if self.extension == "bidirectional":
            return self.run_bidirectional(seq)
        raise PipelineError("bad_config", f"unknown extension mode {self.extension!r}")

    def run_forward(self, seq: SequenceDetections):
        return self._forward(seq, extend_tail=True)

    def run_bidirectional(self, seq: SequenceDetections):
        return [self.backtrace_extend(t, seq) for t in self.run_forward(seq)]

    # -- forward pass -------------------------------------------------------

    def _forward(self, seq: SequenceDetections, extend_tail: bool):
        if not 0.0 < self.gate_iou < 1.0:
            raise PipelineError("bad_config", f"gate_iou must be in (0, 1), got {self.gate_iou}")
        if not seq.frames:
            return []
        q, r = self._q_diag(), self._r_diag()
        live = []
        next_id = 0
        for frame in seq.frames:
            for t in live:
                t.state = kf_predict(t.state, q)
            by_class = {}
            for idx, det in enumerate(frame.detections):
                by_class.setdefault(det.cls, []).append((idx, det))
            handled = set()
            for cls, indexed in by_class.items():
                tracks_c = [t for t in live if t.cls is cls]
                matches, unmatched_t, unmatched_d = associate(
                    [(t.track_id, t.state.box()) for t in tracks_c],
                    [det for _, det in indexed], self.gate_iou)
                by_id = {t.track_id: t for t in tracks_c}
                for track_key, local_idx in matches:
                    t = by_id[track_key]
                    det = indexed[local_idx][1]
                    t.state = kf_update(t.state, det.box, r)
                    t.entries.append(TrackEntry(frame.frame_index, det.box, det.score,
                                                Origin.DETECTED))
                    t.last_detected_score = det.score
                    handled.add(t.track_id)
                for local_idx in unmatched_d:
                    det = indexed[local_idx][1]
                    t = _LiveTrack(next_id, cls, self._initial_state(det.box))
                    next_id += 1
                    t.entries.append(TrackEntry(frame.frame_index, det.box, det.score,
                                                Origin.DETECTED))
                    t.last_detected_score = det.score
                    live.append(t)
                    handled.add(t.track_id)
            for t in live:
                if t.track_id not in handled and t.entries:
                    t.entries.append(TrackEntry(frame.frame_index, t.state.box(),
                                                0.5 * t.last_detected_score, Origin.FILLED))
        live.sort(key=lambda t: t.track_id)
        seq_end = seq.frames[-1].frame_index
        ego_xy = {f.frame_index: f.ego_pose.translation[:2] for f in seq.frames}
        out = []
        for t in live:
            out.append(self._emit(t, seq_end, ego_xy, extend_tail))
        return out

    def _in_range(self, box: Box7, ego_xy_at_frame) -> bool:
        dx = box.cx - ego_xy_at_frame[0]
        dy = box.cy - ego_xy_at_frame[1]
        return math.hypot(dx, dy) <= self.perception_radius_m

    def _emit(self, t: _LiveTrack, seq_end: int, ego_xy: dict, extend_tail: bool) -> Tracklet:
        detected = [e.frame_index for e in t.entries if e.origin is Origin.DETECTED]
        first_det, last_det = detected[0], detected[-1]
        span = last_det - first_det + 1
        if extend_tail:
            if span > self.long_track_frames:
                keep_until = seq_end
            else:
                keep_until = min(seq_end, last_det + self.short_ext_frames)
        else:
            keep_until = last_det
        entries = []
        for e in t.entries:
            if e.frame_index <= last_det:
                entries.append(e)
            elif e.frame_index <= keep_until:
                if not self._in_range(e.box, ego_xy[e.frame_index]):
                    break
                entries.append(replace(e, origin=Origin.FORWARD_EXT))
        return Tracklet(t.track_id, t.cls, tuple(entries))

    # -- backward pass ------------------------------------------------------

    def backtrace_extend(self, track: Tracklet, seq: SequenceDetections) -> Tracklet:
        """Prepend BackwardExt entries by running the motion model in reverse
        time over the track's detections."""
        first = track.first_frame
        seq_start = seq.frames[0].frame_index
        if first <= seq_start:
            return track
        detected = track.detected_entries()
        span = detected[-1].frame_index - detected[0].frame_index + 1
        if span > self.long_track_frames:
            stop_at = seq_start
        else:
            stop_at = max(seq_start, first - self.short_ext_frames)
        if stop_at >= first:
            return track
        q, r = self._q_diag(), self._r_diag()
        by_frame = {e.frame_index: e for e in detected}
        state = self._initial_state(detected[-1].box)
        for frame in range(detected[-1].frame_index - 1, first - 1, -1):
            state = kf_predict(state, q)
            obs = by_frame.get(frame)
            if obs is not None:
                state = kf_update(state, obs.box, r)
        score = 0.5 * detected[0].score
        ego_xy = {f.frame_index: f.ego_pose.translation[:2] for f in seq.frames}
        prepend = []
        for frame in range(first - 1, stop_at - 1, -1):
            state = kf_predict(state, q)
            box = state.box()
            if not self._in_range(box, ego_xy[frame]):
                break
            prepend.append(TrackEntry(frame, box, score, Origin.BACKWARD_EXT))
        prepend.reverse()
        return Tracklet(track.track_id, track.cls, tuple(prepend) + track.entries)
