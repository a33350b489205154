"""Track coherence refinement for quasi-rigid objects.

Aligns every box size in a track to a base frame, extracts per-frame object
shapes in their own box frames, estimates pairwise alignments with
point-to-point ICP, jointly optimizes all shape poses on a sparse pose graph
(windowed in time), scores each frame's pose by the Chamfer distance to its
temporal neighbors before and after optimization, and applies only the pose
corrections that improved that score.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation
from sklearn.base import BaseEstimator

from .errors import PipelineError
from .geometry import Box7, ObjectClass, PointCloud, RigidPose, apply_pose, crop_points, to_canonical
from .tracking import Origin, Tracklet

CORRESPONDENCE_RADIUS_M = 2.0
MIN_SHAPE_POINTS = 60          # strictly more survives
HEIGHT_EXPAND_M = 1.0          # total, height dimension only
POSE_GRAPH_WINDOW = 10


@dataclass(frozen=True, eq=False)
class ShapeNode:
    """One frame's object points in its canonical box frame, plus the pose
    that carries them toward the consensus shape."""

    frame_index: int
    points: PointCloud
    pose: RigidPose


@dataclass(frozen=True, eq=False)
class PoseGraphEdge:
    i: int
    j: int
    transform: RigidPose
    pairs: np.ndarray  # (m, 2) indices into node i / node j points


@dataclass(frozen=True)
class PoseQuality:
    frame_index: int
    q_before: float
    q_after: float

    @property
    def delta_q(self) -> float:
        return self.q_before - self.q_after


def align_sizes(track: Tracklet, base_idx: int) -> Tracklet:
    """Give every box in the track the base entry's (l, w, h); centers and
    yaws stay put."""
    if not 0 <= base_idx < len(track.entries):
        raise PipelineError("bad_config", f"base index {base_idx} out of range")
    base = track.entries[base_idx].box
    entries = tuple(replace(e, box=e.box.with_size(base.l, base.w, base.h))
                    for e in track.entries)
    return replace(track, entries=entries)


def extract_shapes(track: Tracklet, point_frames,
                   min_points=MIN_SHAPE_POINTS, height_expand=HEIGHT_EXPAND_M):
    """Crop each frame with a height-expanded box and keep frames with more
    than ``min_points`` points, each in its own canonical box frame."""
    sizes = {(e.box.l, e.box.w, e.box.h) for e in track.entries}
    if len(sizes) != 1:
        raise PipelineError("schema_error", "extract_shapes requires size-aligned boxes")
    if not isinstance(point_frames, dict):
        point_frames = {pf.frame_index: pf for pf in point_frames}
    nodes = []
    for e in track.entries:
        pf = point_frames.get(e.frame_index)
        if pf is None or len(pf.cloud) == 0:
            continue
        world = PointCloud(pf.world_points(), pf.cloud.intensity)
        crop = crop_points(e.box, (0.0, 0.0, height_expand), world)
        if len(crop) <= min_points:
            continue
        canonical = crop.transformed(to_canonical(e.box))
        nodes.append(ShapeNode(e.frame_index, canonical, RigidPose.identity()))
    if len(nodes) < 2:
        raise PipelineError("insufficient_shapes",
                            f"track {track.track_id}: {len(nodes)} usable shapes")
    return nodes


# ---------------------------------------------------------------------------
# Rigid alignment primitives
# ---------------------------------------------------------------------------

def rigid_fit(source: np.ndarray, target: np.ndarray) -> RigidPose:
    """Least-squares rigid transform taking paired source points to target
    points (cross-covariance SVD with reflection guard)."""
    src_mean = source.mean(axis=0)
    tgt_mean = target.mean(axis=0)
    h = (source - src_mean).T @ (target - tgt_mean)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidPose(rot, tgt_mean - rot @ src_mean)


def _pose_increment_norm(delta: RigidPose) -> float:
    angle = np.linalg.norm(Rotation.from_matrix(delta.rotation).as_rotvec())
    return angle + float(np.linalg.norm(delta.translation))


def icp_p2p(source: PointCloud, target: PointCloud,
            max_corr=CORRESPONDENCE_RADIUS_M, max_iter=50, tol=1e-6) -> RigidPose:
    """Point-to-point ICP aligning source onto target.

    Alternates nearest-neighbor matching within ``max_corr`` and the
    closed-form rigid fit until the pose increment drops below ``tol``.
    """
    src = np.asarray(source.xyz, dtype=np.float64)
    tgt = np.asarray(target.xyz, dtype=np.float64)
    if len(src) == 0 or len(tgt) == 0:
        raise PipelineError("no_overlap", "empty cloud in icp")
    tree = cKDTree(tgt)
    pose = RigidPose.identity()
    for it in range(max_iter):
        warped = pose.transform_points(src)
        dist, idx = tree.query(warped, distance_upper_bound=max_corr)
        keep = np.isfinite(dist)
        if not keep.any():
            if it == 0:
                raise PipelineError("no_overlap", "no correspondences within radius")
            break
        delta = rigid_fit(warped[keep], tgt[idx[keep]])
        pose = delta @ pose
        if _pose_increment_norm(delta) < tol:
            break
    return pose


def chamfer(a, b) -> float:
    """Symmetric Chamfer distance: mean nearest-neighbor Euclidean distance
    from a to b plus the mean from b to a."""
    pa = a.xyz if isinstance(a, PointCloud) else np.asarray(a, dtype=np.float64)
    pb = b.xyz if isinstance(b, PointCloud) else np.asarray(b, dtype=np.float64)
    if len(pa) == 0 or len(pb) == 0:
        raise PipelineError("empty_cloud", "chamfer needs non-empty clouds")
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return float(np.mean(d_ab)) + float(np.mean(d_ba))


# ---------------------------------------------------------------------------
# Pose graph
# ---------------------------------------------------------------------------

def _match_pairs(src_xyz, tgt_xyz, radius):
    dist, idx = cKDTree(tgt_xyz).query(src_xyz, distance_upper_bound=radius)
    keep = np.flatnonzero(np.isfinite(dist))
    if len(keep) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.column_stack([keep, idx[keep]]).astype(np.int64)


def build_pose_graph(nodes, k=POSE_GRAPH_WINDOW, max_corr=CORRESPONDENCE_RADIUS_M,
                     icp_max_iter=50, icp_tol=1e-6):
    """Edges between nodes within ``k`` positions of each other (surviving
    order), with ICP-estimated transforms and their correspondences."""
    edges = []
    for i in range(len(nodes)):
        for j in range(i + 1, min(i + k + 1, len(nodes))):
            try:
                t_ij = icp_p2p(nodes[i].points, nodes[j].points,
                               max_corr=max_corr, max_iter=icp_max_iter, tol=icp_tol)
            except PipelineError:
                continue
            pairs = _match_pairs(t_ij.transform_points(nodes[i].points.xyz),
                                 nodes[j].points.xyz, max_corr)
            if len(pairs):
                edges.append(PoseGraphEdge(i, j, t_ij, pairs))
    return edges


def _connected_components(n, edges):
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for e in edges:
        ri, rj = find(e.i), find(e.j)
        if ri != rj:
            parent[ri] = rj
    groups = {}
    for v in range(n):
        groups.setdefault(find(v), []).append(v)
    return list(groups.values())


def pose_graph_objective(nodes, poses, edges) -> float:
    """Sum of squared distances between matched points under the poses."""
    total = 0.0
    for e in edges:
        pi = poses[e.i].transform_points(nodes[e.i].points.xyz[e.pairs[:, 0]])
        pj = poses[e.j].transform_points(nodes[e.j].points.xyz[e.pairs[:, 1]])
        total += float(np.sum((pi - pj) ** 2))
    return total


def _skew_batch(v):
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def optimize_pose_graph(nodes, k=POSE_GRAPH_WINDOW, max_corr=CORRESPONDENCE_RADIUS_M,
                        outer_iterations=10, tol=1e-6, base_index=0,
                        icp_max_iter=50, icp_tol=1e-6):
    """Jointly optimize all node poses on the sparse graph.

    Alternates correspondence re-derivation (first from the ICP edge
    transforms, then from the current poses) with one Gauss-Newton step of
    the summed point-pair objective; each connected component is gauge-fixed
    at the base node (or its first node). Falls back to the identity poses
    if the final objective did not improve.
    """
    if len(nodes) < 2:
        raise PipelineError("insufficient_shapes", "pose graph needs at least 2 nodes")
    edges = build_pose_graph(nodes, k=k, max_corr=max_corr,
                             icp_max_iter=icp_max_iter, icp_tol=icp_tol)
    n = len(nodes)
    identity = [RigidPose.identity() for _ in range(n)]
    if not edges:
        return identity
    fixed = set()
    for comp in _connected_components(n, edges):
        fixed.add(base_index if base_index in comp else min(comp))
    poses = list(identity)
    for it in range(outer_iterations):
        if it > 0:
            refreshed = []
            for e in edges:
                rel = poses[e.j].inverse() @ poses[e.i]
                pairs = _match_pairs(rel.transform_points(nodes[e.i].points.xyz),
                                     nodes[e.j].points.xyz, max_corr)
                if len(pairs):
                    refreshed.append(replace(e, pairs=pairs))
            if not refreshed:
                break
            edges = refreshed
        delta = _solve_one_step(nodes, edges, poses, fixed)
        poses = _apply_increment(poses, delta)
        if np.max(np.abs(delta)) < tol:
            break
    if pose_graph_objective(nodes, poses, edges) > pose_graph_objective(nodes, identity, edges):
        return identity
    return poses


def _solve_one_step(nodes, edges, poses, fixed):
    n = len(nodes)
    dim = 6 * n
    h = np.zeros((dim, dim))
    g = np.zeros(dim)
    for e in edges:
        src = nodes[e.i].points.xyz[e.pairs[:, 0]]
        tgt = nodes[e.j].points.xyz[e.pairs[:, 1]]
        a = src @ poses[e.i].rotation.T
        b = tgt @ poses[e.j].rotation.T
        r = (a + poses[e.i].translation) - (b + poses[e.j].translation)
        ji = np.zeros((len(r), 3, 6))
        jj = np.zeros((len(r), 3, 6))
        ji[:, :, :3] = -_skew_batch(a)
        jj[:, :, :3] = _skew_batch(b)
        ji[:, 0, 3] = ji[:, 1, 4] = ji[:, 2, 5] = 1.0
        jj[:, 0, 3] = jj[:, 1, 4] = jj[:, 2, 5] = -1.0
        si, sj = slice(6 * e.i, 6 * e.i + 6), slice(6 * e.j, 6 * e.j + 6)
        h[si, si] += np.einsum("nab,nac->bc", ji, ji)
        h[sj, sj] += np.einsum("nab,nac->bc", jj, jj)
        cross = np.einsum("nab,nac->bc", ji, jj)
        h[si, sj] += cross
        h[sj, si] += cross.T
        g[si] += np.einsum("nab,na->b", ji, r)
        g[sj] += np.einsum("nab,na->b", jj, r)
    for v in fixed:
        s = slice(6 * v, 6 * v + 6)
        h[s, :] = 0.0
        h[:, s] = 0.0
        h[s, s] = np.eye(6)
        g[s] = 0.0
    h[np.diag_indices(dim)] += 1e-9
    try:
        return np.linalg.solve(h, -g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(h, -g, rcond=None)[0]


def _apply_increment(poses, delta):
    out = []
    for v, pose in enumerate(poses):
        omega = delta[6 * v:6 * v + 3]
        u = delta[6 * v + 3:6 * v + 6]
        rot = Rotation.from_rotvec(omega).as_matrix() @ pose.rotation
        out.append(RigidPose(rot, pose.translation + u))
    return out


# ---------------------------------------------------------------------------
# Quality gating and box correction
# ---------------------------------------------------------------------------

def pose_qualities(nodes, poses):
    """Chamfer-to-neighbors score per node, before (identity) and after."""
    before_clouds = [n.points.xyz for n in nodes]
    after_clouds = [p.transform_points(n.points.xyz) for n, p in zip(nodes, poses)]
    out = []
    for i, node in enumerate(nodes):
        neighbors = [j for j in (i - 1, i + 1) if 0 <= j < len(nodes)]
        q_before = float(np.mean([chamfer(before_clouds[i], before_clouds[j])
                                  for j in neighbors]))
        q_after = float(np.mean([chamfer(after_clouds[i], after_clouds[j])
                                 for j in neighbors]))
        out.append(PoseQuality(node.frame_index, q_before, q_after))
    return out


def gate_and_apply(track: Tracklet, nodes, poses) -> Tracklet:
    """Keep a pose correction only where it improved the neighbor Chamfer
    score; corrected boxes get their center/yaw moved by the inverse pose in
    the canonical box frame, sizes untouched."""
    qualities = pose_qualities(nodes, poses)
    corrections = {}
    for node, pose, quality in zip(nodes, poses, qualities):
        if quality.delta_q > 0.0:
            corrections[node.frame_index] = pose
    entries = []
    for e in track.entries:
        pose = corrections.get(e.frame_index)
        if pose is None:
            entries.append(e)
            continue
        origin_box = Box7(0.0, 0.0, 0.0, e.box.l, e.box.w, e.box.h, 0.0)
        world_from_consensus = to_canonical(e.box).inverse() @ pose.inverse()
        entries.append(replace(e, box=apply_pose(world_from_consensus, origin_box)))
    return replace(track, entries=tuple(entries))


class TrackCoherenceRefiner(BaseEstimator):
    """Driver: size alignment, shape extraction, pose-graph optimization and
    gated application over one track.

    Pedestrian tracks are passed through untouched unless
    ``refine_pedestrians`` is set (non-rigid); tracks with fewer than two
    usable shapes are also returned unchanged.
    """

    def __init__(self, window_k=POSE_GRAPH_WINDOW, max_corr_m=CORRESPONDENCE_RADIUS_M,
                 min_shape_points=MIN_SHAPE_POINTS, height_expand_m=HEIGHT_EXPAND_M,
                 icp_max_iter=50, icp_tol=1e-6, outer_iterations=10,
                 refine_pedestrians=False):
        self.window_k = window_k
        self.max_corr_m = max_corr_m
        self.min_shape_points = min_shape_points
        self.height_expand_m = height_expand_m
        self.icp_max_iter = icp_max_iter
        self.icp_tol = icp_tol
        self.outer_iterations = outer_iterations
        self.refine_pedestrians = refine_pedestrians

    def _crop_counts(self, track, point_frames):
        counts = []
        for e in track.entries:
            pf = point_frames.get(e.frame_index)
            if pf is None or e.origin is not Origin.DETECTED:
                counts.append(-1)
                continue
            world = PointCloud(pf.world_points())
            counts.append(len(crop_points(e.box, (0.0, 0.0, self.height_expand_m), world)))
        return counts

    def pick_base_index(self, track, point_frames) -> int:
        """Default base frame: the Detected entry with the most cropped points."""
        counts = self._crop_counts(track, point_frames)
        best = int(np.argmax(counts))
        if counts[best] < 0:
            raise PipelineError("empty_track", "track has no detected entries")
        return best

    def refine(self, track: Tracklet, point_frames, base_frame=None) -> Tracklet:
        """Returns the coherence-refined track, or the input unchanged when
        the track is skipped (pedestrian or too few shapes)."""
        if track.cls is ObjectClass.PEDESTRIAN and not self.refine_pedestrians:
            return track
        if not isinstance(point_frames, dict):
            point_frames = {pf.frame_index: pf for pf in point_frames}
        if base_frame is not None:
            by_frame = {e.frame_index: i for i, e in enumerate(track.entries)}
            if base_frame not in by_frame:
                raise PipelineError("bad_config",
                                    f"base frame {base_frame} not in track {track.track_id}")
            base_idx = by_frame[base_frame]
        else:
            try:
                base_idx = self.pick_base_index(track, point_frames)
            except PipelineError as err:
                if err.code == "empty_track":
                    return track
                raise
        aligned = align_sizes(track, base_idx)
        try:
            nodes = extract_shapes(aligned, point_frames,
                                   min_points=self.min_shape_points,
                                   height_expand=self.height_expand_m)
        except PipelineError as err:
            if err.code == "insufficient_shapes":
                return track
            raise
        base_frame_index = aligned.entries[base_idx].frame_index
        node_base = next((i for i, n in enumerate(nodes)
                          if n.frame_index == base_frame_index), 0)
        poses = optimize_pose_graph(nodes, k=self.window_k, max_corr=self.max_corr_m,
                                    outer_iterations=self.outer_iterations,
                                    base_index=node_base,
                                    icp_max_iter=self.icp_max_iter, icp_tol=self.icp_tol)
        return gate_and_apply(aligned, nodes, poses)
