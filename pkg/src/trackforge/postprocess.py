"""Final cleanup of refined tracks: empty-box removal and merging of
test-time-augmentation variants.

Variant track sets are assumed to be expressed in the original scene frame
already (each variant's inverse transform applied upstream), so entries for
the same (track_id, frame_index) describe the same physical object and can
be averaged directly.
"""

from dataclasses import dataclass

import numpy as np

from .errors import PipelineError
from .geometry import Box7, crop_points, normalize_yaw
from .tracking import TrackEntry, Tracklet

__all__ = ["TtaVariantTracks", "remove_empty", "tta_merge"]


@dataclass(frozen=True)
class TtaVariantTracks:
    """One refined track set per augmentation variant, keyed by tag."""

    variants: tuple

    def __post_init__(self):
        variants = tuple((str(tag), tuple(tracks)) for tag, tracks in self.variants)
        if not variants:
            raise PipelineError("bad_config", "tta_merge needs at least one variant")
        tags = [tag for tag, _ in variants]
        if len(set(tags)) != len(tags):
            raise PipelineError("bad_config", f"duplicate variant tags: {sorted(tags)}")
        object.__setattr__(self, "variants", variants)

    @property
    def tags(self):
        return tuple(tag for tag, _ in self.variants)


def _frame_map(point_frames):
    if isinstance(point_frames, dict):
        return point_frames
    return {pf.frame_index: pf for pf in point_frames}


def remove_empty(tracks, point_frames):
    """Drops track entries whose raw (un-expanded) box contains no points in
    its frame, then drops tracks with no entries left.

    Frames absent from ``point_frames`` cannot be judged and their entries
    are kept.
    """
    frames = _frame_map(point_frames)
    world_cache = {}
    kept_tracks = []
    for track in tracks:
        kept = []
        for entry in track.entries:
            pf = frames.get(entry.frame_index)
            if pf is None:
                kept.append(entry)
                continue
            if entry.frame_index not in world_cache:
                world_cache[entry.frame_index] = pf.cloud.transformed(pf.ego_pose)
            world = world_cache[entry.frame_index]
            if len(crop_points(entry.box, (0.0, 0.0, 0.0), world)) > 0:
                kept.append(entry)
        if kept:
            kept_tracks.append(Tracklet(track.track_id, track.cls, tuple(kept)))
    return kept_tracks


def _merge_entries(contribs):
    """Merges per-variant entries for one (track, frame).

    ``contribs`` is a list of (tag, TrackEntry), at least one element.
    """
    # Canonical ordering keeps the result independent of variant order.
    contribs = sorted(contribs, key=lambda c: (-c[1].score, c[0]))
    anchor = contribs[0][1]
    if all(c[1] == anchor for c in contribs[1:]):
        return anchor

    boxes = [c[1].box for c in contribs]
    scores = np.array([c[1].score for c in contribs])
    weights = scores / scores.sum() if scores.sum() > 0 else np.full(len(scores), 1.0 / len(scores))

    centers = np.array([b.center for b in boxes])
    sizes = np.array([[b.l, b.w, b.h] for b in boxes])
    center = weights @ centers
    size = weights @ sizes

    # Headings: unwrap into the anchor's neighborhood, flipping by pi when a
    # variant reports the opposite hemisphere, then take the median. If the
    # anchor itself was the flipped outlier (most contributions needed the
    # correction), snap the result back to the majority hemisphere.
    deltas = []
    flips = 0
    for b in boxes:
        d = normalize_yaw(b.yaw - anchor.box.yaw)
        if abs(d) > np.pi / 2:
            d = normalize_yaw(d + np.pi)
            flips += 1
        deltas.append(d)
    yaw = anchor.box.yaw + float(np.median(deltas))
    if 2 * flips > len(boxes):
        yaw += np.pi
    yaw = normalize_yaw(yaw)

    merged_box = Box7(center[0], center[1], center[2], size[0], size[1], size[2], yaw)
    return TrackEntry(anchor.frame_index, merged_box, float(np.mean(scores)), anchor.origin)


def tta_merge(variants):
    """Merges per-variant track sets into one: score-weighted mean of center
    and size, hemisphere-normalized majority-side median heading, mean score.
    Frames are merged over the union of per-variant supports.
    """
    if not isinstance(variants, TtaVariantTracks):
        variants = TtaVariantTracks(tuple(variants))

    by_track = {}
    classes = {}
    for tag, tracks in variants.variants:
        for track in tracks:
            if classes.setdefault(track.track_id, track.cls) is not track.cls:
                raise PipelineError(
                    "schema_error",
                    f"track {track.track_id} has conflicting classes across variants")
            frames = by_track.setdefault(track.track_id, {})
            for entry in track.entries:
                frames.setdefault(entry.frame_index, []).append((tag, entry))

    merged = []
    for track_id in sorted(by_track):
        entries = tuple(_merge_entries(by_track[track_id][f])
                        for f in sorted(by_track[track_id]))
        merged.append(Tracklet(track_id, classes[track_id], entries))
    return merged
