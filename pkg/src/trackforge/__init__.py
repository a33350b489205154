"""Offline track-centric post-processing for LiDAR 3D object detections.

The pipeline runs over whole recorded sequences: an immortal bidirectional
tracker links per-frame detections, a two-round track-centric assigner
produces training targets, a sample builder packs multi-frame point clouds,
a registration-based coherence optimizer refines poses, and the evaluation
stack scores the result (AP, CLEAR-MOT, failure profile, track life cycle).
A lightweight simulator generates synthetic corpora for end-to-end runs.
"""

from .assignment import (
    AssignmentResult,
    GtTrack,
    ObjectCentricAssigner,
    ProposalLabel,
    TrackAssignment,
    TrackCentricAssigner,
    object_centric_assign,
    residual_decode,
    residual_target,
    soft_target,
    tiou,
    two_round_assign,
)
from .errors import PipelineError
from .evaluation import (
    ClassReport,
    ClearMotResult,
    EvalReport,
    Evaluator,
    InspectionResult,
    LifeCycleResult,
    MotionState,
    average_precision,
    clear_mot,
    inspection,
    life_cycle_analysis,
    motion_state,
    pool_sequences,
)
from .geometry import (
    Box7,
    LabeledBox,
    ObjectClass,
    PointCloud,
    RigidPose,
    apply_pose,
    bev_iou,
    bev_iou_matrix,
    box_corners_bev,
    crop_points,
    iou3d,
    iou3d_matrix,
    normalize_yaw,
    points_in_box,
    to_canonical,
)
from .io import (
    DetectionRecord,
    read_corpus_sequence,
    read_point_frame,
    read_records_jsonl,
    read_samples,
    records_to_gt,
    records_to_sequence,
    records_to_tracks,
    write_corpus_sequence,
    write_point_frame,
    write_records_jsonl,
    write_samples,
)
from .postprocess import TtaVariantTracks, remove_empty, tta_merge
from .registration import TrackCoherenceRefiner, chamfer, icp_p2p, optimize_pose_graph
from .samples import (
    PointFrame,
    Proposal,
    SceneTransform,
    TrackSample,
    TrackSampleBuilder,
    augment,
    build_sample,
    object_crop,
    tta_variants,
)
from .sim import ScenarioConfig, SequenceSimulator, SimResult, default_mix, generate
from .tracking import (
    BidirectionalTracker,
    DetectionFrame,
    Origin,
    SequenceDetections,
    TrackEntry,
    Tracklet,
)
from .validation import keyed_rng

__version__ = "0.1.0"
