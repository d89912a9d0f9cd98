"""Marker-free OCT hand-eye calibration: scan-distortion correction, needle-tip
segmentation in volumes, rigid point-set registration and a synthetic phantom
generator for ground-truth evaluation."""

from .cloud import (
    Cluster,
    LabeledPoint,
    NoNeedleEvidence,
    PointCloud,
    SphereFit,
    cluster_euclidean,
    fit_sphere,
    fit_sphere_ransac,
    load_cloud,
    locate_tip,
    save_cloud,
    segment_needle,
    volume_to_cloud,
    voxel_grid_filter,
)
from .detect import Detection, DetectionError, TipDetector, detect_marker, detect_needle_tip
from .distortion import (
    CircleFit,
    GalvoCorrector,
    GalvoParams,
    calibrate_galvo,
    correct_point,
    correct_points,
    detect_top_surface,
    distort_point,
    distort_points,
    fit_circle,
    load_galvo_params,
    save_galvo_params,
)
from .harness import NoiseSweepResult, RunConfig, TrajectoryRun, noise_sweep, run_trajectory, write_dataset
from .registration import (
    Correspondences,
    DegenerateConfiguration,
    ErrorReport,
    HandEyeCalibrator,
    KalmanTrack,
    RigidTransform,
    apply_transform,
    calib_error,
    kalman_filter_track,
    load_transform,
    report_stats,
    save_transform,
    solve_handeye,
    solve_qt,
    solve_svdt,
)
from .segmentation import (
    ContourGroup,
    EllipseParams,
    LabeledBScan,
    SegmentationParams,
    adaptive_threshold,
    denoise,
    extract_topmost_contours,
    fit_ellipse,
    label_needle_pixels,
    label_volume,
)
from .synth import (
    BallSpec,
    FlatSpec,
    GroundTruth,
    NeedleSpec,
    Scene,
    SynthConfig,
    TissueSpec,
    TrajectorySpec,
    add_noise,
    make_trajectory,
    render_scene,
)
from .volume import ScanGeometry, Volume, load_volume, mm_to_voxel, save_volume, voxel_to_mm

__version__ = "0.1.0"
