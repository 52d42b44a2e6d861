//! Matching, robust two-view geometry, metrics and evaluation protocols.

pub mod geometry;
pub mod matching;
pub mod metrics;
pub mod protocols;
pub mod ransac;

pub use geometry::{apply_homography, pose_error, CameraIntrinsics, Homography, RelativePose};
pub use matching::{
    dense_argmax, heatmap_pgm, mutual_nn_match, sample_descriptors, similarity_heatmap, write_heatmap_pgm, Match,
    MatchSet,
};
pub use metrics::{mma, pck, pck_correspondences, pose_auc, AUC_THRESHOLDS, MMA_THRESHOLDS, PCK_ALPHAS};
pub use protocols::{
    aggregate_geometric,
    evaluate_geometric, evaluate_matches, evaluate_semantic, evaluate_temporal, GeometricEvalConfig, GeometricReport,
    GroundTruth, NormMode, Report, ScenePair, SemanticEvalConfig, SemanticPair, SemanticReport, TemporalEvalConfig,
    TemporalReport, TemporalSequence, TrackPoint,
};
pub use ransac::{estimate_essential_ransac, PoseEstimate, RansacConfig};
