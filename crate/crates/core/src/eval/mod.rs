//! Distribution and layout-consistency metrics.

mod features;
mod fid;
mod metrics;
mod oracle;
mod report;

pub use features::{extractor, features, pooled, FeatureExtractor, PooledPixels, RandomProjection, DEFAULT_EXTRACTOR, POOL};
pub use fid::{fid, FeatureStats, NEGATIVE_EIGEN_TOL, SHRINKAGE};
pub use metrics::{
    average_precision, det_metrics, map_thresholds, seg_metrics, DetScore, GtBox, ScoredBox, SegAccumulator, SegScore,
};
pub use oracle::{class_masks, oracle_detect, OracleDetection, DEFAULT_TOL, MIN_COMPONENT};
pub use report::{
    derangement, generate_images, layout_consistency_report, report_from_images, schedule_from_meta, score_images,
    Consistency, EvalConfig, EvalReport, CAPTION_NOTE,
};
