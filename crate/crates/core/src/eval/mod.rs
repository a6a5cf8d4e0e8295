//! Detection evaluation: IoU, frame verdicts, pairwise comparison of two
//! methods, precision/recall/mAP, and the record and report formats.

mod boxes;
pub mod io;
mod metrics;
mod outcome;

pub use boxes::{iou, BBox};
pub use metrics::{average_precision, coco_thresholds, map_50_95, precision_recall, MetricsReport};
pub use outcome::{
    classify_frame, classify_frames, pair_outcomes, pairwise_report, percent_hundredths,
    Detection, FrameOutcome, GroundTruth, OutcomePair, PairRow, PairwiseReport, Thresholds,
    Verdict, TABLE_ROWS,
};
