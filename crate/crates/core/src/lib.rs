//! Hard-example-mining objectness losses for single-shot grid detectors.
//!
//! The crate is organised bottom-up:
//!
//! * [`loss`]: per-cell cross-entropy, focal and balanced focal kernels with
//!   analytic derivatives.
//! * [`mining`]: per-feature-map loss rank mining (top-B selection per image)
//!   and the combined balanced-focal + rank-mining objectness loss.
//! * [`detector`]: a synthetic imbalanced dataset, grid target assignment, a
//!   small three-scale convolutional detector and a deterministic SGD trainer.
//! * [`eval`]: IoU, frame verdicts, pairwise method comparison and
//!   precision/recall/mAP.
//! * [`cli`]: the `hardmine` command surface and its config file.
//!
//! All numeric code is generic over [`Scalar`]; `f64` aliases are exported at
//! the crate root for the common case.

pub mod cli;
pub mod detector;
pub mod error;
pub mod eval;
pub mod loss;
pub mod mining;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub use error::{Error, Result};

/// Floating point scalar used throughout the crate: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal.
    #[inline]
    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub use detector::{
    audit_gradients, build_targets, generate_dataset, train, AuditReport, DetectorModel, Frame,
    GridSpec, ModelSpec, SceneSpec, TrainConfig, TrainOutcome,
};
pub use eval::{
    average_precision, classify_frame, iou, pair_outcomes, pairwise_report, precision_recall,
    BBox, Detection, FrameOutcome, GroundTruth, MetricsReport, OutcomePair, PairwiseReport,
    Verdict,
};
pub use loss::{balanced_focal_loss, ce_loss, focal_loss, grad_check_cell, CellKernel, CellLoss, LossConfig, LossVariant};
pub use mining::{
    combined_objectness_loss, flatten_per_image, lrm_objectness_loss, select_top_b,
    FeatureMapBatch, ObjectnessLoss, ScaleGrid, SelectionMask,
};

pub type LossConfigF64 = LossConfig<f64>;
pub type LossConfigF32 = LossConfig<f32>;
pub type CellLossF64 = CellLoss<f64>;
pub type CellLossF32 = CellLoss<f32>;
pub type FeatureMapBatchF64 = FeatureMapBatch<f64>;
pub type FeatureMapBatchF32 = FeatureMapBatch<f32>;
pub type ObjectnessLossF64 = ObjectnessLoss<f64>;
pub type DetectorModelF64 = DetectorModel<f64>;
pub type DetectorModelF32 = DetectorModel<f32>;
pub type TrainConfigF64 = TrainConfig<f64>;
pub type BBoxF64 = BBox<f64>;
pub type DetectionF64 = Detection<f64>;
pub type GroundTruthF64 = GroundTruth<f64>;
pub type MetricsReportF64 = MetricsReport<f64>;
