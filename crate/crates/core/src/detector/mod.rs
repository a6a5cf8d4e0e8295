//! The toy single-shot grid detector: synthetic data, targets, network,
//! training and inference.

pub mod grid;
pub mod infer;
pub mod model;
pub mod scene;
pub mod store;
pub mod train;

pub use grid::{build_targets, decode_box, encode_box, GridSpec, ScaleTargets};
pub use infer::{detect, detect_all, InferenceConfig};
pub use model::{DetectorModel, ForwardPass, HeadOutput, ModelSpec, HEAD_OUTPUTS};
pub use scene::{generate_dataset, Frame, SceneSpec};
pub use store::{load_model, read_dataset, save_model, write_dataset, Manifest, ModelHeader};
pub use train::{
    audit_gradients, batch_loss, prepare, train, train_from, AuditReport, BatchLoss, EpochStats, Sample,
    TrainConfig, TrainOutcome, AUDIT_FLOOR,
};
