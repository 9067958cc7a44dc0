//! Toy segment-then-classify student, synthetic data, training and
//! open-vocabulary inference.

mod data;
mod infer;
mod model;
mod train;

pub use data::{
    batches_from_bytes, batches_to_bytes, read_batches, write_batches, Dataset, RegionBatch,
    WorldConfig,
};
pub use infer::{class_logits, class_scores, fuse, gt_label_map, segment_then_classify};
pub use model::{Forward, ModelDims, ModelGrad, StudentModel};
pub use train::{calibration_gap, objective, train_step, LrSchedule, TrainConfig, TrainContext};
