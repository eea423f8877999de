//! Synthetic grounded QA, the language + Dice + BCE objective, exact gradients
//! for the glimpse rows and the predictor, and the AdamW loop.

mod data;
mod forward;
mod loss;
mod optim;
pub mod tape;
mod train;

pub use data::{generate_dataset, generate_sample, GroundedSample, PatchBox, PALETTE};
pub use forward::{finite_difference_check, grad, total_loss, ForwardOutput};
pub use loss::{bce_loss, dice_loss, lang_loss, LossBreakdown, LossWeights, DICE_EPS};
pub use optim::{lr_at, AdamW, AdamWConfig, Schedule};
pub use train::{evaluate, foreground_recall, iou, train, EvalMetrics, StepMetrics, TrainConfig, TrainOutcome};
