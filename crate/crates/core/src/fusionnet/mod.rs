//! Toy feature pyramid with learned fusion weights on the top-down path,
//! trained by hand-written backpropagation in double precision.

mod conv;
mod data;
mod model;
mod sweep;
mod tensor;
mod train;

pub use conv::{ConvGrad, ConvLayer};
pub use data::{
    build_targets, decode, evaluate, ground_truth, level_for, predict, samples_from_frames, LevelTargets, Sample,
    DEFAULT_MIN_CONFIDENCE,
};
pub use model::{
    level_loss, Backbone, BackboneTrace, BottomUp, BottomUpTrace, Checkpoint, FusionCoefficients, FusionMode, Heads,
    LayerRecord, ParamGroup, TopDown, TopDownTrace, ToyModel, Trace, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
    HEAD_CHANNELS, INPUT_CHANNELS, INPUT_SIZE, LEVEL_STRIDES,
};
pub use sweep::{alpha_sweep, SweepCell, SweepConfig, SweepReport, DEFAULT_SWEEP_VALUES, FULL_SCALE_REFERENCE_ALPHA};
pub use tensor::{concat, sigmoid, silu, silu_grad, split, upsample2x, upsample2x_adjoint, FeatureMap};
pub use train::{
    descend_with_backoff, grad_check, relative_error, train, train_step, GradCheckReport, GradCheckable, StepOptions,
    TrainConfig, TrainLog, DEFAULT_GRAD_CHECK_EPSILON, GRAD_CHECK_FLOOR,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, FusionError>;
