//! A small from-scratch tensor engine and the residual network trained on
//! it. Everything is generic over the float type: training runs in `f32`,
//! gradient checks in `f64`.

mod checkpoint;
mod model;
pub mod ops;
mod optim;
mod tensor;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use model::{
    Block, BlockCache, Conv, Model, ModelCache, ModelConfig, BLOCKS_PER_STAGE, DOWNSAMPLING, LAYERS_PER_BLOCK,
    NUM_BLOCKS, STRIDE2_BLOCKS,
};
pub use ops::PoolMode;
pub use optim::{Adam, PlateauScheduler};
pub use tensor::Tensor;
pub use train::{
    evaluate, fit, fit_prepared, predict, prepare, probabilities, threshold_labels, write_log, EpochLog, Prepared,
    TrainConfig, TrainOutput,
};

use std::fmt::Debug;
use std::ops::AddAssign;

/// Float types the engine runs on.
pub trait Scalar: num_traits::Float + AddAssign + Default + Debug + Send + Sync + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("batchnorm evaluated before any training update")]
    UninitializedStats,
    #[error("non-finite loss ({0})")]
    NonFiniteLoss(f64),
    #[error("non-finite activations in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("empty {0} set")]
    EmptyData(&'static str),
    #[error("I/O on {path}: {message}")]
    Io { path: String, message: String },
    #[error("preprocessing failed: {0}")]
    Preprocess(String),
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: Tensor<F>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(F::zero());
    }
}
