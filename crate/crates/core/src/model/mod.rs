//! Runtime network: gated merges, graph execution, parameter counting,
//! training on synthetic data and checkpoints.

pub mod checkpoint;
pub mod data;
pub mod gate;
pub mod gradcheck;
pub mod params;
pub mod supernet;
pub mod train;

pub use checkpoint::{read_checkpoint, read_trained_checkpoint, write_checkpoint, write_metrics, write_trained_checkpoint};
pub use data::{gen_synthetic_dataset, SyntheticDataset, IMAGE_CHANNELS};
pub use gate::{gate_forward, GateModule, GateOutput};
pub use gradcheck::{gradcheck_model, BlockReport, GradcheckConfig, GradcheckReport};
pub use params::{count_graph_params, BlockSpec, ConvBlock, CountPolicy, ParamCount, ParamId, ParamSet, Session};
pub use supernet::{BranchOutput, ForwardOutput, Inference, ModelConfig, SuperNetModel};
pub use train::{
    argmax_channels, evaluate, miou, ohem_loss, ohem_select, poly_lr, train_toy, windowed_loss, MetricRecord,
    OhemOutput, TrainConfig, TrainReport, IGNORE_INDEX,
};

use crate::netspec::SpecError;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("graph/runtime mismatch: {0}")]
    Graph(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at iteration {iter}: loss {loss}")]
    Divergence { iter: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;
