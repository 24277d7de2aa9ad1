//! Decoder, super-resolution and blind-denoising estimation cascade.

mod pipeline;
mod train;

pub use pipeline::{
    dncnn_forward, dncnn_node, mse, srcnn_forward, srcnn_node, DncnnSpec, EstimatorPipeline,
    PipelineSpec, SrcnnSpec, RESIDUAL_INIT_SCALE,
};
pub use train::{pipeline_loss, train_end_to_end};

pub type Pipeline32 = EstimatorPipeline<f32>;
pub type Pipeline64 = EstimatorPipeline<f64>;
