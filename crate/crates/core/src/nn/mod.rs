//! Layers, losses, initializers and optimizers built on [`crate::autodiff`].

mod init;
mod layers;
mod loss;
mod lstm;
mod optim;

pub use init::{fan_in_uniform, zeros_param, RELU_GAIN};
pub use layers::{
    activation, concat_cols, conv2d, conv2d_transposed, global_mean_pool, linear, pool2d,
    slice_cols, Activation, ConvSpec, PoolKind,
};
pub use loss::{
    argmax_rows, cross_entropy_loss, log_softmax, mse_loss, softmax, squared_error, Reduction,
};
pub use lstm::{lstm_step, LstmParams};
pub use optim::{Optimizer, OptimizerConfig};

#[cfg(test)]
mod tests;
