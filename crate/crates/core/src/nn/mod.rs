//! Dense numerical kernel: matrices, MLPs with batch norm, and gradient checking.

mod gradcheck;
mod matrix;
mod mlp;

pub use gradcheck::{finite_diff_check, mse_loss, relative_error, GradCheckReport, GradFailure, LossFn, DEFAULT_STEP};
pub use matrix::Matrix;
pub use mlp::{Activation, BatchNorm, ForwardCache, Layer, LayerGrads, LayerSpec, Mlp, MlpGrads, Mode};
