//! Small differentiable models with hand-written backward passes.

mod gradcheck;
mod mlp;
mod transformer;

pub use gradcheck::{
    check_mlp, check_transformer, compare_gradients, grad_check, numerical_gradients,
    relative_error, GradCheckReport, ModelKind, TensorCheck, FD_STEP, MAX_CHECK_PARAMS, REL_FLOOR,
};
pub use mlp::{MlpConfig, MlpModel, RegressionBatch};
pub use transformer::{MiniTransformer, TokenBatch, TransformerConfig};

use crate::tensor::Matrix;

/// A model whose parameters are a flat list of named matrices.
///
/// 1-D tensors (norm gains) are stored as `1 × d` matrices; their logical
/// shape is reported by [`Model::param_shapes`].
pub trait Model {
    fn param_names(&self) -> Vec<String>;

    fn param_shapes(&self) -> Vec<Vec<usize>>;

    fn params(&self) -> &[Matrix];

    fn params_mut(&mut self) -> &mut [Matrix];

    /// `(name, logical shape)` pairs in parameter order.
    fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        self.param_names()
            .into_iter()
            .zip(self.param_shapes())
            .collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(Matrix::len).sum()
    }
}

/// `tanh` through a single `exp`; absolute error stays within a few ulps of
/// 1, which is all the forward and backward passes need, at a quarter of the
/// libm cost.
pub fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

/// Loss and one gradient per parameter, in parameter order.
#[derive(Clone, Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Vec<Matrix>,
}
