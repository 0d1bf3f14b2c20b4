use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

use super::{LossAndGrads, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

/// `y = W2 · tanh(W1 · x)`, no biases. Parameters are named like the first
/// MLP block of the transformer so the usual partition rules apply.
#[derive(Clone, Debug)]
pub struct MlpModel {
    config: MlpConfig,
    params: Vec<Matrix>,
}

#[derive(Clone, Debug)]
pub struct RegressionBatch {
    /// `N × input_dim`
    pub inputs: Matrix,
    /// `N × output_dim`
    pub targets: Matrix,
}

const W1: usize = 0;
const W2: usize = 1;

impl MlpModel {
    pub fn new(config: MlpConfig, rng: &mut Rng) -> Self {
        let w1 = rng
            .gaussian_matrix(config.hidden_dim, config.input_dim)
            .scale(1.0 / (config.input_dim as f64).sqrt());
        let w2 = rng
            .gaussian_matrix(config.output_dim, config.hidden_dim)
            .scale(1.0 / (config.hidden_dim as f64).sqrt());
        Self {
            config,
            params: vec![w1, w2],
        }
    }

    pub fn from_weights(w1: Matrix, w2: Matrix) -> Result<Self> {
        if w2.cols() != w1.rows() {
            return Err(Error::Shape {
                op: "MlpModel::from_weights",
                left: w1.shape(),
                right: w2.shape(),
            });
        }
        let config = MlpConfig {
            input_dim: w1.cols(),
            hidden_dim: w1.rows(),
            output_dim: w2.rows(),
        };
        Ok(Self {
            config,
            params: vec![w1, w2],
        })
    }

    pub fn config(&self) -> MlpConfig {
        self.config
    }

    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        let hidden = inputs.matmul_nt(&self.params[W1])?.map(super::tanh);
        hidden.matmul_nt(&self.params[W2])
    }

    fn check_batch(&self, batch: &RegressionBatch) -> Result<()> {
        let ok = batch.inputs.cols() == self.config.input_dim
            && batch.targets.cols() == self.config.output_dim
            && batch.inputs.rows() == batch.targets.rows();
        if ok {
            Ok(())
        } else {
            Err(Error::Shape {
                op: "mlp batch",
                left: batch.inputs.shape(),
                right: batch.targets.shape(),
            })
        }
    }

    /// Mean squared error over all `N × output_dim` entries.
    pub fn loss(&self, batch: &RegressionBatch) -> Result<f64> {
        self.check_batch(batch)?;
        let diff = self.predict(&batch.inputs)?.sub(&batch.targets)?;
        Ok(diff.sum_squares() / diff.len() as f64)
    }

    pub fn forward_backward(&self, batch: &RegressionBatch) -> Result<LossAndGrads> {
        self.check_batch(batch)?;
        let x = &batch.inputs;
        let (w1, w2) = (&self.params[W1], &self.params[W2]);
        let hidden = x.matmul_nt(w1)?.map(super::tanh);
        let out = hidden.matmul_nt(w2)?;
        let diff = out.sub(&batch.targets)?;
        let count = diff.len() as f64;
        let loss = diff.sum_squares() / count;

        let d_out = diff.scale(2.0 / count);
        let d_w2 = d_out.matmul_tn(&hidden)?;
        let d_hidden = d_out.matmul(w2)?;
        let d_pre = d_hidden.zip_map(&hidden, "tanh backward", |d, h| d * (1.0 - h * h))?;
        let d_w1 = d_pre.matmul_tn(x)?;
        Ok(LossAndGrads {
            loss,
            grads: vec![d_w1, d_w2],
        })
    }
}

impl Model for MlpModel {
    fn param_names(&self) -> Vec<String> {
        vec![
            "blocks.0.mlp.up".to_string(),
            "blocks.0.mlp.down".to_string(),
        ]
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params
            .iter()
            .map(|p| vec![p.rows(), p.cols()])
            .collect()
    }

    fn params(&self) -> &[Matrix] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }
}
