//! Central finite-difference check of the hand-written backward passes.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

use super::{
    MiniTransformer, MlpConfig, MlpModel, Model, RegressionBatch, TokenBatch, TransformerConfig,
};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so entries whose true gradient
/// is essentially zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;
pub const MAX_CHECK_PARAMS: usize = 50_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    Transformer,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Transformer => "transformer",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ModelKind::Mlp),
            "transformer" => Ok(ModelKind::Transformer),
            other => Err(Error::config(format!(
                "unknown model {other:?} (expected mlp or transformer)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            let mark = if t.passed { "ok  " } else { "FAIL" };
            writeln!(
                f,
                "{mark} {:<22} max_rel_error={:.3e}",
                t.name, t.max_rel_error
            )?;
        }
        write!(
            f,
            "{} (max {:.3e}, tol {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error(),
            self.tolerance
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares two gradient lists tensor by tensor. A non-finite entry counts
/// as an infinite error.
pub fn compare_gradients(
    names: &[String],
    analytic: &[Matrix],
    numeric: &[Matrix],
    tolerance: f64,
) -> GradCheckReport {
    assert_eq!(names.len(), analytic.len());
    assert_eq!(names.len(), numeric.len());
    let tensors: Vec<TensorCheck> = names
        .iter()
        .zip(analytic.iter().zip(numeric))
        .map(|(name, (a, n))| {
            let max_rel_error = if a.shape() != n.shape() {
                f64::INFINITY
            } else {
                a.data()
                    .iter()
                    .zip(n.data())
                    .map(|(&x, &y)| {
                        let e = relative_error(x, y);
                        if e.is_nan() {
                            f64::INFINITY
                        } else {
                            e
                        }
                    })
                    .fold(0.0, f64::max)
            };
            TensorCheck {
                name: name.clone(),
                max_rel_error,
                passed: max_rel_error <= tolerance,
            }
        })
        .collect();
    let passed = tensors.iter().all(|t| t.passed);
    GradCheckReport {
        tolerance,
        tensors,
        passed,
    }
}

/// Central differences of `loss` with respect to every parameter entry.
pub fn numerical_gradients<M, F>(model: &M, loss: F) -> Result<Vec<Matrix>>
where
    M: Model + Clone,
    F: Fn(&M) -> Result<f64>,
{
    let mut probe = model.clone();
    let mut grads = Vec::with_capacity(model.params().len());
    for p in 0..model.params().len() {
        let (rows, cols) = model.params()[p].shape();
        let mut g = Matrix::zeros(rows, cols);
        for k in 0..rows * cols {
            let orig = probe.params()[p].data()[k];
            probe.params_mut()[p].data_mut()[k] = orig + FD_STEP;
            let plus = loss(&probe)?;
            probe.params_mut()[p].data_mut()[k] = orig - FD_STEP;
            let minus = loss(&probe)?;
            probe.params_mut()[p].data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * FD_STEP);
        }
        grads.push(g);
    }
    Ok(grads)
}

fn check_budget(n: usize) -> Result<()> {
    if n > MAX_CHECK_PARAMS {
        return Err(Error::config(format!(
            "{n} parameters exceed the finite-difference budget of {MAX_CHECK_PARAMS}"
        )));
    }
    Ok(())
}

pub fn check_mlp(
    model: &MlpModel,
    batch: &RegressionBatch,
    tolerance: f64,
) -> Result<GradCheckReport> {
    check_budget(model.num_params())?;
    let analytic = model.forward_backward(batch)?.grads;
    let numeric = numerical_gradients(model, |m| m.loss(batch))?;
    Ok(compare_gradients(
        &model.param_names(),
        &analytic,
        &numeric,
        tolerance,
    ))
}

pub fn check_transformer(
    model: &MiniTransformer,
    batch: &TokenBatch,
    tolerance: f64,
) -> Result<GradCheckReport> {
    check_budget(model.num_params())?;
    let analytic = model.forward_backward(batch)?.grads;
    let numeric = numerical_gradients(model, |m| m.loss(batch))?;
    Ok(compare_gradients(
        &model.param_names(),
        &analytic,
        &numeric,
        tolerance,
    ))
}

/// Checks a freshly initialized model of the given kind on a random batch.
///
/// The transformer uses `d = 16`, two blocks and a `2 × 4` token batch.
pub fn grad_check(kind: ModelKind, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    match kind {
        ModelKind::Mlp => {
            let cfg = MlpConfig {
                input_dim: 6,
                hidden_dim: 10,
                output_dim: 3,
            };
            let model = MlpModel::new(cfg, &mut rng);
            let batch = RegressionBatch {
                inputs: rng.gaussian_matrix(8, cfg.input_dim),
                targets: rng.gaussian_matrix(8, cfg.output_dim),
            };
            check_mlp(&model, &batch, tolerance)
        }
        ModelKind::Transformer => {
            let cfg = TransformerConfig {
                vocab: 96,
                d_model: 16,
                n_blocks: 2,
                max_seq: 8,
            };
            let model = MiniTransformer::new(cfg, &mut rng);
            let windows: Vec<Vec<usize>> = (0..2)
                .map(|_| (0..5).map(|_| rng.below(cfg.vocab)).collect())
                .collect();
            let refs: Vec<&[usize]> = windows.iter().map(Vec::as_slice).collect();
            let batch = TokenBatch::from_windows(&refs)?;
            check_transformer(&model, &batch, tolerance)
        }
    }
}
