//! Optimizer step rules and parameter grouping.
//!
//! All matrix optimizers share one skeleton:
//!
//! ```text
//! M_t = μ M_{t-1} + (1 - μ) G_t
//! O_t = post(Ortho(M_t))            // post = identity | Norm_(d) | row scaling
//! W_t = W_{t-1}(1 - ηλ) - η √(m/n) O_t
//! ```
//!
//! Weight decay is decoupled for every kind, including SGD and AdamW. When
//! `M_t` is exactly zero the polar factor is undefined; the orthogonal update
//! is skipped and only the decay is applied.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{apply_norm, NormDirection, DEFAULT_EPS};
use crate::polar::PolarMethod;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Muon,
    MuonPlus,
    #[serde(rename = "normuon")]
    NorMuon,
    #[serde(rename = "adamw")]
    AdamW,
    SgdMomentum,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [
        OptimizerKind::Muon,
        OptimizerKind::MuonPlus,
        OptimizerKind::NorMuon,
        OptimizerKind::AdamW,
        OptimizerKind::SgdMomentum,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Muon => "muon",
            OptimizerKind::MuonPlus => "muon_plus",
            OptimizerKind::NorMuon => "normuon",
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::SgdMomentum => "sgd_momentum",
        }
    }

    /// Kinds that orthogonalize and therefore need 2-D parameters.
    pub fn is_matrix_only(self) -> bool {
        matches!(
            self,
            OptimizerKind::Muon | OptimizerKind::MuonPlus | OptimizerKind::NorMuon
        )
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown optimizer {s:?}")))
    }
}

/// Scale applied to the orthogonalized update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prefactor {
    /// `√(rows / cols)` in storage orientation.
    #[default]
    SqrtRatio,
    None,
}

impl Prefactor {
    pub fn value(self, rows: usize, cols: usize) -> f64 {
        match self {
            Prefactor::SqrtRatio => (rows as f64 / cols as f64).sqrt(),
            Prefactor::None => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Normalization eps, added to the sum of squares.
    pub eps: f64,
    pub direction: NormDirection,
    pub polar: PolarMethod,
    pub nesterov: bool,
    pub prefactor: Prefactor,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub normuon_beta2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.95,
            weight_decay: 0.0,
            eps: DEFAULT_EPS,
            direction: NormDirection::None,
            polar: PolarMethod::default_iterative(),
            nesterov: false,
            prefactor: Prefactor::SqrtRatio,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            normuon_beta2: 0.95,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("invalid optimizer setting: {what}")))
            }
        };
        check(self.lr > 0.0 && self.lr.is_finite(), "lr must be positive")?;
        check(
            (0.0..1.0).contains(&self.momentum),
            "momentum must lie in [0, 1)",
        )?;
        check(self.weight_decay >= 0.0, "weight_decay must be nonnegative")?;
        check(self.eps > 0.0, "eps must be positive")?;
        check(
            (0.0..1.0).contains(&self.adam_beta1),
            "adam_beta1 must lie in [0, 1)",
        )?;
        check(
            (0.0..=1.0).contains(&self.adam_beta2),
            "adam_beta2 must lie in [0, 1]",
        )?;
        check(self.adam_eps > 0.0, "adam_eps must be positive")?;
        check(
            (0.0..=1.0).contains(&self.normuon_beta2),
            "normuon_beta2 must lie in [0, 1]",
        )?;
        Ok(())
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }
}

/// Per-parameter buffers, zero at `step == 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamState {
    /// First moment / momentum, same shape as the parameter.
    pub momentum: Matrix,
    /// Per-row for NorMuon, per-entry for AdamW, empty otherwise.
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl ParamState {
    pub fn new(kind: OptimizerKind, rows: usize, cols: usize) -> Self {
        let second = match kind {
            OptimizerKind::NorMuon => rows,
            OptimizerKind::AdamW => rows * cols,
            _ => 0,
        };
        Self {
            momentum: Matrix::zeros(rows, cols),
            second_moment: vec![0.0; second],
            step: 0,
        }
    }
}

fn check_shapes(w: &Matrix, state: &ParamState, g: &Matrix, op: &'static str) -> Result<()> {
    for other in [g, &state.momentum] {
        if other.shape() != w.shape() {
            return Err(Error::Shape {
                op,
                left: w.shape(),
                right: other.shape(),
            });
        }
    }
    Ok(())
}

/// `M ← μ M + (1 − μ) G`; returns the new `M`.
pub fn momentum_update(state: &mut ParamState, g: &Matrix, mu: f64) -> Result<Matrix> {
    if state.momentum.shape() != g.shape() {
        return Err(Error::Shape {
            op: "momentum_update",
            left: state.momentum.shape(),
            right: g.shape(),
        });
    }
    for (m, &gi) in state.momentum.data_mut().iter_mut().zip(g.data()) {
        *m = mu * *m + (1.0 - mu) * gi;
    }
    Ok(state.momentum.clone())
}

/// Updates the stored EMA and returns the direction to orthogonalize: the new
/// `M`, or `μ M + (1 − μ) G` with Nesterov.
fn momentum_direction(
    state: &mut ParamState,
    g: &Matrix,
    mu: f64,
    nesterov: bool,
) -> Result<Matrix> {
    let m = momentum_update(state, g, mu)?;
    if !nesterov {
        return Ok(m);
    }
    m.zip_map(g, "nesterov", |mi, gi| mu * mi + (1.0 - mu) * gi)
}

fn apply_decay(w: &mut Matrix, cfg: &OptimizerConfig) {
    if cfg.weight_decay != 0.0 {
        w.scale_in_place(1.0 - cfg.lr * cfg.weight_decay);
    }
}

fn orthogonalize_or_skip(m: &Matrix, polar: &PolarMethod) -> Result<Option<Matrix>> {
    match polar.orthogonalize(m) {
        Ok(o) => Ok(Some(o)),
        Err(Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn orthogonal_step(
    w: &mut Matrix,
    state: &mut ParamState,
    g: &Matrix,
    cfg: &OptimizerConfig,
    mu: f64,
    op: &'static str,
    post: impl FnOnce(Matrix, &mut ParamState) -> Matrix,
) -> Result<()> {
    check_shapes(w, state, g, op)?;
    let direction = momentum_direction(state, g, mu, cfg.nesterov)?;
    state.step += 1;
    let update = orthogonalize_or_skip(&direction, &cfg.polar)?.map(|o| post(o, state));
    apply_decay(w, cfg);
    if let Some(o) = update {
        let scale = cfg.lr * cfg.prefactor.value(w.rows(), w.cols());
        w.axpy(-scale, &o)?;
    }
    Ok(())
}

/// Plain Muon; `cfg.direction` is ignored.
pub fn muon_step(
    w: &mut Matrix,
    state: &mut ParamState,
    g: &Matrix,
    cfg: &OptimizerConfig,
) -> Result<()> {
    orthogonal_step(w, state, g, cfg, cfg.momentum, "muon_step", |o, _| o)
}

/// Muon with `Norm_(d)` applied to the orthogonalized momentum.
pub fn muon_plus_step(
    w: &mut Matrix,
    state: &mut ParamState,
    g: &Matrix,
    cfg: &OptimizerConfig,
) -> Result<()> {
    orthogonal_step(w, state, g, cfg, cfg.momentum, "muon_plus_step", |o, _| {
        apply_norm(&o, cfg.direction, cfg.eps)
    })
}

/// Neuron-wise second-moment scaling after orthogonalization.
///
/// `v_i ← β₂ v_i + (1 − β₂) mean_j O_ij²`, bias-corrected, then row `i` is
/// divided by `sqrt(v̂_i + adam_eps)` and the whole matrix is rescaled back to
/// `‖O‖_F`. `adam_beta1` is the momentum coefficient.
pub fn normuon_step(
    w: &mut Matrix,
    state: &mut ParamState,
    g: &Matrix,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if state.second_moment.len() != w.rows() {
        return Err(Error::Shape {
            op: "normuon_step",
            left: w.shape(),
            right: (state.second_moment.len(), 1),
        });
    }
    orthogonal_step(
        w,
        state,
        g,
        cfg,
        cfg.adam_beta1,
        "normuon_step",
        |o, state| normuon_scale(o, state, cfg),
    )
}

fn normuon_scale(o: Matrix, state: &mut ParamState, cfg: &OptimizerConfig) -> Matrix {
    let beta2 = cfg.normuon_beta2;
    let correction = 1.0 - beta2.powi(state.step as i32);
    let target = o.frobenius_norm();
    let cols = o.cols() as f64;
    let mut scaled = o;
    for (i, v) in state.second_moment.iter_mut().enumerate() {
        let row = scaled.row_mut(i);
        let mean_sq = row.iter().map(|x| x * x).sum::<f64>() / cols;
        *v = beta2 * *v + (1.0 - beta2) * mean_sq;
        let v_hat = if correction > 0.0 {
            *v / correction
        } else {
            *v
        };
        let denom = (v_hat + cfg.adam_eps).sqrt();
        row.iter_mut().for_each(|x| *x /= denom);
    }
    let norm = scaled.frobenius_norm();
    if norm > 0.0 {
        scaled.scale_in_place(target / norm);
    }
    scaled
}

/// Bias-corrected Adam with decoupled weight decay.
pub fn adamw_step(
    w: &mut Matrix,
    state: &mut ParamState,
    g: &Matrix,
    cfg: &OptimizerConfig,
) -> Result<()> {
    check_shapes(w, state, g, "adamw_step")?;
    if state.second_moment.len() != w.len() {
        return Err(Error::Shape {
            op: "adamw_step",
            left: w.shape(),
            right: (state.second_moment.len(), 1),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    apply_decay(w, cfg);
    let m = state.momentum.data_mut();
    let v = &mut state.second_moment;
    for (((wi, &gi), mi), vi) in w
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *mi = b1 * *mi + (1.0 - b1) * gi;
        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        let m_hat = *mi / c1;
        let v_hat = if c2 > 0.0 { *vi / c2 } else { *vi };
        *wi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

/// Heavy-ball with the same EMA convention as Muon.
pub fn sgd_momentum_step(
    w: &mut Matrix,
    state: &mut ParamState,
    g: &Matrix,
    cfg: &OptimizerConfig,
) -> Result<()> {
    check_shapes(w, state, g, "sgd_momentum_step")?;
    let direction = momentum_direction(state, g, cfg.momentum, cfg.nesterov)?;
    state.step += 1;
    apply_decay(w, cfg);
    w.axpy(-cfg.lr, &direction)
}

pub fn step(
    kind: OptimizerKind,
    w: &mut Matrix,
    state: &mut ParamState,
    g: &Matrix,
    cfg: &OptimizerConfig,
) -> Result<()> {
    match kind {
        OptimizerKind::Muon => muon_step(w, state, g, cfg),
        OptimizerKind::MuonPlus => muon_plus_step(w, state, g, cfg),
        OptimizerKind::NorMuon => normuon_step(w, state, g, cfg),
        OptimizerKind::AdamW => adamw_step(w, state, g, cfg),
        OptimizerKind::SgdMomentum => sgd_momentum_step(w, state, g, cfg),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub kind: OptimizerKind,
    /// Indices into the model's parameter list.
    pub param_ids: Vec<usize>,
    pub config: OptimizerConfig,
}

/// Which side of the partition a named parameter falls on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// 2-D attention/MLP block weights.
    Hidden,
    /// Embeddings, unembedding, positional table, gains and any 1-D tensor.
    Auxiliary,
}

/// Classifies a parameter by the harness naming convention.
pub fn param_role(name: &str, shape: &[usize]) -> Result<ParamRole> {
    let unknown = || Error::config(format!("unrecognized parameter name {name:?}"));
    match name {
        "embed.tok" | "embed.pos" | "unembed" => return Ok(ParamRole::Auxiliary),
        _ => {}
    }
    let rest = name.strip_prefix("blocks.").ok_or_else(unknown)?;
    let (index, leaf) = rest.split_once('.').ok_or_else(unknown)?;
    if index.is_empty() || !index.bytes().all(|b| b.is_ascii_digit()) {
        return Err(unknown());
    }
    match leaf {
        "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" | "mlp.up" | "mlp.down" => {
            if shape.len() == 2 {
                Ok(ParamRole::Hidden)
            } else {
                Ok(ParamRole::Auxiliary)
            }
        }
        "ln1.gain" | "ln2.gain" => Ok(ParamRole::Auxiliary),
        _ => Err(unknown()),
    }
}

/// Splits parameters into a hidden-matrix group driven by `matrix_kind` and an
/// AdamW group for everything else. Empty groups are omitted.
pub fn partition_params(
    params: &[(String, Vec<usize>)],
    matrix_kind: OptimizerKind,
    matrix_config: &OptimizerConfig,
    adamw_config: &OptimizerConfig,
) -> Result<Vec<ParamGroup>> {
    let mut hidden = Vec::new();
    let mut aux = Vec::new();
    let mut unknown = Vec::new();
    for (id, (name, shape)) in params.iter().enumerate() {
        match param_role(name, shape) {
            Ok(ParamRole::Hidden) => hidden.push(id),
            Ok(ParamRole::Auxiliary) => aux.push(id),
            Err(_) => unknown.push(name.as_str()),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::config(format!(
            "unrecognized parameter names: {}",
            unknown.join(", ")
        )));
    }
    let mut groups = Vec::new();
    if !hidden.is_empty() {
        groups.push(ParamGroup {
            name: "matrix".to_string(),
            kind: matrix_kind,
            param_ids: hidden,
            config: matrix_config.clone(),
        });
    }
    if !aux.is_empty() {
        groups.push(ParamGroup {
            name: "adamw".to_string(),
            kind: OptimizerKind::AdamW,
            param_ids: aux,
            config: adamw_config.clone(),
        });
    }
    Ok(groups)
}

/// Groups plus the per-parameter state they own.
#[derive(Clone, Debug)]
pub struct GroupedOptimizer {
    groups: Vec<ParamGroup>,
    states: Vec<Option<(usize, ParamState)>>,
}

impl GroupedOptimizer {
    pub fn new(groups: Vec<ParamGroup>, params: &[Matrix]) -> Result<Self> {
        let mut states: Vec<Option<(usize, ParamState)>> = vec![None; params.len()];
        for (gi, group) in groups.iter().enumerate() {
            group.config.validate()?;
            for &id in &group.param_ids {
                let p = params.get(id).ok_or_else(|| {
                    Error::config(format!(
                        "group {} references missing parameter {id}",
                        group.name
                    ))
                })?;
                if states[id].is_some() {
                    return Err(Error::config(format!(
                        "parameter {id} assigned to two groups"
                    )));
                }
                states[id] = Some((gi, ParamState::new(group.kind, p.rows(), p.cols())));
            }
        }
        if let Some(id) = states.iter().position(Option::is_none) {
            return Err(Error::config(format!("parameter {id} belongs to no group")));
        }
        Ok(Self { groups, states })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn state(&self, id: usize) -> &ParamState {
        &self.states[id]
            .as_ref()
            .expect("every parameter has state")
            .1
    }

    /// One step for every parameter; `lr_for(group)` supplies the scheduled
    /// learning rate for each group.
    pub fn step(
        &mut self,
        params: &mut [Matrix],
        grads: &[Matrix],
        lr_for: impl Fn(&ParamGroup) -> f64,
    ) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != params.len() {
            return Err(Error::config(
                "parameter/gradient count does not match optimizer",
            ));
        }
        let lrs: Vec<f64> = self.groups.iter().map(&lr_for).collect();
        for (id, (w, g)) in params.iter_mut().zip(grads).enumerate() {
            let (gi, state) = self.states[id].as_mut().expect("every parameter has state");
            let group = &self.groups[*gi];
            let cfg = OptimizerConfig {
                lr: lrs[*gi],
                ..group.config.clone()
            };
            step(group.kind, w, state, g, &cfg)?;
        }
        Ok(())
    }
}
