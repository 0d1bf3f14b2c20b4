use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::NormDirection;
use crate::optim::{OptimizerConfig, OptimizerKind, Prefactor};
use crate::polar::{PolarMethod, Schedule};

use super::schedule::{SchedulerKind, SchedulerSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SyntheticRegression,
    CharLm,
}

/// Orthogonalization used by the matrix group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarChoice {
    Exact,
    You,
    Jordan,
    PolarExpress,
}

impl PolarChoice {
    pub fn method(self, iterations: usize) -> Result<PolarMethod> {
        let schedule = match self {
            PolarChoice::Exact => return Ok(PolarMethod::Exact),
            PolarChoice::You => Schedule::You,
            PolarChoice::Jordan => Schedule::Jordan,
            PolarChoice::PolarExpress => Schedule::PolarExpress,
        };
        PolarMethod::newton_schulz(schedule, iterations)
    }
}

/// One training run, read from a flat JSON object. Every key is optional;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,

    /// Text file for `char_lm`; when absent a generated corpus is used.
    pub corpus: Option<PathBuf>,
    pub corpus_chars: usize,
    pub corpus_seed: u64,
    pub d_model: usize,
    pub n_blocks: usize,
    /// Rows of the positional table.
    pub max_seq: usize,
    pub seq_len: usize,
    pub eval_windows: usize,

    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub n_train: usize,
    pub n_eval: usize,

    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,

    /// Optimizer for the hidden matrices.
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub direction: NormDirection,
    pub eps: f64,
    pub polar: PolarChoice,
    pub ns_iters: usize,
    pub prefactor: Prefactor,
    pub normuon_beta2: f64,

    /// Settings for the AdamW group (embeddings, gains, unembedding).
    pub adamw_lr: f64,
    pub adamw_beta1: f64,
    pub adamw_beta2: f64,
    pub adamw_eps: f64,
    pub adamw_weight_decay: f64,

    pub scheduler: SchedulerKind,
    pub warmup_ratio: f64,
    pub stable_ratio: f64,

    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::CharLm,
            corpus: None,
            corpus_chars: 200_000,
            corpus_seed: 0,
            d_model: 64,
            n_blocks: 2,
            max_seq: 128,
            seq_len: 32,
            eval_windows: 64,
            input_dim: 16,
            hidden_dim: 64,
            output_dim: 4,
            n_train: 1024,
            n_eval: 256,
            steps: 2000,
            batch_size: 32,
            seed: 0,
            eval_every: 0,
            optimizer: OptimizerKind::MuonPlus,
            lr: 0.02,
            momentum: 0.95,
            nesterov: false,
            weight_decay: 0.0,
            direction: NormDirection::None,
            eps: 1e-8,
            polar: PolarChoice::Jordan,
            ns_iters: 5,
            prefactor: Prefactor::SqrtRatio,
            normuon_beta2: 0.95,
            adamw_lr: 0.003,
            adamw_beta1: 0.9,
            adamw_beta2: 0.95,
            adamw_eps: 1e-8,
            adamw_weight_decay: 0.0,
            scheduler: SchedulerKind::ConstantThenLinear,
            warmup_ratio: 0.0,
            stable_ratio: 0.4,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("bad run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn scheduler_spec(&self) -> SchedulerSpec {
        SchedulerSpec {
            kind: self.scheduler,
            warmup_ratio: self.warmup_ratio,
            stable_ratio: self.stable_ratio,
        }
    }

    pub fn matrix_config(&self) -> Result<OptimizerConfig> {
        Ok(OptimizerConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            eps: self.eps,
            direction: self.direction,
            polar: self.polar.method(self.ns_iters)?,
            nesterov: self.nesterov,
            prefactor: self.prefactor,
            adam_beta1: self.adamw_beta1,
            adam_beta2: self.adamw_beta2,
            adam_eps: self.adamw_eps,
            normuon_beta2: self.normuon_beta2,
        })
    }

    pub fn adamw_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.adamw_lr,
            weight_decay: self.adamw_weight_decay,
            adam_beta1: self.adamw_beta1,
            adam_beta2: self.adamw_beta2,
            adam_eps: self.adamw_eps,
            ..OptimizerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(msg.to_string()))
            }
        };
        check(self.steps >= 1, "steps must be at least 1")?;
        check(self.batch_size >= 1, "batch_size must be at least 1")?;
        check(
            self.eval_every == 0 || self.steps.is_multiple_of(self.eval_every),
            "eval_every must divide steps (or be 0 for a final-only evaluation)",
        )?;
        check(
            self.direction == NormDirection::None || self.optimizer == OptimizerKind::MuonPlus,
            "a normalization direction requires optimizer muon_plus",
        )?;
        match self.task {
            Task::CharLm => {
                check(
                    self.d_model >= 1 && self.n_blocks >= 1,
                    "d_model and n_blocks must be positive",
                )?;
                check(self.seq_len >= 1, "seq_len must be at least 1")?;
                check(self.seq_len <= self.max_seq, "seq_len exceeds max_seq")?;
                check(self.eval_windows >= 1, "eval_windows must be at least 1")?;
            }
            Task::SyntheticRegression => {
                check(
                    self.input_dim >= 1 && self.hidden_dim >= 1 && self.output_dim >= 1,
                    "regression dimensions must be positive",
                )?;
                check(
                    self.n_train >= 1 && self.n_eval >= 1,
                    "n_train and n_eval must be positive",
                )?;
            }
        }
        self.scheduler_spec().validate()?;
        self.matrix_config()?.validate()?;
        self.adamw_config().validate()
    }
}
