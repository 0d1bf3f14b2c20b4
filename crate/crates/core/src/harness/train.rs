use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    LossAndGrads, MiniTransformer, MlpConfig, MlpModel, Model, TokenBatch, TransformerConfig,
};
use crate::optim::{partition_params, GroupedOptimizer, ParamGroup};
use crate::tensor::{Matrix, Rng};

use super::config::{RunConfig, Task};
use super::data::{load_char_corpus, synthetic_text, CharCorpus, RegressionData, VOCAB_SIZE};
use super::schedule::lr_at;

/// A run is stopped once the training loss exceeds this multiple of its first value.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

pub const TRAIN_CSV: &str = "train.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Seventeen significant digits, enough to round-trip any f64.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Diverged => "diverged",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    /// Number of optimizer updates applied before this evaluation.
    pub step: usize,
    pub eval_loss: f64,
    pub eval_ppl: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub status: RunStatus,
    /// Why a diverged run stopped.
    pub reason: Option<String>,
    pub num_params: usize,
    #[serde(skip)]
    pub steps: Vec<StepRow>,
    #[serde(skip)]
    pub evals: Vec<EvalRow>,
    pub initial_loss: f64,
    pub final_train_loss: f64,
    /// `+inf` for diverged runs.
    pub final_eval_loss: f64,
    pub final_ppl: f64,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn diverged(&self) -> bool {
        self.status == RunStatus::Diverged
    }
}

enum Workload {
    Regression {
        model: MlpModel,
        data: RegressionData,
    },
    CharLm {
        model: MiniTransformer,
        corpus: CharCorpus,
        seq: usize,
        eval_starts: Vec<usize>,
    },
}

impl Workload {
    fn build(cfg: &RunConfig) -> Result<Self> {
        let mut init = Rng::with_stream(cfg.seed, 0);
        match cfg.task {
            Task::SyntheticRegression => {
                let mc = MlpConfig {
                    input_dim: cfg.input_dim,
                    hidden_dim: cfg.hidden_dim,
                    output_dim: cfg.output_dim,
                };
                Ok(Workload::Regression {
                    data: RegressionData::generate(mc, cfg.n_train, cfg.n_eval, cfg.corpus_seed)?,
                    model: MlpModel::new(mc, &mut init),
                })
            }
            Task::CharLm => {
                let corpus = match &cfg.corpus {
                    Some(path) => load_char_corpus(path)?,
                    None => {
                        CharCorpus::from_text(&synthetic_text(cfg.corpus_seed, cfg.corpus_chars))?
                    }
                };
                corpus.check_seq_len(cfg.seq_len)?;
                let tc = TransformerConfig {
                    vocab: VOCAB_SIZE,
                    d_model: cfg.d_model,
                    n_blocks: cfg.n_blocks,
                    max_seq: cfg.max_seq,
                };
                let last = corpus.valid().len() - (cfg.seq_len + 1);
                let n = cfg.eval_windows.min(last + 1);
                let eval_starts = (0..n)
                    .map(|i| if n == 1 { 0 } else { i * last / (n - 1) })
                    .collect();
                Ok(Workload::CharLm {
                    model: MiniTransformer::new(tc, &mut init),
                    corpus,
                    seq: cfg.seq_len,
                    eval_starts,
                })
            }
        }
    }

    fn model(&self) -> &dyn Model {
        match self {
            Workload::Regression { model, .. } => model,
            Workload::CharLm { model, .. } => model,
        }
    }

    fn params_mut(&mut self) -> &mut [Matrix] {
        match self {
            Workload::Regression { model, .. } => model.params_mut(),
            Workload::CharLm { model, .. } => model.params_mut(),
        }
    }

    fn train_batch(&self, rng: &mut Rng, batch_size: usize) -> Result<LossAndGrads> {
        match self {
            Workload::Regression { model, data } => {
                let n = data.train.inputs.rows();
                let idx: Vec<usize> = (0..batch_size).map(|_| rng.below(n)).collect();
                model.forward_backward(&data.sample(&idx))
            }
            Workload::CharLm {
                model, corpus, seq, ..
            } => {
                let train = corpus.train();
                let span = train.len() - seq;
                let windows: Vec<&[usize]> = (0..batch_size)
                    .map(|_| {
                        let s = rng.below(span);
                        &train[s..s + seq + 1]
                    })
                    .collect();
                model.forward_backward(&TokenBatch::from_windows(&windows)?)
            }
        }
    }

    fn eval_loss(&self, batch_size: usize) -> Result<f64> {
        match self {
            Workload::Regression { model, data } => model.loss(&data.eval),
            Workload::CharLm {
                model,
                corpus,
                seq,
                eval_starts,
            } => {
                let valid = corpus.valid();
                let mut total = 0.0;
                for chunk in eval_starts.chunks(batch_size) {
                    let windows: Vec<&[usize]> =
                        chunk.iter().map(|&s| &valid[s..s + seq + 1]).collect();
                    total += model.loss(&TokenBatch::from_windows(&windows)?)? * chunk.len() as f64;
                }
                Ok(total / eval_starts.len() as f64)
            }
        }
    }
}

struct CsvSink(Option<(PathBuf, BufWriter<File>)>);

impl CsvSink {
    fn open(dir: Option<&Path>, name: &str, header: &str) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(CsvSink(None));
        };
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut sink = CsvSink(Some((path, BufWriter::new(file))));
        sink.line(header)?;
        Ok(sink)
    }

    fn line(&mut self, text: &str) -> Result<()> {
        if let Some((path, w)) = &mut self.0 {
            writeln!(w, "{text}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some((path, mut w)) = self.0 {
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Runs one training job. Divergence is reported in the record, not as an error.
pub fn train(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let mut work = Workload::build(cfg)?;
    let specs = work.model().param_specs();
    let num_params = work.model().num_params();
    let groups = partition_params(
        &specs,
        cfg.optimizer,
        &cfg.matrix_config()?,
        &cfg.adamw_config(),
    )?;
    let mut opt = GroupedOptimizer::new(groups, work.model().params())?;
    let schedule = cfg.scheduler_spec();

    let out_dir = cfg.output_dir.as_deref();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut train_csv = CsvSink::open(out_dir, TRAIN_CSV, "step,lr,train_loss")?;
    let mut eval_csv = CsvSink::open(out_dir, EVAL_CSV, "step,eval_loss,eval_ppl")?;

    let mut rng = Rng::with_stream(cfg.seed, 1);
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut reason = None;

    for k in 0..cfg.steps {
        let LossAndGrads { loss, grads } = work.train_batch(&mut rng, cfg.batch_size)?;
        if k == 0 {
            initial_loss = loss;
        }
        let lrs: Vec<f64> = opt
            .groups()
            .iter()
            .map(|g| lr_at(&schedule, g.config.lr, k, cfg.steps))
            .collect::<Result<_>>()?;
        let row = StepRow {
            step: k,
            lr: lrs[0],
            train_loss: loss,
        };
        train_csv.line(&format!(
            "{},{},{}",
            row.step,
            fmt_float(row.lr),
            fmt_float(row.train_loss)
        ))?;
        steps.push(row);
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial_loss {
            reason = Some(format!("training loss {loss} at step {k}"));
            break;
        }
        let group_lr =
            |g: &ParamGroup| lr_at(&schedule, g.config.lr, k, cfg.steps).expect("k < steps");
        match opt.step(work.params_mut(), &grads, group_lr) {
            Ok(()) => {}
            Err(e @ (Error::Numerical { .. } | Error::Degenerate(_))) => {
                reason = Some(format!("optimizer failed at step {k}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        }
        let done = k + 1;
        if (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.steps {
            let eval_loss = work.eval_loss(cfg.batch_size)?;
            let row = EvalRow {
                step: done,
                eval_loss,
                eval_ppl: eval_loss.exp(),
            };
            eval_csv.line(&format!(
                "{},{},{}",
                row.step,
                fmt_float(row.eval_loss),
                fmt_float(row.eval_ppl)
            ))?;
            evals.push(row);
            if !eval_loss.is_finite() {
                reason = Some(format!("evaluation loss {eval_loss} at step {done}"));
                break;
            }
        }
    }
    train_csv.finish()?;
    eval_csv.finish()?;

    let status = if reason.is_some() {
        RunStatus::Diverged
    } else {
        RunStatus::Completed
    };
    let final_eval_loss = match (status, evals.last()) {
        (RunStatus::Completed, Some(e)) => e.eval_loss,
        _ => f64::INFINITY,
    };
    let record = RunRecord {
        config: cfg.clone(),
        status,
        reason,
        num_params,
        initial_loss,
        final_train_loss: steps.last().map_or(f64::NAN, |r| r.train_loss),
        final_eval_loss,
        final_ppl: final_eval_loss.exp(),
        steps,
        evals,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        let path = dir.join(SUMMARY_JSON);
        let json = serde_json::to_string_pretty(&record).expect("record serializes");
        fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;

    fn regression() -> RunConfig {
        RunConfig {
            task: Task::SyntheticRegression,
            optimizer: OptimizerKind::AdamW,
            lr: 0.01,
            adamw_lr: 0.01,
            steps: 200,
            eval_every: 50,
            ..RunConfig::default()
        }
    }

    #[test]
    fn adamw_halves_regression_loss() {
        let rec = train(&regression()).unwrap();
        assert_eq!(rec.status, RunStatus::Completed);
        assert!(
            rec.final_train_loss < 0.5 * rec.initial_loss,
            "{} vs {}",
            rec.final_train_loss,
            rec.initial_loss
        );
        assert_eq!(
            rec.evals.iter().map(|e| e.step).collect::<Vec<_>>(),
            [50, 100, 150, 200]
        );
    }

    #[test]
    fn zero_steps_is_config_error() {
        let cfg = RunConfig {
            steps: 0,
            ..regression()
        };
        assert!(matches!(train(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn huge_lr_is_marked_diverged() {
        let cfg = RunConfig {
            optimizer: OptimizerKind::SgdMomentum,
            lr: 1e6,
            ..regression()
        };
        let rec = train(&cfg).unwrap();
        assert_eq!(rec.status, RunStatus::Diverged);
        assert!(rec.reason.is_some());
        assert_eq!(rec.final_eval_loss, f64::INFINITY);
    }

    #[test]
    fn char_lm_smoke() {
        let cfg = RunConfig {
            d_model: 16,
            n_blocks: 1,
            seq_len: 8,
            corpus_chars: 4000,
            steps: 20,
            batch_size: 4,
            eval_windows: 8,
            direction: crate::norm::NormDirection::ColRow,
            ..RunConfig::default()
        };
        let rec = train(&cfg).unwrap();
        assert_eq!(rec.status, RunStatus::Completed);
        assert!(rec.final_eval_loss < (VOCAB_SIZE as f64).ln() + 1.0);
        assert!((rec.final_ppl / rec.final_eval_loss.exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn float_format_has_seventeen_digits() {
        assert_eq!(fmt_float(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_float(f64::INFINITY), "inf");
    }
}
