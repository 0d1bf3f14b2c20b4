//! Learning-rate × direction × seed grids.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::norm::NormDirection;
use crate::optim::OptimizerKind;

use super::config::RunConfig;
use super::train::{fmt_float, train, RunStatus};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const PIVOT_MIN_CSV: &str = "pivot_min.csv";
pub const PIVOT_MEDIAN_CSV: &str = "pivot_median.csv";
pub const BEST_CSV: &str = "best_by_direction.csv";

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub base: RunConfig,
    pub lrs: Vec<f64>,
    /// `none` is added in front when missing.
    pub directions: Vec<NormDirection>,
    pub seeds: Vec<u64>,
    /// Worker threads; each run stays single-threaded.
    pub jobs: usize,
}

impl SweepSpec {
    fn normalized_directions(&self) -> Vec<NormDirection> {
        let mut dirs = self.directions.clone();
        if !dirs.contains(&NormDirection::None) {
            dirs.insert(0, NormDirection::None);
        }
        dirs
    }

    /// Config for one grid cell. With a Muon-family base, `none` runs plain
    /// Muon and every other direction runs Muon+.
    pub fn cell_config(&self, lr: f64, direction: NormDirection, seed: u64) -> Result<RunConfig> {
        let optimizer = match self.base.optimizer {
            OptimizerKind::Muon | OptimizerKind::MuonPlus => {
                if direction == NormDirection::None {
                    OptimizerKind::Muon
                } else {
                    OptimizerKind::MuonPlus
                }
            }
            other if direction == NormDirection::None => other,
            other => {
                return Err(Error::config(format!(
                    "direction {direction} needs a muon-family optimizer, not {other}"
                )))
            }
        };
        let cfg = RunConfig {
            lr,
            direction,
            seed,
            optimizer,
            output_dir: None,
            ..self.base.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub lr: f64,
    pub direction: NormDirection,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub final_eval_loss: f64,
    pub final_ppl: f64,
    pub status: RunStatus,
    pub wall_seconds: f64,
}

impl SweepCell {
    /// Final loss with diverged runs counted as `+inf`.
    pub fn score(&self) -> f64 {
        match self.status {
            RunStatus::Completed => self.final_eval_loss,
            RunStatus::Diverged => f64::INFINITY,
        }
    }
}

/// How the seeds of one `(lr, direction)` cell are reduced to a number.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedStat {
    Min,
    Median,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub lrs: Vec<f64>,
    pub directions: Vec<NormDirection>,
    pub seeds: Vec<u64>,
    /// Ordered by lr, then direction, then seed.
    pub cells: Vec<SweepCell>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

impl SweepResult {
    pub fn cell(&self, lr: usize, dir: usize, seed: usize) -> &SweepCell {
        &self.cells[(lr * self.directions.len() + dir) * self.seeds.len() + seed]
    }

    pub fn direction_index(&self, d: NormDirection) -> Option<usize> {
        self.directions.iter().position(|&x| x == d)
    }

    pub fn reduce(&self, lr: usize, dir: usize, stat: SeedStat) -> f64 {
        let scores: Vec<f64> = (0..self.seeds.len())
            .map(|s| self.cell(lr, dir, s).score())
            .collect();
        match stat {
            SeedStat::Min => scores.into_iter().fold(f64::INFINITY, f64::min),
            SeedStat::Median => median(scores),
        }
    }

    /// Rows are learning rates, columns directions.
    pub fn pivot(&self, stat: SeedStat) -> Vec<Vec<f64>> {
        (0..self.lrs.len())
            .map(|l| {
                (0..self.directions.len())
                    .map(|d| self.reduce(l, d, stat))
                    .collect()
            })
            .collect()
    }

    /// Best reduced loss over learning rates, with the lr that achieved it.
    pub fn best_for(&self, dir: usize, stat: SeedStat) -> (f64, f64) {
        (0..self.lrs.len())
            .map(|l| (self.reduce(l, dir, stat), self.lrs[l]))
            .fold(
                (f64::INFINITY, f64::NAN),
                |acc, x| if x.0 < acc.0 { x } else { acc },
            )
    }

    /// Fraction of seeds whose run at `lr` diverged or ended above
    /// `factor ×` the best loss that seed reached over all learning rates.
    pub fn degraded_fraction(&self, dir: usize, lr: usize, factor: f64) -> f64 {
        let bad = (0..self.seeds.len())
            .filter(|&s| {
                let cell = self.cell(lr, dir, s);
                let best = (0..self.lrs.len())
                    .map(|l| self.cell(l, dir, s).score())
                    .fold(f64::INFINITY, f64::min);
                cell.status == RunStatus::Diverged || cell.score() > factor * best
            })
            .count();
        bad as f64 / self.seeds.len() as f64
    }

    pub fn long_csv(&self) -> String {
        let mut out = String::from("lr,direction,seed,final_eval_loss,final_ppl,status\n");
        for c in &self.cells {
            out += &format!(
                "{},{},{},{},{},{}\n",
                fmt_float(c.lr),
                c.direction,
                c.seed,
                fmt_float(c.final_eval_loss),
                fmt_float(c.final_ppl),
                c.status.as_str()
            );
        }
        out
    }

    pub fn pivot_csv(&self, stat: SeedStat) -> String {
        let mut out = String::from("lr");
        for d in &self.directions {
            out += &format!(",{d}");
        }
        out.push('\n');
        for (lr, row) in self.lrs.iter().zip(self.pivot(stat)) {
            out += &fmt_float(*lr);
            for v in row {
                out += &format!(",{}", fmt_float(v));
            }
            out.push('\n');
        }
        out
    }

    pub fn best_csv(&self) -> String {
        let mut out =
            String::from("direction,best_min_loss,best_min_lr,best_median_loss,best_median_lr\n");
        for (i, d) in self.directions.iter().enumerate() {
            let (lmin, rmin) = self.best_for(i, SeedStat::Min);
            let (lmed, rmed) = self.best_for(i, SeedStat::Median);
            out += &format!(
                "{d},{},{},{},{}\n",
                fmt_float(lmin),
                fmt_float(rmin),
                fmt_float(lmed),
                fmt_float(rmed)
            );
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            (SWEEP_CSV, self.long_csv()),
            (PIVOT_MIN_CSV, self.pivot_csv(SeedStat::Min)),
            (PIVOT_MEDIAN_CSV, self.pivot_csv(SeedStat::Median)),
            (BEST_CSV, self.best_csv()),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Runs every grid cell. Diverged runs are recorded; only configuration and
/// I/O errors stop the sweep.
pub fn sweep(spec: &SweepSpec) -> Result<SweepResult> {
    if spec.lrs.is_empty() || spec.seeds.is_empty() {
        return Err(Error::config("sweep grids must be nonempty"));
    }
    if spec.lrs.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
        return Err(Error::config("sweep learning rates must be positive"));
    }
    let directions = spec.normalized_directions();
    let mut configs = Vec::new();
    for &lr in &spec.lrs {
        for &d in &directions {
            for &seed in &spec.seeds {
                configs.push(spec.cell_config(lr, d, seed)?);
            }
        }
    }

    let slots: Mutex<Vec<Option<Result<SweepCell>>>> =
        Mutex::new((0..configs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(cfg) = configs.get(i) else { break };
        let out = train(cfg).map(|rec| SweepCell {
            lr: cfg.lr,
            direction: cfg.direction,
            seed: cfg.seed,
            optimizer: cfg.optimizer,
            final_eval_loss: rec.final_eval_loss,
            final_ppl: rec.final_ppl,
            status: rec.status,
            wall_seconds: rec.wall_seconds,
        });
        slots.lock().expect("no panics while holding the lock")[i] = Some(out);
    };
    let jobs = spec.jobs.clamp(1, configs.len());
    if jobs == 1 {
        worker();
    } else {
        thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    let cells = slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|c| c.expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        lrs: spec.lrs.clone(),
        directions,
        seeds: spec.seeds.clone(),
        cells,
    })
}
