//! Training loop, schedules, data, sweeps and benchmarks.

mod bench;
mod config;
mod data;
mod schedule;
mod sweep;
mod train;

pub use bench::{bench_csv, polar_bench, BenchRow, BENCH_MIN_RATIO};
pub use config::{PolarChoice, RunConfig, Task};
pub use data::{
    decode_id, encode_byte, load_char_corpus, synthetic_text, tokenize, CharCorpus, RegressionData,
    OOV_ID, VOCAB_SIZE,
};
pub use schedule::{lr_at, SchedulerKind, SchedulerSpec};
pub use sweep::{
    sweep, SeedStat, SweepCell, SweepResult, SweepSpec, BEST_CSV, PIVOT_MEDIAN_CSV, PIVOT_MIN_CSV,
    SWEEP_CSV,
};
pub use train::{
    fmt_float, train, EvalRow, RunRecord, RunStatus, StepRow, DIVERGENCE_FACTOR, EVAL_CSV,
    SUMMARY_JSON, TRAIN_CSV,
};

use crate::error::{Error, Result};

/// Parses `64x256` (also accepts `X` and `×`).
pub fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config(format!("bad shape {s:?} (expected ROWSxCOLS)"));
    let (a, b) = s.split_once(['x', 'X', '×']).ok_or_else(bad)?;
    let m: usize = a.trim().parse().map_err(|_| bad())?;
    let n: usize = b.trim().parse().map_err(|_| bad())?;
    if m == 0 || n == 0 {
        return Err(bad());
    }
    Ok((m, n))
}

/// Parses `1..30` (inclusive), `5` or `1,5,10`.
pub fn parse_iters(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::config(format!("bad iteration list {s:?}"));
    let out: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let lo: usize = a.trim().parse().map_err(|_| bad())?;
        let hi: usize = b
            .trim_start_matches('=')
            .trim()
            .parse()
            .map_err(|_| bad())?;
        (lo..=hi).collect()
    } else {
        s.split(',')
            .map(|t| t.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(bad());
    }
    Ok(out)
}
