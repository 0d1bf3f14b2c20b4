use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use muonlab::harness::{
    bench_csv, parse_iters, parse_shape, polar_bench, sweep, train, RunConfig, SeedStat, SweepSpec,
};
use muonlab::models::{grad_check, ModelKind};
use muonlab::norm::NormDirection;
use muonlab::polar::Schedule;
use muonlab::{Error, Result};

// glibc returns large freed blocks to the OS, so every training step page-faults
// its activations back in
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "muonlab", version, about = "Muon / Muon+ optimizer laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write train.csv, eval.csv and summary.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a learning-rate × direction × seed grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.005, 0.01, 0.02, 0.04, 0.06, 0.08])]
        lrs: Vec<f64>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "none,col,row,col_row,row_col"
        )]
        dirs: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = "sweep_out")]
        out: PathBuf,
    },
    /// Compare Newton–Schulz schedules with the exact polar factor.
    PolarBench {
        #[arg(long, value_delimiter = ',', default_value = "64x64,64x256")]
        shapes: Vec<String>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "you,jordan,polar_express"
        )]
        methods: Vec<String>,
        #[arg(long, default_value = "1..30")]
        iters: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check hand-written gradients against central finite differences.
    GradCheck {
        #[arg(long)]
        model: String,
        #[arg(long)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            let rec = train(&cfg)?;
            println!(
                "status={} steps={} final_train_loss={:.6} final_eval_loss={:.6} final_ppl={:.4} wall={:.2}s",
                rec.status.as_str(),
                rec.steps.len(),
                rec.final_train_loss,
                rec.final_eval_loss,
                rec.final_ppl,
                rec.wall_seconds
            );
            if let Some(reason) = &rec.reason {
                println!("diverged: {reason}");
            }
            Ok(true)
        }
        Command::Sweep {
            config,
            lrs,
            dirs,
            seeds,
            jobs,
            out,
        } => {
            let spec = SweepSpec {
                base: RunConfig::load(&config)?,
                lrs,
                directions: dirs
                    .iter()
                    .map(|d| d.parse())
                    .collect::<Result<Vec<NormDirection>>>()?,
                seeds,
                jobs,
            };
            let res = sweep(&spec)?;
            res.write(&out)?;
            print!("median over seeds\n{}", res.pivot_csv(SeedStat::Median));
            print!("best by direction\n{}", res.best_csv());
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::PolarBench {
            shapes,
            methods,
            iters,
            seed,
            out,
        } => {
            let shapes = shapes
                .iter()
                .map(|s| parse_shape(s))
                .collect::<Result<Vec<_>>>()?;
            let methods = methods
                .iter()
                .map(|m| m.parse())
                .collect::<Result<Vec<Schedule>>>()?;
            let csv = bench_csv(&polar_bench(
                &shapes,
                &methods,
                &parse_iters(&iters)?,
                seed,
            )?);
            match out {
                Some(path) => fs::write(&path, csv).map_err(|e| Error::io(path, e))?,
                None => print!("{csv}"),
            }
            Ok(true)
        }
        Command::GradCheck { model, tol, seed } => {
            let kind: ModelKind = model.parse()?;
            if tol.is_nan() || tol <= 0.0 {
                return Err(Error::config("tolerance must be positive"));
            }
            let report = grad_check(kind, seed, tol)?;
            println!("{report}");
            Ok(report.passed)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        // a failed gradient check is a numerical failure
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
