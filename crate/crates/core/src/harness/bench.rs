//! Accuracy and cost of the Newton–Schulz schedules against the exact polar factor.

use std::time::Instant;

use serde::Serialize;

use crate::error::Result;
use crate::polar::{exact_polar, newton_schulz, svd_small, Schedule};
use crate::tensor::Rng;

use super::train::fmt_float;

/// Inputs have singular values spread over `[0.1, 1] · scale`.
pub const BENCH_MIN_RATIO: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub rows: usize,
    pub cols: usize,
    /// `exact` or a schedule name.
    pub method: String,
    pub iters: usize,
    pub distance: f64,
    pub sv_min: f64,
    pub sv_max: f64,
    pub wall_seconds: f64,
}

/// One well-conditioned input per shape; one row for the exact factor and one
/// per `(schedule, iterations)` pair.
pub fn polar_bench(
    shapes: &[(usize, usize)],
    methods: &[Schedule],
    iters: &[usize],
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for (i, &(m, n)) in shapes.iter().enumerate() {
        let input = Rng::with_stream(seed, i as u64).well_conditioned(m, n, BENCH_MIN_RATIO);
        let t = Instant::now();
        let exact = exact_polar(&input)?;
        let exact_time = t.elapsed().as_secs_f64();
        let mut push =
            |method: String, k: usize, out: &crate::tensor::Matrix, secs: f64| -> Result<()> {
                let s = svd_small(out)?.s;
                rows.push(BenchRow {
                    rows: m,
                    cols: n,
                    method,
                    iters: k,
                    distance: out.frobenius_distance(&exact)?,
                    sv_min: s.iter().copied().fold(f64::INFINITY, f64::min),
                    sv_max: s.iter().copied().fold(0.0, f64::max),
                    wall_seconds: secs,
                });
                Ok(())
            };
        push("exact".to_string(), 0, &exact, exact_time)?;
        for &schedule in methods {
            for &k in iters {
                let t = Instant::now();
                let out = newton_schulz(&input, schedule, k)?;
                let secs = t.elapsed().as_secs_f64();
                push(schedule.to_string(), k, &out, secs)?;
            }
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("rows,cols,method,iters,distance,sv_min,sv_max,wall_seconds\n");
    for r in rows {
        out += &format!(
            "{},{},{},{},{},{},{},{}\n",
            r.rows,
            r.cols,
            r.method,
            r.iters,
            fmt_float(r.distance),
            fmt_float(r.sv_min),
            fmt_float(r.sv_max),
            fmt_float(r.wall_seconds)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_row_and_five_step_rows() {
        let rows = polar_bench(&[(8, 12)], &Schedule::ALL, &[5], 1).unwrap();
        assert_eq!(rows.len(), 1 + Schedule::ALL.len());
        assert_eq!(rows[0].method, "exact");
        assert_eq!(rows[0].distance, 0.0);
        for s in Schedule::ALL {
            assert!(rows.iter().any(|r| r.method == s.as_str() && r.iters == 5));
        }
        assert_eq!(bench_csv(&rows).lines().count(), rows.len() + 1);
    }

    #[test]
    fn jordan_distance_nonincreasing_after_five() {
        let iters: Vec<usize> = (5..=30).collect();
        let rows = polar_bench(&[(16, 16), (16, 48)], &[Schedule::Jordan], &iters, 2).unwrap();
        for shape in rows.chunks(1 + iters.len()) {
            for w in shape[1..].windows(2) {
                assert!(w[1].distance <= w[0].distance + 1e-12, "{:?}", w);
            }
        }
    }
}
