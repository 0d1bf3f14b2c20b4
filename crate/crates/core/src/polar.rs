//! Polar factor `Ortho(M) = U Vᵀ`: an exact route through a one-sided Jacobi
//! SVD, and the quintic Newton-Schulz family used inside the optimizers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// One quintic step `X ← aX + b(XXᵀ)X + c(XXᵀ)²X`.
pub type Coefficients = (f64, f64, f64);

/// Classical cubic Newton-Schulz, written in quintic form.
const YOU: &[Coefficients] = &[(1.5, -0.5, 0.0)];

/// Quintic Newton-Schulz with f(1) = 1 and f'(1) = f''(1) = 0. Used as the
/// tail of the tuned schedules so that long runs converge to the polar factor.
const QUINTIC_TAIL: Coefficients = (1.875, -1.25, 0.375);

/// The tuned Muon triple for the first five steps, then the convergent tail.
const JORDAN: &[Coefficients] = &[
    (3.4445, -4.7750, 2.0315),
    (3.4445, -4.7750, 2.0315),
    (3.4445, -4.7750, 2.0315),
    (3.4445, -4.7750, 2.0315),
    (3.4445, -4.7750, 2.0315),
    QUINTIC_TAIL,
];

/// Per-step optimized triples (five steps, safety factor 2e-2, cushion 2),
/// then the convergent tail.
const POLAR_EXPRESS: &[Coefficients] = &[
    (8.156554524902461, -22.48329292557795, 15.878769915207462),
    (4.042929935166739, -2.808917465908714, 0.5000178451051316),
    (3.8916678022926607, -2.772484153217685, 0.5060648178503393),
    (3.285753657755655, -2.3681294933425376, 0.46449024233003106),
    (2.3465413258596377, -1.7097828382687081, 0.42323551169305323),
    QUINTIC_TAIL,
];

/// Relative safety margin on the Frobenius pre-scaling divisor.
const PRESCALE_SAFETY: f64 = 1e-7;

const MAX_JACOBI_SWEEPS: usize = 80;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    You,
    Jordan,
    PolarExpress,
}

impl Schedule {
    pub const ALL: [Schedule; 3] = [Schedule::You, Schedule::Jordan, Schedule::PolarExpress];

    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::You => "you",
            Schedule::Jordan => "jordan",
            Schedule::PolarExpress => "polar_express",
        }
    }

    /// Never empty. Step `i` uses entry `min(i, len - 1)`.
    pub fn coefficients(self) -> &'static [Coefficients] {
        match self {
            Schedule::You => YOU,
            Schedule::Jordan => JORDAN,
            Schedule::PolarExpress => POLAR_EXPRESS,
        }
    }

    pub fn step(self, i: usize) -> Coefficients {
        let list = self.coefficients();
        list[i.min(list.len() - 1)]
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "you" => Ok(Schedule::You),
            "jordan" => Ok(Schedule::Jordan),
            "polar_express" => Ok(Schedule::PolarExpress),
            other => Err(Error::config(format!(
                "unknown coefficient schedule {other:?} (expected you, jordan, polar_express)"
            ))),
        }
    }
}

/// Looks up a schedule by its config name.
pub fn coefficient_schedule(name: &str) -> Result<&'static [Coefficients]> {
    Ok(name.parse::<Schedule>()?.coefficients())
}

/// How `Ortho(M)` is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolarMethod {
    Exact,
    NewtonSchulz {
        schedule: Schedule,
        iterations: usize,
    },
}

impl PolarMethod {
    pub fn newton_schulz(schedule: Schedule, iterations: usize) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::config("Newton-Schulz needs at least one iteration"));
        }
        Ok(PolarMethod::NewtonSchulz {
            schedule,
            iterations,
        })
    }

    /// Five Jordan steps, the setting used throughout training.
    pub fn default_iterative() -> Self {
        PolarMethod::NewtonSchulz {
            schedule: Schedule::Jordan,
            iterations: 5,
        }
    }

    pub fn orthogonalize(&self, m: &Matrix) -> Result<Matrix> {
        match *self {
            PolarMethod::Exact => exact_polar(m),
            PolarMethod::NewtonSchulz {
                schedule,
                iterations,
            } => newton_schulz(m, schedule, iterations),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolarMethod::Exact => "exact",
            PolarMethod::NewtonSchulz { schedule, .. } => schedule.as_str(),
        }
    }
}

impl fmt::Display for PolarMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolarMethod::Exact => f.write_str("exact"),
            PolarMethod::NewtonSchulz {
                schedule,
                iterations,
            } => write!(f, "{schedule}x{iterations}"),
        }
    }
}

/// Thin SVD `A = U diag(s) Vᵀ` with `k = min(m, n)`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (x, s) in us.row_mut(i).iter_mut().zip(&self.s) {
                *x *= s;
            }
        }
        us.matmul_nt(&self.v).expect("thin factors are conformable")
    }
}

/// One-sided (Hestenes) Jacobi SVD for desk-scale matrices.
///
/// Column pairs are rotated until every pair is orthogonal to within
/// `m·ε` relative to the product of their norms. Singular values come back
/// sorted in descending order; left singular vectors for zero singular values
/// are completed to an orthonormal set.
pub fn svd_small(a: &Matrix) -> Result<SvdResult> {
    if a.rows() < a.cols() {
        let t = svd_small(&a.transpose())?;
        return Ok(SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    if a.cols() > 1024 {
        return Err(Error::Range {
            what: "svd_small size",
            detail: format!("min(m, n) = {} exceeds 1024", a.cols()),
        });
    }
    a.ensure_finite("svd_small")?;

    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = m as f64 * f64::EPSILON;

    let mut converged = n == 1;
    let mut residual = 0.0;
    for _sweep in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        residual = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        al += x * x;
                        be += y * y;
                        ga += x * y;
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numerical(
            "svd_small",
            format!(
                "Jacobi did not converge in {MAX_JACOBI_SWEEPS} sweeps; residual {residual:.3e}"
            ),
        ));
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let cutoff = s[0] * m as f64 * f64::EPSILON;
    let mut ucols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            (norms[j] > cutoff && norms[j] > 0.0)
                .then(|| cols[j].iter().map(|x| x / norms[j]).collect())
        })
        .collect();
    complete_orthonormal(&mut ucols, m);

    let u = Matrix::from_fn(m, n, |i, j| ucols[j].as_ref().expect("completed")[i]);
    let v = Matrix::from_fn(n, n, |i, j| vcols[order[j]][i]);
    Ok(SvdResult { u, s, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other column,
/// drawn from the standard basis by Gram-Schmidt.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], m: usize) {
    let mut basis = 0;
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        while basis < m {
            let mut e = vec![0.0; m];
            e[basis] = 1.0;
            basis += 1;
            for _pass in 0..2 {
                for other in cols.iter().flatten() {
                    let dot: f64 = e.iter().zip(other).map(|(a, b)| a * b).sum();
                    e.iter_mut().zip(other).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                e.iter_mut().for_each(|x| *x /= norm);
                cols[slot] = Some(e);
                break;
            }
        }
    }
}

/// `U Vᵀ` from the SVD of `m`. Fails on an exactly-zero input.
pub fn exact_polar(m: &Matrix) -> Result<Matrix> {
    if m.is_zero() {
        return Err(Error::Degenerate("exact_polar"));
    }
    let svd = svd_small(m)?;
    svd.u.matmul_nt(&svd.v)
}

/// Approximate polar factor by `iterations` quintic Newton-Schulz steps.
///
/// Tall inputs are transposed so the Gram product is the smaller square. The
/// input is divided by `‖M‖_F·(1 + 1e-7)`, which puts every singular value in
/// `(0, 1)` and makes the result independent of positive rescaling of `m`.
pub fn newton_schulz(m: &Matrix, schedule: Schedule, iterations: usize) -> Result<Matrix> {
    if iterations == 0 {
        return Err(Error::config("Newton-Schulz needs at least one iteration"));
    }
    if m.is_zero() {
        return Err(Error::Degenerate("newton_schulz"));
    }
    m.ensure_finite("newton_schulz")?;

    let tall = m.rows() > m.cols();
    let mut x = if tall { m.transpose() } else { m.clone() };
    let denom = x.frobenius_norm() * (1.0 + PRESCALE_SAFETY);
    x.scale_in_place(1.0 / denom);

    for i in 0..iterations {
        let (a, b, c) = schedule.step(i);
        let gram = x.matmul_nt(&x)?;
        let mut poly = gram.matmul(&gram)?;
        poly.scale_in_place(c);
        poly.axpy(b, &gram)?;
        let mut next = poly.matmul(&x)?;
        next.axpy(a, &x)?;
        x = next;
        if !x.is_finite() {
            return Err(Error::numerical(
                "newton_schulz",
                format!("non-finite iterate at step {}", i + 1),
            ));
        }
    }
    Ok(if tall { x.transpose() } else { x })
}
