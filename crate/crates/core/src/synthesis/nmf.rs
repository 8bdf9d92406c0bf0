use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `F ~ H A` with `H >= 0`.
#[derive(Clone, Debug)]
pub struct SemiNmf {
    /// `[N x k]`, non-negative.
    pub h: Array2<f64>,
    /// `[k x I]`.
    pub a: Array2<f64>,
    /// Frobenius residual after every iteration.
    pub residuals: Vec<f64>,
}

const MAX_RESTARTS: u64 = 5;

/// Physics-free factorization of target filters (columns of `f`) into `k`
/// non-negative "PSFs" and mixed-sign weights.
///
/// Alternates the least-squares weight update with the multiplicative
/// update `H <- H o sqrt(((F A^T)+ + H (A A^T)-) / ((F A^T)- + H (A A^T)+))`.
/// `H` starts from the positive and negative parts of the targets, padded
/// with seeded random columns.
pub fn semi_nmf_baseline(f: &Array2<f64>, k: usize, iterations: usize, seed: u64) -> Result<SemiNmf> {
    let (n, i) = f.dim();
    if k == 0 || n == 0 || i == 0 {
        return Err(Error::Config("semi-NMF needs a non-empty target matrix and k > 0".into()));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("targets must be finite".into()));
    }
    let fm = DMatrix::from_fn(n, i, |r, c| f[[r, c]]);
    for attempt in 0..MAX_RESTARTS {
        if let Some(out) = run(&fm, k, iterations, seed.wrapping_add(attempt), attempt > 0) {
            return Ok(out);
        }
    }
    Err(Error::Numerical("semi-NMF lost rank on every restart".into()))
}

fn initial_h(f: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng, random_only: bool) -> DMatrix<f64> {
    let n = f.nrows();
    let scale = f.amax().max(1e-300);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    if !random_only {
        for c in 0..f.ncols() {
            for sign in [1.0, -1.0] {
                let part: Vec<f64> = f.column(c).iter().map(|v| (sign * v).max(0.0)).collect();
                if part.iter().any(|&v| v > 0.0) && cols.len() < k {
                    cols.push(part);
                }
            }
        }
    }
    while cols.len() < k {
        cols.push((0..n).map(|_| rng.random_range(0.0..scale)).collect());
    }
    DMatrix::from_fn(n, k, |r, c| cols[c][r])
}

fn run(f: &DMatrix<f64>, k: usize, iterations: usize, seed: u64, random_only: bool) -> Option<SemiNmf> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = initial_h(f, k, &mut rng, random_only);
    let solve_a = |h: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let hth = h.transpose() * h;
        let hi = hth.clone().symmetric_eigenvalues().max();
        if !(hi > 0.0) {
            return None;
        }
        // Partial rank loss still has a minimum-norm least-squares A.
        let pinv = hth.pseudo_inverse(1e-12 * hi).ok()?;
        Some(pinv * h.transpose() * f)
    };
    let mut a = solve_a(&h)?;
    let mut residuals = Vec::with_capacity(iterations + 1);
    residuals.push((f - &h * &a).norm());
    for _ in 0..iterations {
        let fa = f * a.transpose();
        let aa = &a * a.transpose();
        let (aa_p, aa_n) = (aa.map(|v| v.max(0.0)), aa.map(|v| (-v).max(0.0)));
        let num = fa.map(|v| v.max(0.0)) + &h * &aa_n;
        let den = fa.map(|v| (-v).max(0.0)) + &h * &aa_p;
        for r in 0..h.nrows() {
            for c in 0..k {
                let d = den[(r, c)];
                if d > 0.0 {
                    h[(r, c)] *= (num[(r, c)] / d).sqrt();
                }
            }
        }
        if h.iter().any(|v| !v.is_finite()) {
            return None;
        }
        a = solve_a(&h)?;
        residuals.push((f - &h * &a).norm());
    }
    Some(SemiNmf {
        h: Array2::from_shape_fn((h.nrows(), k), |(r, c)| h[(r, c)]),
        a: Array2::from_shape_fn((k, f.ncols()), |(r, c)| a[(r, c)]),
        residuals,
    })
}
