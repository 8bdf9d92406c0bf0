//! Evaluation helpers: procedural test scenes, zero-crossing edge maps and
//! their F1 overlap, and scale-invariant PSNR.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sensor::psnr;

/// Piecewise-smooth grayscale image in `[0, 1]`: a soft background ramp
/// under a few dozen overlapping disks and axis-aligned rectangles of
/// random intensity.
pub fn synthetic_scene(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gx, gy) = (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
    let mut img = Array2::from_shape_fn((rows, cols), |(i, j)| {
        0.4 + gx * (j as f64 / cols as f64 - 0.5) + gy * (i as f64 / rows as f64 - 0.5)
    });
    let size = rows.min(cols) as f64;
    let shapes = 12 + (rows * cols) / 2048;
    for _ in 0..shapes {
        let v: f64 = rng.random_range(0.0..1.0);
        let (ci, cj) = (rng.random_range(0.0..rows as f64), rng.random_range(0.0..cols as f64));
        let r = rng.random_range(0.04..0.18) * size;
        if rng.random_bool(0.5) {
            for ((i, j), p) in img.indexed_iter_mut() {
                if (i as f64 - ci).hypot(j as f64 - cj) <= r {
                    *p = v;
                }
            }
        } else {
            let h = r * rng.random_range(0.5..1.5);
            for ((i, j), p) in img.indexed_iter_mut() {
                if (i as f64 - ci).abs() <= h && (j as f64 - cj).abs() <= r {
                    *p = v;
                }
            }
        }
    }
    img
}

/// Pixels where `image` changes sign against its right or lower neighbour
/// with a jump of at least `threshold * max|image|`. The edge is placed on
/// whichever of the two pixels has the smaller magnitude.
pub fn zero_crossings(image: &Array2<f64>, threshold: f64) -> Array2<bool> {
    let (r, c) = image.dim();
    let peak = image.fold(0.0f64, |m, v| m.max(v.abs()));
    let t = threshold * peak;
    let mut out = Array2::from_elem((r, c), false);
    if peak == 0.0 {
        return out;
    }
    for i in 0..r {
        for j in 0..c {
            let a = image[[i, j]];
            for (ni, nj) in [(i, j + 1), (i + 1, j)] {
                if ni >= r || nj >= c {
                    continue;
                }
                let b = image[[ni, nj]];
                if a * b < 0.0 && (a - b).abs() >= t {
                    if a.abs() <= b.abs() {
                        out[[i, j]] = true;
                    } else {
                        out[[ni, nj]] = true;
                    }
                }
            }
        }
    }
    out
}

fn matched(a: &Array2<bool>, b: &Array2<bool>, tol: usize) -> usize {
    let (r, c) = a.dim();
    a.indexed_iter()
        .filter(|(_, &v)| v)
        .filter(|((i, j), _)| {
            let (i0, i1) = (i.saturating_sub(tol), (i + tol).min(r - 1));
            let (j0, j1) = (j.saturating_sub(tol), (j + tol).min(c - 1));
            (i0..=i1).any(|y| (j0..=j1).any(|x| b[[y, x]]))
        })
        .count()
}

/// F1 of two edge maps; an edge pixel counts as matched when the other map
/// has an edge within `tol` pixels (Chebyshev distance).
pub fn edge_f1(predicted: &Array2<bool>, reference: &Array2<bool>, tol: usize) -> Result<f64> {
    if predicted.dim() != reference.dim() {
        return Err(Error::Shape(format!("edge maps {:?} vs {:?}", predicted.dim(), reference.dim())));
    }
    let np = predicted.iter().filter(|&&v| v).count();
    let nr = reference.iter().filter(|&&v| v).count();
    if np == 0 || nr == 0 {
        return Ok(if np == nr { 1.0 } else { 0.0 });
    }
    let precision = matched(predicted, reference, tol) as f64 / np as f64;
    let recall = matched(reference, predicted, tol) as f64 / nr as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// PSNR of `test` against `reference` after the least-squares scale fit
/// `s = <test, reference> / <test, test>` (synthesized filters match their
/// targets only up to scale).
pub fn scaled_psnr(reference: &Array2<f64>, test: &Array2<f64>) -> Result<f64> {
    if reference.dim() != test.dim() {
        return Err(Error::Shape(format!("images {:?} vs {:?}", reference.dim(), test.dim())));
    }
    let tt = Zip::from(test).fold(0.0, |s, v| s + v * v);
    if tt == 0.0 {
        return Err(Error::Domain("test image is identically zero".into()));
    }
    let s = Zip::from(test).and(reference).fold(0.0, |acc, a, b| acc + a * b) / tt;
    Ok(psnr(reference, &(test * s)))
}
