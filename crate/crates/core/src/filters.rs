//! Target kernel generators: Gaussian directional derivatives, Laplacian of
//! Gaussian, and depth-indexed orientation schedules.
//!
//! Kernel coordinates are sensor pixels with `x` along columns and `y` along
//! rows, origin at the centre sample.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    GaussianDerivative,
    LaplacianOfGaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub sigma: f64,
    pub order: u32,
    pub theta: f64,
    pub support: usize,
}

pub const DEFAULT_DERIVATIVE_SIGMA: f64 = 4.0;
pub const DEFAULT_LOG_SIGMA: f64 = 2.0;

/// Smallest odd integer `>= 6 sigma`.
pub fn min_support(sigma: f64) -> usize {
    let s = (6.0 * sigma - 1e-9).ceil().max(1.0) as usize;
    if s % 2 == 0 {
        s + 1
    } else {
        s
    }
}

impl KernelSpec {
    pub fn derivative(sigma: f64, order: u32, theta: f64) -> Self {
        Self { family: KernelFamily::GaussianDerivative, sigma, order, theta, support: min_support(sigma) }
    }

    pub fn log(sigma: f64) -> Self {
        Self { family: KernelFamily::LaplacianOfGaussian, sigma, order: 2, theta: 0.0, support: min_support(sigma) }
    }

    pub fn with_theta(self, theta: f64) -> Self {
        Self { theta, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Domain(format!("kernel sigma {} must be positive", self.sigma)));
        }
        if self.order == 0 {
            return Err(Error::Domain("derivative order must be at least 1".into()));
        }
        if self.support % 2 == 0 || self.support < min_support(self.sigma) {
            return Err(Error::Domain(format!(
                "kernel support {} must be odd and at least {}",
                self.support,
                min_support(self.sigma)
            )));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Array2<f64>> {
        match self.family {
            KernelFamily::GaussianDerivative => gaussian_derivative_kernel(self),
            KernelFamily::LaplacianOfGaussian => log_kernel(self.sigma, self.support),
        }
    }
}

fn gaussian(support: usize, sigma: f64) -> Array2<f64> {
    let c = (support / 2) as f64;
    let norm = 1.0 / (2.0 * PI * sigma * sigma);
    Array2::from_shape_fn((support, support), |(i, j)| {
        let (x, y) = (j as f64 - c, i as f64 - c);
        norm * (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
    })
}

/// Probabilists' Hermite polynomial `He_n`.
fn hermite(n: u32, t: f64) -> f64 {
    let (mut a, mut b) = (1.0, t);
    if n == 0 {
        return a;
    }
    for k in 1..n {
        let next = t * b - k as f64 * a;
        a = b;
        b = next;
    }
    b
}

/// `d^n/dt^n` of a unit-mass Gaussian along `t = x cos(theta) + y sin(theta)`.
/// Even orders are made zero-mean by subtracting a multiple of the Gaussian.
pub fn gaussian_derivative_kernel(spec: &KernelSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    let (s, n) = (spec.sigma, spec.order);
    let c = (spec.support / 2) as f64;
    let (ct, st) = (spec.theta.cos(), spec.theta.sin());
    let g = gaussian(spec.support, s);
    let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
    let scale = sign / s.powi(n as i32);
    let mut k = Array2::from_shape_fn(g.dim(), |(i, j)| {
        let t = (j as f64 - c) * ct + (i as f64 - c) * st;
        scale * hermite(n, t / s) * g[[i, j]]
    });
    if n % 2 == 0 {
        dc_correct(&mut k, &g);
    }
    Ok(k)
}

/// Sampled `laplacian(G)`, with the sampled DC removed.
pub fn log_kernel(sigma: f64, support: usize) -> Result<Array2<f64>> {
    KernelSpec { family: KernelFamily::LaplacianOfGaussian, sigma, order: 2, theta: 0.0, support }.validate()?;
    let c = (support / 2) as f64;
    let g = gaussian(support, sigma);
    let s2 = sigma * sigma;
    let mut k = Array2::from_shape_fn(g.dim(), |(i, j)| {
        let (x, y) = (j as f64 - c, i as f64 - c);
        (x * x + y * y - 2.0 * s2) / (s2 * s2) * g[[i, j]]
    });
    dc_correct(&mut k, &g);
    Ok(k)
}

fn dc_correct(k: &mut Array2<f64>, g: &Array2<f64>) {
    let c = k.sum() / g.sum();
    k.zip_mut_with(g, |a, b| *a -= c * b);
}

/// Place `kernel` centred in a `rows x cols` zero array (centre at `(rows/2, cols/2)`).
pub fn embed(kernel: &Array2<f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let (kr, kc) = kernel.dim();
    if kr > rows || kc > cols {
        return Err(Error::Shape(format!("kernel {kr}x{kc} does not fit in {rows}x{cols}")));
    }
    let mut out = Array2::zeros((rows, cols));
    let (r0, c0) = (rows / 2 - kr / 2, cols / 2 - kc / 2);
    out.slice_mut(ndarray::s![r0..r0 + kr, c0..c0 + kc]).assign(kernel);
    Ok(out)
}

/// Real target kernels, one per batch slice (depth or wavelength).
#[derive(Clone, Debug, PartialEq)]
pub struct TargetFilter {
    pub name: String,
    pub slices: Vec<Array2<f64>>,
}

impl TargetFilter {
    pub fn new(name: &str, slices: Vec<Array2<f64>>) -> Result<Self> {
        let Some(first) = slices.first() else {
            return Err(Error::Domain("target filter has no slices".into()));
        };
        let dim = first.dim();
        for (b, s) in slices.iter().enumerate() {
            if s.dim() != dim {
                return Err(Error::Shape(format!("slice {b} is {:?}, expected {dim:?}", s.dim())));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("slice {b} has non-finite values")));
            }
            if s.iter().all(|&v| v == 0.0) {
                return Err(Error::Domain(format!("slice {b} is identically zero")));
            }
        }
        Ok(Self { name: name.to_string(), slices })
    }

    /// Same kernel replicated over `batch` slices.
    pub fn replicated(name: &str, kernel: Array2<f64>, batch: usize) -> Result<Self> {
        Self::new(name, vec![kernel; batch])
    }

    pub fn batch(&self) -> usize {
        self.slices.len()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.slices[0].dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSchedule {
    pub z_min: f64,
    pub z_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub samples: usize,
}

impl DepthSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_min > 0.0 && self.z_min < self.z_max) {
            return Err(Error::Domain(format!("depth range [{}, {}] is degenerate", self.z_min, self.z_max)));
        }
        if self.samples < 2 {
            return Err(Error::Domain("depth schedule needs at least 2 samples".into()));
        }
        Ok(())
    }

    pub fn depths(&self) -> Vec<f64> {
        let n = self.samples - 1;
        (0..self.samples).map(|i| self.z_min + (self.z_max - self.z_min) * i as f64 / n as f64).collect()
    }

    pub fn theta(&self, z: f64) -> f64 {
        self.theta_min + (self.theta_max - self.theta_min) * (z - self.z_min) / (self.z_max - self.z_min)
    }
}

/// One rotated derivative kernel per scheduled depth, embedded in a
/// `rows x cols` region.
pub fn depth_orientation_targets(
    schedule: &DepthSchedule,
    spec: &KernelSpec,
    rows: usize,
    cols: usize,
) -> Result<TargetFilter> {
    schedule.validate()?;
    let slices = schedule
        .depths()
        .iter()
        .map(|&z| embed(&gaussian_derivative_kernel(&spec.with_theta(schedule.theta(z)))?, rows, cols))
        .collect::<Result<Vec<_>>>()?;
    TargetFilter::new("depth_orientation", slices)
}

/// Orientation of a signed odd kernel from its first moment: the direction
/// the kernel "points" from its positive to its negative lobe, reported so
/// that a first-derivative kernel built with angle `theta` returns `theta`.
pub fn dipole_orientation(kernel: &Array2<f64>) -> f64 {
    let (r, c) = kernel.dim();
    let (cy, cx) = ((r / 2) as f64, (c / 2) as f64);
    let (mut mx, mut my) = (0.0, 0.0);
    for ((i, j), &v) in kernel.indexed_iter() {
        mx += v * (j as f64 - cx);
        my += v * (i as f64 - cy);
    }
    (-my).atan2(-mx)
}

/// Absolute angular difference modulo pi, in `[0, pi/2]`.
pub fn angle_diff_mod_pi(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}
