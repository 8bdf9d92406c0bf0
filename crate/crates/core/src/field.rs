//! Scalar complex fields and single-step Fresnel propagation.
//!
//! Grid convention: sample `j` along an axis of `n` samples sits at
//! `(j - n/2) * pitch` (integer division), so every grid contains the optical
//! axis. Arrays are indexed `[row, col] = [y, x]`.

use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{Direction, Fft2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    Optic,
    Sensor,
}

/// Rectangular sampling grid centred on the optical axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub pitch: f64,
}

impl GridSpec {
    pub fn square(n: usize, pitch: f64) -> Self {
        Self { rows: n, cols: n, pitch }
    }

    pub fn x(&self, col: usize) -> f64 {
        (col as f64 - (self.cols / 2) as f64) * self.pitch
    }

    pub fn y(&self, row: usize) -> f64 {
        (row as f64 - (self.rows / 2) as f64) * self.pitch
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::Domain(format!("grid {}x{} is smaller than 2x2", self.rows, self.cols)));
        }
        if !(self.pitch > 0.0 && self.pitch.is_finite()) {
            return Err(Error::Domain(format!("grid pitch {} must be positive", self.pitch)));
        }
        Ok(())
    }

    /// Largest |x| or |y| on the grid.
    pub fn max_abs_coord(&self) -> f64 {
        let c = (self.cols / 2) as f64;
        let r = (self.rows / 2) as f64;
        let xm = c.max(self.cols as f64 - 1.0 - c);
        let ym = r.max(self.rows as f64 - 1.0 - r);
        xm.max(ym) * self.pitch
    }
}

/// Complex amplitude grid with its physical sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    amplitude: Array2<Complex64>,
    pitch: f64,
    wavelength: f64,
    plane: Plane,
}

impl ComplexField {
    pub fn new(amplitude: Array2<Complex64>, pitch: f64, wavelength: f64, plane: Plane) -> Result<Self> {
        let (rows, cols) = amplitude.dim();
        GridSpec { rows, cols, pitch }.validate()?;
        if !(wavelength > 0.0 && wavelength.is_finite()) {
            return Err(Error::Domain(format!("wavelength {wavelength} must be positive")));
        }
        if amplitude.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Domain("field contains non-finite samples".into()));
        }
        Ok(Self { amplitude, pitch, wavelength, plane })
    }

    pub fn zeros(grid: GridSpec, wavelength: f64, plane: Plane) -> Result<Self> {
        Self::new(Array2::zeros((grid.rows, grid.cols)), grid.pitch, wavelength, plane)
    }

    pub fn amplitude(&self) -> &Array2<Complex64> {
        &self.amplitude
    }

    pub fn into_amplitude(self) -> Array2<Complex64> {
        self.amplitude
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn plane(&self) -> Plane {
        self.plane
    }

    pub fn grid(&self) -> GridSpec {
        let (rows, cols) = self.amplitude.dim();
        GridSpec { rows, cols, pitch: self.pitch }
    }

    pub fn intensity(&self) -> Array2<f64> {
        self.amplitude.mapv(|z| z.norm_sqr())
    }

    pub fn phase(&self) -> Array2<f64> {
        self.amplitude.mapv(|z| z.arg())
    }

    /// Pointwise product with another complex map on the same grid.
    pub fn modulate(&self, mask: &Array2<Complex64>) -> Result<Self> {
        if mask.dim() != self.amplitude.dim() {
            return Err(Error::Shape(format!(
                "modulation {:?} vs field {:?}",
                mask.dim(),
                self.amplitude.dim()
            )));
        }
        Self::new(&self.amplitude * mask, self.pitch, self.wavelength, self.plane)
    }

    pub fn scaled(&self, s: Complex64) -> Self {
        Self { amplitude: self.amplitude.mapv(|z| z * s), ..self.clone() }
    }
}

/// Finite window on the sensor plane where fields are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationRegion {
    /// (u, v) centre in metres.
    pub center: (f64, f64),
    /// (width, height) in metres.
    pub extent: (f64, f64),
    pub sample_pitch: f64,
}

impl SimulationRegion {
    pub fn centered(samples: usize, sample_pitch: f64) -> Self {
        let e = samples as f64 * sample_pitch;
        Self { center: (0.0, 0.0), extent: (e, e), sample_pitch }
    }

    /// (rows, cols) of the sample grid.
    pub fn samples(&self) -> (usize, usize) {
        (
            (self.extent.1 / self.sample_pitch).round() as usize,
            (self.extent.0 / self.sample_pitch).round() as usize,
        )
    }

    pub fn u(&self, col: usize) -> f64 {
        let (_, cols) = self.samples();
        self.center.0 + (col as f64 - (cols / 2) as f64) * self.sample_pitch
    }

    pub fn v(&self, row: usize) -> f64 {
        let (rows, _) = self.samples();
        self.center.1 + (row as f64 - (rows / 2) as f64) * self.sample_pitch
    }

    pub fn grid(&self) -> GridSpec {
        let (rows, cols) = self.samples();
        GridSpec { rows, cols, pitch: self.sample_pitch }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sample_pitch > 0.0) {
            return Err(Error::Config("region sample pitch must be positive".into()));
        }
        let (r, c) = self.samples();
        if r < 2 || c < 2 {
            return Err(Error::Config(format!("region resolves to {r}x{c} samples")));
        }
        Ok(())
    }
}

/// Point source at finite distance: `exp(i k r) / r` with `r = sqrt(x^2 + y^2 + z^2)`.
pub fn spherical_wavefront(grid: GridSpec, source_depth: f64, wavelength: f64) -> Result<ComplexField> {
    if !(source_depth > 0.0) {
        return Err(Error::Domain(format!("source depth {source_depth} must be positive")));
    }
    grid.validate()?;
    let k = 2.0 * PI / wavelength;
    let z2 = source_depth * source_depth;
    let amp = Array2::from_shape_fn((grid.rows, grid.cols), |(i, j)| {
        let (x, y) = (grid.x(j), grid.y(i));
        let r = (x * x + y * y + z2).sqrt();
        Complex64::from_polar(1.0 / r, k * r)
    });
    ComplexField::new(amp, grid.pitch, wavelength, Plane::Optic)
}

/// Unit-amplitude normally incident plane wave.
pub fn plane_wave(grid: GridSpec, wavelength: f64) -> Result<ComplexField> {
    grid.validate()?;
    ComplexField::new(
        Array2::from_elem((grid.rows, grid.cols), Complex64::new(1.0, 0.0)),
        grid.pitch,
        wavelength,
        Plane::Optic,
    )
}

/// `sum |a|^2 * pitch^2`.
pub fn field_energy(f: &ComplexField) -> f64 {
    f.amplitude.iter().map(|z| z.norm_sqr()).sum::<f64>() * f.pitch * f.pitch
}

#[derive(Debug, Clone)]
enum Sampling {
    /// Region samples coincide with FFT bins.
    Grid {
        fft: Fft2,
        n_pad: usize,
        row_bins: Vec<usize>,
        col_bins: Vec<usize>,
    },
    /// Region samples off the FFT lattice: the zero-padded spectrum is
    /// evaluated exactly at the requested points (separable DTFT).
    Dtft {
        ey: Array2<Complex64>,
        ex: Array2<Complex64>,
    },
}

/// Precomputed Fresnel transform from an optic-plane grid to a sensor region.
///
/// `U(u,v) = e^{ikd}/(i lambda d) sum T(x,y) exp(ik((x-u)^2+(y-v)^2)/(2d)) dx^2`
/// evaluated with one zero-padded FFT; output pitch of the FFT lattice is
/// `lambda d / (n_pad dx)`. The transform is complex-linear and
/// [`FresnelPropagator::adjoint`] is its exact conjugate transpose.
#[derive(Debug, Clone)]
pub struct FresnelPropagator {
    input: GridSpec,
    region: SimulationRegion,
    wavelength: f64,
    distance: f64,
    in_chirp: Array2<Complex64>,
    out_factor: Array2<Complex64>,
    sampling: Sampling,
}

impl FresnelPropagator {
    pub fn new(
        input: GridSpec,
        wavelength: f64,
        distance: f64,
        region: SimulationRegion,
        pad_factor: f64,
    ) -> Result<Self> {
        input.validate()?;
        region.validate()?;
        if !(distance > 0.0) {
            return Err(Error::Domain(format!("propagation distance {distance} must be positive")));
        }
        if !(wavelength > 0.0) {
            return Err(Error::Domain(format!("wavelength {wavelength} must be positive")));
        }
        if !(pad_factor >= 2.0) {
            return Err(Error::Config(format!("zero-padding factor {pad_factor} is below 2")));
        }
        let k = 2.0 * PI / wavelength;
        let dx = input.pitch;

        // Quadratic input phase must stay below pi per sample at the grid edge.
        let edge_step = k * input.max_abs_coord() * dx / distance;
        if edge_step > PI {
            return Err(Error::Config(format!(
                "Fresnel chirp aliases: {edge_step:.3} rad per sample at the grid edge (limit pi); \
                 increase the distance or refine the input pitch"
            )));
        }

        let period = wavelength * distance / dx;
        let (rows, cols) = region.samples();
        let half_w = region.center.0.abs() + 0.5 * cols as f64 * region.sample_pitch;
        let half_h = region.center.1.abs() + 0.5 * rows as f64 * region.sample_pitch;
        if half_w.max(half_h) > 0.5 * period * (1.0 + 1e-9) {
            return Err(Error::Config(format!(
                "simulation region reaches {:.4e} m from the axis but the sampled output support \
                 is only {:.4e} m wide (maximum legal extent at this sampling: {:.4e} m centred)",
                half_w.max(half_h),
                period,
                period
            )));
        }

        let area = dx * dx;
        let in_chirp = Array2::from_shape_fn((input.rows, input.cols), |(i, j)| {
            let (x, y) = (input.x(j), input.y(i));
            Complex64::from_polar(area, k * (x * x + y * y) / (2.0 * distance))
        });
        let lead = Complex64::from_polar(1.0, k * distance) / Complex64::new(0.0, wavelength * distance);
        let out_factor = Array2::from_shape_fn((rows, cols), |(i, j)| {
            let (u, v) = (region.u(j), region.v(i));
            lead * Complex64::from_polar(1.0, k * (u * u + v * v) / (2.0 * distance))
        });

        let s = region.sample_pitch;
        let q = period / s;
        let q_round = q.round();
        let on_lattice = q_round >= 1.0
            && (q - q_round).abs() <= 1e-6 * q
            && ((region.center.0 / s) - (region.center.0 / s).round()).abs() < 1e-6
            && ((region.center.1 / s) - (region.center.1 / s).round()).abs() < 1e-6;

        let sampling = if on_lattice {
            let q = q_round as usize;
            let need = (pad_factor * input.rows.max(input.cols) as f64).ceil() as usize;
            let stride = need.div_ceil(q).max(1);
            let n_pad = stride * q;
            let bins = |n: usize, c0: f64| -> Vec<usize> {
                let off = (c0 / s).round() as isize;
                (0..n)
                    .map(|j| {
                        let idx = (off + j as isize - (n / 2) as isize) * stride as isize;
                        idx.rem_euclid(n_pad as isize) as usize
                    })
                    .collect()
            };
            Sampling::Grid {
                fft: Fft2::new(n_pad, n_pad),
                n_pad,
                row_bins: bins(rows, region.center.1),
                col_bins: bins(cols, region.center.0),
            }
        } else {
            let ex = Array2::from_shape_fn((cols, input.cols), |(c, j)| {
                Complex64::from_polar(1.0, -k * input.x(j) * region.u(c) / distance)
            });
            let ey = Array2::from_shape_fn((rows, input.rows), |(r, i)| {
                Complex64::from_polar(1.0, -k * input.y(i) * region.v(r) / distance)
            });
            Sampling::Dtft { ey, ex }
        };

        Ok(Self { input, region, wavelength, distance, in_chirp, out_factor, sampling })
    }

    pub fn input_grid(&self) -> GridSpec {
        self.input
    }

    pub fn region(&self) -> SimulationRegion {
        self.region
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    /// True when region samples land exactly on FFT bins (no interpolation).
    pub fn is_on_lattice(&self) -> bool {
        matches!(self.sampling, Sampling::Grid { .. })
    }

    /// Padded FFT size, if the lattice path is used.
    pub fn padded_size(&self) -> Option<usize> {
        match &self.sampling {
            Sampling::Grid { n_pad, .. } => Some(*n_pad),
            Sampling::Dtft { .. } => None,
        }
    }

    fn input_bins(&self, n_pad: usize) -> (Vec<usize>, Vec<usize>) {
        let rb = (0..self.input.rows)
            .map(|i| (i as isize - (self.input.rows / 2) as isize).rem_euclid(n_pad as isize) as usize)
            .collect();
        let cb = (0..self.input.cols)
            .map(|j| (j as isize - (self.input.cols / 2) as isize).rem_euclid(n_pad as isize) as usize)
            .collect();
        (rb, cb)
    }

    pub fn forward(&self, t: &Array2<Complex64>) -> Array2<Complex64> {
        assert_eq!(t.dim(), (self.input.rows, self.input.cols), "input grid mismatch");
        let chirped = t * &self.in_chirp;
        let mut out = match &self.sampling {
            Sampling::Grid { fft, n_pad, row_bins, col_bins } => {
                let (rb, cb) = self.input_bins(*n_pad);
                let mut buf = Array2::<Complex64>::zeros((*n_pad, *n_pad));
                for (i, &r) in rb.iter().enumerate() {
                    for (j, &c) in cb.iter().enumerate() {
                        buf[[r, c]] = chirped[[i, j]];
                    }
                }
                fft.process_pruned(&mut buf, Direction::Forward, Axis(1), &cb, &dedup(row_bins));
                Array2::from_shape_fn((row_bins.len(), col_bins.len()), |(i, j)| {
                    buf[[row_bins[i], col_bins[j]]]
                })
            }
            Sampling::Dtft { ey, ex } => ey.dot(&chirped).dot(&ex.t()),
        };
        out *= &self.out_factor;
        out
    }

    /// Conjugate-transpose of [`forward`](Self::forward). For a real loss with
    /// gradient `g = dL/dRe U + i dL/dIm U` this returns the same quantity
    /// with respect to the input.
    pub fn adjoint(&self, g: &Array2<Complex64>) -> Array2<Complex64> {
        assert_eq!(g.dim(), self.out_factor.dim(), "region grid mismatch");
        let mut g1 = g.clone();
        g1.zip_mut_with(&self.out_factor, |a, b| *a *= b.conj());
        let mut res = match &self.sampling {
            Sampling::Grid { fft, n_pad, row_bins, col_bins } => {
                let (rb, cb) = self.input_bins(*n_pad);
                let mut buf = Array2::<Complex64>::zeros((*n_pad, *n_pad));
                for (i, &r) in row_bins.iter().enumerate() {
                    for (j, &c) in col_bins.iter().enumerate() {
                        buf[[r, c]] += g1[[i, j]];
                    }
                }
                fft.process_pruned(&mut buf, Direction::Inverse, Axis(0), &dedup(row_bins), &cb);
                Array2::from_shape_fn((self.input.rows, self.input.cols), |(i, j)| buf[[rb[i], cb[j]]])
            }
            Sampling::Dtft { ey, ex } => {
                let eyh = ey.t().mapv(|z| z.conj());
                let exc = ex.mapv(|z| z.conj());
                eyh.dot(&g1).dot(&exc)
            }
        };
        res.zip_mut_with(&self.in_chirp, |a, b| *a *= b.conj());
        res
    }

    /// Propagate a field and wrap it with the region's sampling.
    pub fn propagate(&self, input: &ComplexField) -> Result<ComplexField> {
        if input.grid() != self.input || (input.wavelength() - self.wavelength).abs() > 1e-15 {
            return Err(Error::Shape("field does not match the propagator's input grid".into()));
        }
        ComplexField::new(self.forward(input.amplitude()), self.region.sample_pitch, self.wavelength, Plane::Sensor)
    }
}

fn dedup(v: &[usize]) -> Vec<usize> {
    let mut out = v.to_vec();
    out.sort_unstable();
    out.dedup();
    out
}

pub const DEFAULT_PAD_FACTOR: f64 = 2.0;

/// Fresnel-propagate `input` over `distance` onto `region`.
pub fn fresnel_propagate(input: &ComplexField, distance: f64, region: SimulationRegion) -> Result<ComplexField> {
    FresnelPropagator::new(input.grid(), input.wavelength(), distance, region, DEFAULT_PAD_FACTOR)?.propagate(input)
}

/// Brute-force Riemann sum of the Fresnel integral at arbitrary points.
pub fn direct_quadrature_oracle(input: &ComplexField, distance: f64, points: &[(f64, f64)]) -> Result<Vec<Complex64>> {
    if points.len() > 10_000 {
        return Err(Error::Domain(format!("{} oracle points requested (max 10000)", points.len())));
    }
    if !(distance > 0.0) {
        return Err(Error::Domain("propagation distance must be positive".into()));
    }
    let grid = input.grid();
    let lambda = input.wavelength();
    let k = 2.0 * PI / lambda;
    let lead = Complex64::from_polar(1.0, k * distance) / Complex64::new(0.0, lambda * distance);
    let area = grid.pitch * grid.pitch;
    let a = input.amplitude();
    Ok(points
        .iter()
        .map(|&(u, v)| {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..grid.rows {
                let dy = grid.y(i) - v;
                for j in 0..grid.cols {
                    let t = a[[i, j]];
                    if t.re == 0.0 && t.im == 0.0 {
                        continue;
                    }
                    let dx = grid.x(j) - u;
                    acc += t * Complex64::from_polar(1.0, k * (dx * dx + dy * dy) / (2.0 * distance));
                }
            }
            acc * lead * area
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LAMBDA: f64 = 532e-9;

    /// Disk with antialiased edge (4x4 supersampled coverage).
    fn disk(grid: GridSpec, diameter: f64) -> Array2<Complex64> {
        let r = diameter / 2.0;
        Array2::from_shape_fn((grid.rows, grid.cols), |(i, j)| {
            let mut cov = 0.0;
            for a in 0..4 {
                for b in 0..4 {
                    let x = grid.x(j) + (b as f64 - 1.5) / 4.0 * grid.pitch;
                    let y = grid.y(i) + (a as f64 - 1.5) / 4.0 * grid.pitch;
                    if x * x + y * y <= r * r {
                        cov += 1.0 / 16.0;
                    }
                }
            }
            Complex64::new(cov, 0.0)
        })
    }

    #[test]
    fn spherical_wave_on_axis_value() {
        let g = GridSpec::square(9, 1e-6);
        let z = 3e-3;
        let f = spherical_wavefront(g, z, LAMBDA).unwrap();
        let c = f.amplitude()[[4, 4]];
        assert!((c.norm() - 1.0 / z).abs() < 1e-12 / z);
        let k = 2.0 * PI / LAMBDA;
        let want = (k * z).rem_euclid(2.0 * PI);
        let got = c.arg().rem_euclid(2.0 * PI);
        assert!((want - got).abs() < 1e-6);
    }

    #[test]
    fn spherical_wave_is_point_symmetric() {
        let g = GridSpec::square(11, 2e-6);
        let f = spherical_wavefront(g, 1e-3, LAMBDA).unwrap();
        let a = f.amplitude();
        for i in 0..11 {
            for j in 0..11 {
                assert_eq!(a[[i, j]], a[[10 - i, 10 - j]]);
            }
        }
    }

    #[test]
    fn distant_source_is_nearly_planar() {
        // 0.2 mm aperture, source 1e7 aperture radii away.
        let g = GridSpec::square(41, 5e-6);
        let z = 1e7 * 1e-4;
        let f = spherical_wavefront(g, z, LAMBDA).unwrap();
        let k = 2.0 * PI / LAMBDA;
        let mut worst: f64 = 0.0;
        for ((i, j), v) in f.amplitude().indexed_iter() {
            let (x, y) = (g.x(j), g.y(i));
            // kr - kz without cancellation: k (x^2+y^2) / (r + z)
            let rho2 = x * x + y * y;
            let excess = k * rho2 / ((rho2 + z * z).sqrt() + z);
            assert!(excess < 1e-3);
            let dev = (v * Complex64::from_polar(1.0, -k * z)).arg();
            worst = worst.max((dev - excess).abs());
        }
        assert!(worst < 1e-3);
        assert!(spherical_wavefront(g, 0.0, LAMBDA).is_err());
        assert!(spherical_wavefront(g, -1.0, LAMBDA).is_err());
    }

    #[test]
    fn energy_examples() {
        let g = GridSpec::square(10, 1e-6);
        let zero = ComplexField::zeros(g, LAMBDA, Plane::Optic).unwrap();
        assert_eq!(field_energy(&zero), 0.0);
        let ones = plane_wave(g, LAMBDA).unwrap();
        assert!((field_energy(&ones) - 1e-10).abs() < 1e-22);
        let rotated = ones.scaled(Complex64::from_polar(1.0, 0.7));
        assert!((field_energy(&rotated) - field_energy(&ones)).abs() < 1e-24);
    }

    #[test]
    fn field_rejects_bad_grids() {
        assert!(ComplexField::new(Array2::zeros((1, 4)), 1e-6, LAMBDA, Plane::Optic).is_err());
        assert!(ComplexField::new(Array2::zeros((4, 4)), 0.0, LAMBDA, Plane::Optic).is_err());
        assert!(ComplexField::new(Array2::zeros((4, 4)), 1e-6, -1.0, Plane::Optic).is_err());
    }

    fn small_setup() -> (GridSpec, f64, SimulationRegion) {
        // 64x64 input, 2 um pitch, q = lambda d / (s dx) = 160 bins over the period.
        let g = GridSpec::square(64, 2e-6);
        let d = 160.0 * 2e-6 * 2e-6 / LAMBDA;
        (g, d, SimulationRegion::centered(96, 2e-6))
    }

    #[test]
    fn zero_in_zero_out() {
        let (g, d, region) = small_setup();
        let f = ComplexField::zeros(g, LAMBDA, Plane::Optic).unwrap();
        let out = fresnel_propagate(&f, d, region).unwrap();
        assert!(out.amplitude().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn lattice_path_matches_quadrature() {
        let (g, d, region) = small_setup();
        let f = ComplexField::new(disk(g, 100e-6), g.pitch, LAMBDA, Plane::Optic).unwrap();
        let p = FresnelPropagator::new(g, LAMBDA, d, region, 2.0).unwrap();
        assert!(p.is_on_lattice());
        let out = p.propagate(&f).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let idx: Vec<(usize, usize)> = (0..40).map(|_| (rng.random_range(0..96), rng.random_range(0..96))).collect();
        let pts: Vec<(f64, f64)> = idx.iter().map(|&(i, j)| (region.u(j), region.v(i))).collect();
        let oracle = direct_quadrature_oracle(&f, d, &pts).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (&(i, j), o) in idx.iter().zip(&oracle) {
            num += (out.amplitude()[[i, j]] - o).norm_sqr();
            den += o.norm_sqr();
        }
        assert!((num / den).sqrt() < 1e-3, "rel L2 {}", (num / den).sqrt());
    }

    #[test]
    fn off_lattice_path_matches_quadrature() {
        let (g, d, _) = small_setup();
        let region = SimulationRegion { center: (3.3e-6, -1.7e-6), extent: (60e-6, 48e-6), sample_pitch: 1.5e-6 };
        let f = ComplexField::new(disk(g, 90e-6), g.pitch, LAMBDA, Plane::Optic).unwrap();
        let p = FresnelPropagator::new(g, LAMBDA, d, region, 2.0).unwrap();
        assert!(!p.is_on_lattice());
        let out = p.propagate(&f).unwrap();
        let (rows, cols) = region.samples();
        let pts: Vec<(f64, f64)> = (0..rows).step_by(5).flat_map(|i| (0..cols).step_by(7).map(move |j| (i, j))).map(|(i, j)| (region.u(j), region.v(i))).collect();
        let oracle = direct_quadrature_oracle(&f, d, &pts).unwrap();
        let mut k = 0;
        for i in (0..rows).step_by(5) {
            for j in (0..cols).step_by(7) {
                assert!((out.amplitude()[[i, j]] - oracle[k]).norm() < 1e-9 * oracle[k].norm().max(1.0));
                k += 1;
            }
        }
    }

    #[test]
    fn linearity() {
        let (g, d, region) = small_setup();
        let p = FresnelPropagator::new(g, LAMBDA, d, region, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_field = || Array2::from_shape_fn((64, 64), |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let (f1, f2) = (rand_field(), rand_field());
        let (a, b) = (Complex64::new(0.3, -1.2), Complex64::new(-2.0, 0.5));
        let lhs = p.forward(&(f1.mapv(|z| z * a) + f2.mapv(|z| z * b)));
        let rhs = p.forward(&f1).mapv(|z| z * a) + p.forward(&f2).mapv(|z| z * b);
        let num: f64 = lhs.iter().zip(rhs.iter()).map(|(x, y)| (x - y).norm_sqr()).sum();
        let den: f64 = rhs.iter().map(|y| y.norm_sqr()).sum();
        assert!((num / den).sqrt() < 1e-12);
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let (g, d, region) = small_setup();
        let p = FresnelPropagator::new(g, LAMBDA, d, region, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t0 = Array2::from_shape_fn((64, 64), |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let w = Array2::from_shape_fn(region.samples(), |_| rng.random_range(0.0..1.0));
        // Loss: weighted intensity sum, normalised to O(1).
        let scale = 1.0 / p.forward(&t0).iter().map(|z| z.norm_sqr()).sum::<f64>();
        let loss = |t: &Array2<Complex64>| -> f64 {
            p.forward(t).iter().zip(w.iter()).map(|(z, w)| w * z.norm_sqr()).sum::<f64>() * scale
        };
        let u = p.forward(&t0);
        let gu = Array2::from_shape_fn(u.dim(), |(i, j)| u[[i, j]] * (2.0 * w[[i, j]] * scale));
        let gt = p.adjoint(&gu);
        let coords: Vec<(usize, usize, bool)> = (0..20).map(|_| (rng.random_range(0..64), rng.random_range(0..64), rng.random())).collect();
        let analytic: Vec<f64> = coords.iter().map(|&(i, j, im)| if im { gt[[i, j]].im } else { gt[[i, j]].re }).collect();
        let numeric: Vec<f64> = coords
            .iter()
            .map(|&(i, j, im)| {
                central_difference(
                    |h| {
                        let mut t = t0.clone();
                        if im {
                            t[[i, j]].im += h;
                        } else {
                            t[[i, j]].re += h;
                        }
                        loss(&t)
                    },
                    1e-5,
                )
            })
            .collect();
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn adjoint_identity_both_paths() {
        let (g, d, region) = small_setup();
        let off = SimulationRegion { center: (1e-6, 0.0), extent: (40e-6, 30e-6), sample_pitch: 1.3e-6 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for r in [region, off] {
            let p = FresnelPropagator::new(g, LAMBDA, d, r, 2.0).unwrap();
            let x = Array2::from_shape_fn((64, 64), |_| Complex64::new(rng.random(), rng.random()));
            let y = Array2::from_shape_fn(r.samples(), |_| Complex64::new(rng.random(), rng.random()));
            let lhs: Complex64 = p.forward(&x).iter().zip(y.iter()).map(|(a, b)| a * b.conj()).sum();
            let rhs: Complex64 = x.iter().zip(p.adjoint(&y).iter()).map(|(a, b)| a * b.conj()).sum();
            assert!((lhs - rhs).norm() < 1e-10 * lhs.norm());
        }
    }

    #[test]
    fn parseval_over_full_period() {
        let (g, d, _) = small_setup();
        let region = SimulationRegion::centered(160, 2e-6);
        let f = ComplexField::new(disk(g, 100e-6), g.pitch, LAMBDA, Plane::Optic).unwrap();
        let out = fresnel_propagate(&f, d, region).unwrap();
        let e_in = field_energy(&f);
        let e_out = field_energy(&out);
        assert!((e_out / e_in - 1.0).abs() < 1e-10);
    }

    #[test]
    fn region_larger_than_support_is_rejected() {
        let (g, d, _) = small_setup();
        let region = SimulationRegion::centered(200, 2e-6);
        match FresnelPropagator::new(g, LAMBDA, d, region, 2.0) {
            Err(Error::Config(msg)) => assert!(msg.contains("maximum legal extent")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn chirp_guard_rejects_short_distances() {
        let g = GridSpec::square(64, 2e-6);
        let region = SimulationRegion::centered(8, 1e-6);
        assert!(matches!(FresnelPropagator::new(g, LAMBDA, 1e-5, region, 2.0), Err(Error::Config(_))));
        assert!(matches!(FresnelPropagator::new(g, LAMBDA, 1e-3, region, 1.5), Err(Error::Config(_))));
    }

    /// Radius of the first local minimum of a radial intensity profile along +x,
    /// refined by a parabola through the three bracketing samples.
    fn first_minimum(profile: &[f64], pitch: f64) -> f64 {
        for i in 1..profile.len() - 1 {
            if profile[i] < profile[i - 1] && profile[i] <= profile[i + 1] {
                let (a, b, c) = (profile[i - 1], profile[i], profile[i + 1]);
                let off = 0.5 * (a - c) / (a - 2.0 * b + c);
                return (i as f64 + off) * pitch;
            }
        }
        panic!("no minimum");
    }

    /// First stationary point: local minimum of |dI/dr| from central differences,
    /// refined the same way.
    fn first_flat_point(profile: &[f64], pitch: f64) -> f64 {
        let slope: Vec<f64> = (1..profile.len() - 1).map(|i| (profile[i + 1] - profile[i - 1]).abs()).collect();
        first_minimum(&slope, pitch) + pitch
    }

    fn airy_profile(lens: bool) -> (f64, f64) {
        let d = 20e-3;
        let diameter = 0.2e-3;
        let g = GridSpec::square(128, 2e-6);
        let s = LAMBDA * d / (1024.0 * g.pitch);
        let region = SimulationRegion { center: (0.0, 0.0), extent: (64.0 * s, 4.0 * s), sample_pitch: s };
        let k = 2.0 * PI / LAMBDA;
        let mut a = disk(g, diameter);
        if lens {
            for ((i, j), z) in a.indexed_iter_mut() {
                let (x, y) = (g.x(j), g.y(i));
                *z *= Complex64::from_polar(1.0, -k * (x * x + y * y) / (2.0 * d));
            }
        }
        let f = ComplexField::new(a, g.pitch, LAMBDA, Plane::Optic).unwrap();
        let p = FresnelPropagator::new(g, LAMBDA, d, region, 2.0).unwrap();
        assert!(p.is_on_lattice());
        let out = p.propagate(&f).unwrap();
        let pts: Vec<(f64, f64)> = (32..64).step_by(3).map(|j| (region.u(j), 0.0)).collect();
        let oracle = direct_quadrature_oracle(&f, d, &pts).unwrap();
        for (n, j) in (32..64).step_by(3).enumerate() {
            let z = out.amplitude()[[2, j]];
            assert!((z - oracle[n]).norm() < 1e-6 * oracle[0].norm());
        }
        let row = out.intensity().row(2).to_vec();
        let prof: Vec<f64> = row[32..].to_vec();
        let r = if lens { first_minimum(&prof, s) } else { first_flat_point(&prof, s) };
        (r, 1.22 * LAMBDA * d / diameter)
    }

    #[test]
    fn plain_disk_first_dark_ring_near_airy_radius() {
        // Fresnel number is close to 1 here, so the first ring is a flat
        // shoulder rather than a zero.
        let (r, want) = airy_profile(false);
        assert!((r / want - 1.0).abs() < 0.02, "{r} vs {want}");
    }

    #[test]
    fn focused_disk_first_zero_at_airy_radius() {
        let (r, want) = airy_profile(true);
        assert!((r / want - 1.0).abs() < 0.02, "{r} vs {want}");
    }

    #[test]
    fn focused_lens_peaks_on_axis() {
        let d = 5e-3;
        let g = GridSpec::square(64, 2e-6);
        let s = LAMBDA * d / (512.0 * g.pitch);
        let region = SimulationRegion::centered(64, s);
        let k = 2.0 * PI / LAMBDA;
        let mut a = disk(g, 100e-6);
        for ((i, j), z) in a.indexed_iter_mut() {
            let (x, y) = (g.x(j), g.y(i));
            *z *= Complex64::from_polar(1.0, -k * (x * x + y * y) / (2.0 * d));
        }
        let f = ComplexField::new(a, g.pitch, LAMBDA, Plane::Optic).unwrap();
        let out = fresnel_propagate(&f, d, region).unwrap().intensity();
        let (imax, _) = out.indexed_iter().fold(((0, 0), 0.0), |acc, (ij, &v)| if v > acc.1 { (ij, v) } else { acc });
        assert_eq!(imax, (32, 32));
        let oracle = direct_quadrature_oracle(&f, d, &[(0.0, 0.0), (region.u(40), 0.0)]).unwrap();
        assert!(oracle[0].norm_sqr() > oracle[1].norm_sqr());
        assert!((oracle[0].norm_sqr() / out[[32, 32]] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn oracle_linearity_and_zero() {
        let g = GridSpec::square(8, 1e-6);
        let z = ComplexField::zeros(g, LAMBDA, Plane::Optic).unwrap();
        let v = direct_quadrature_oracle(&z, 1e-3, &[(0.0, 0.0), (1e-6, 2e-6)]).unwrap();
        assert!(v.iter().all(|c| c.norm() == 0.0));
        let f = ComplexField::new(disk(g, 6e-6), 1e-6, LAMBDA, Plane::Optic).unwrap();
        let a = direct_quadrature_oracle(&f, 1e-3, &[(1e-6, 0.0)]).unwrap()[0];
        let b = direct_quadrature_oracle(&f.scaled(Complex64::new(2.0, 0.0)), 1e-3, &[(1e-6, 0.0)]).unwrap()[0];
        assert!((b - 2.0 * a).norm() < 1e-12 * a.norm());
    }
}
