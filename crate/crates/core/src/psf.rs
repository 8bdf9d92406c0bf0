//! Four-channel polarization PSFs and their adjoint.
//!
//! Channels are ordered 0°, 45°, 90°, 135°. The 45° and 135° channels are
//! the interference of the two propagated polarization fields:
//! `h45 = (h0 + h90)/2 - sqrt(h0 h90) cos(psi0 - psi90)` and the same with `+`
//! for 135°.

use ndarray::{Array2, Zip};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::field::{spherical_wavefront, FresnelPropagator, SimulationRegion, DEFAULT_PAD_FACTOR};
use crate::io::PortableTensor;
use crate::metasurface::{MetasurfaceDesign, Profiles};
use crate::surrogate::SurrogateModel;

pub const N_CHANNELS: usize = 4;

/// Negative interference values of at most this size (relative to the peak
/// of `h0 + h90`) are rounding dust and are clamped to zero.
pub const DUST: f64 = 1e-14;

/// Source position for one batch entry. `None` depth means infinity focus.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BatchEntry {
    pub depth: Option<f64>,
    pub wavelength: f64,
}

/// Optic-to-sensor geometry shared by every batch entry.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PsfConfig {
    pub sensor_distance: f64,
    pub sensor_pitch: f64,
    /// Computation samples per sensor pixel along each axis.
    pub subsample: usize,
    /// Region side length in sensor pixels.
    pub region_pixels: usize,
    pub pad_factor: f64,
}

impl PsfConfig {
    pub fn sample_pitch(&self) -> f64 {
        self.sensor_pitch / self.subsample as f64
    }

    /// Computation-grid region centred on the optical axis.
    pub fn region(&self) -> SimulationRegion {
        SimulationRegion::centered(self.region_pixels * self.subsample, self.sample_pitch())
    }

    /// Sensor-plane coordinate of the centre of pooled pixel `idx` along either axis.
    pub fn pixel_coord(&self, idx: usize) -> f64 {
        let s = self.sample_pitch();
        let n = self.region_pixels * self.subsample;
        ((idx * self.subsample) as f64 + 0.5 * (self.subsample - 1) as f64 - (n / 2) as f64) * s
    }

    pub fn pixel_area(&self) -> f64 {
        self.sensor_pitch * self.sensor_pitch
    }

    pub fn validate(&self) -> Result<()> {
        if self.subsample == 0 || self.region_pixels == 0 {
            return Err(Error::Config("subsample and region size must be positive".into()));
        }
        if !(self.sensor_distance > 0.0 && self.sensor_pitch > 0.0) {
            return Err(Error::Config("sensor distance and pitch must be positive".into()));
        }
        Ok(())
    }
}

/// Distance at which the FFT output lattice of `q` bins per period lands on
/// samples of pitch `sample_pitch`, i.e. `lambda d / (sample_pitch dx) = q`.
pub fn lattice_distance(optic_pitch: f64, sample_pitch: f64, wavelength: f64, q: usize) -> f64 {
    q as f64 * sample_pitch * optic_pitch / wavelength
}

/// Per-polarization intensity and phase on the computation grid.
#[derive(Clone, Debug)]
pub struct PsfPair {
    pub h0: Array2<f64>,
    pub psi0: Array2<f64>,
    pub h90: Array2<f64>,
    pub psi90: Array2<f64>,
}

fn incident_field(design: &MetasurfaceDesign, depth: Option<f64>, wavelength: f64) -> Result<Array2<Complex64>> {
    let grid = design.grid.spec();
    match depth {
        None => Ok(Array2::from_elem((grid.rows, grid.cols), Complex64::new(1.0, 0.0))),
        Some(z) => {
            // Scaled to unit amplitude and zero phase on axis.
            let k = 2.0 * std::f64::consts::PI / wavelength;
            let norm = Complex64::from_polar(z, -k * z);
            Ok(spherical_wavefront(grid, z, wavelength)?.into_amplitude().mapv(|a| a * norm))
        }
    }
}

/// Propagate both polarization channels of `design` lit by a point source at
/// `depth` (or a plane wave) to `region` at distance `d`.
pub fn compute_psf_pair(
    design: &MetasurfaceDesign,
    surrogate: Option<&SurrogateModel>,
    depth: Option<f64>,
    wavelength: f64,
    d: f64,
    region: SimulationRegion,
) -> Result<PsfPair> {
    if let Some(z) = depth {
        if !(z > 0.0) {
            return Err(Error::Domain(format!("source depth {z} must be positive")));
        }
    }
    let prop = FresnelPropagator::new(design.grid.spec(), wavelength, d, region, DEFAULT_PAD_FACTOR)?;
    let inc = incident_field(design, depth, wavelength)?;
    let p = design.assemble(surrogate, wavelength)?;
    let u0 = prop.forward(&(&inc * &p.t_x));
    let u90 = prop.forward(&(&inc * &p.t_y));
    Ok(PsfPair {
        h0: u0.mapv(|z| z.norm_sqr()),
        psi0: u0.mapv(|z| z.arg()),
        h90: u90.mapv(|z| z.norm_sqr()),
        psi90: u90.mapv(|z| z.arg()),
    })
}

fn clamp_dust(v: f64, peak: f64) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if -v <= DUST * peak.max(f64::MIN_POSITIVE) {
        Ok(0.0)
    } else {
        Err(Error::Numerical(format!("interference channel went negative ({v:e})")))
    }
}

/// The 45° and 135° channels from intensities and phases.
pub fn interfere(
    h0: &Array2<f64>,
    psi0: &Array2<f64>,
    h90: &Array2<f64>,
    psi90: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let s = h0.dim();
    if psi0.dim() != s || h90.dim() != s || psi90.dim() != s {
        return Err(Error::Domain("interfere needs four maps on the same grid".into()));
    }
    let peak = Zip::from(h0).and(h90).fold(0.0f64, |m, a, b| m.max(a + b));
    let mut h45 = Array2::zeros(s);
    let mut h135 = Array2::zeros(s);
    for (((idx, &a), &pa), (&b, &pb)) in h0.indexed_iter().zip(psi0.iter()).zip(h90.iter().zip(psi90.iter())) {
        let mean = 0.5 * (a + b);
        let cross = (a * b).sqrt() * (pa - pb).cos();
        h45[idx] = clamp_dust(mean - cross, peak)?;
        h135[idx] = clamp_dust(mean + cross, peak)?;
    }
    Ok((h45, h135))
}

fn interfere_fields(u0: &Array2<Complex64>, u90: &Array2<Complex64>) -> Result<[Array2<f64>; 4]> {
    let h0 = u0.mapv(|z| z.norm_sqr());
    let h90 = u90.mapv(|z| z.norm_sqr());
    let peak = Zip::from(&h0).and(&h90).fold(0.0f64, |m, a, b| m.max(a + b));
    let mut h45 = Array2::zeros(h0.dim());
    let mut h135 = Array2::zeros(h0.dim());
    for (idx, (a, b)) in u0.indexed_iter().zip(u90.iter()).map(|((i, a), b)| (i, (a, b))) {
        let mean = 0.5 * (h0[idx] + h90[idx]);
        let cross = (a * b.conj()).re;
        h45[idx] = clamp_dust(mean - cross, peak)?;
        h135[idx] = clamp_dust(mean + cross, peak)?;
    }
    Ok([h0, h45, h90, h135])
}

/// Box-average pooling from the computation grid to sensor pixels.
pub fn resample_to_sensor(intensity: &Array2<f64>, grid_pitch: f64, sensor_pitch: f64) -> Result<Array2<f64>> {
    let ratio = sensor_pitch / grid_pitch;
    let r = ratio.round();
    if !(r >= 1.0) || (ratio - r).abs() > 1e-9 * ratio {
        return Err(Error::Config(format!(
            "sensor pitch {sensor_pitch:e} is not an integer multiple of the grid pitch {grid_pitch:e}"
        )));
    }
    pool(intensity, r as usize)
}

fn pool(a: &Array2<f64>, r: usize) -> Result<Array2<f64>> {
    let (rows, cols) = a.dim();
    if rows % r != 0 || cols % r != 0 {
        return Err(Error::Config(format!("grid {rows}x{cols} is not divisible by the pooling ratio {r}")));
    }
    let inv = 1.0 / (r * r) as f64;
    Ok(Array2::from_shape_fn((rows / r, cols / r), |(i, j)| {
        let mut s = 0.0;
        for di in 0..r {
            for dj in 0..r {
                s += a[[i * r + di, j * r + dj]];
            }
        }
        s * inv
    }))
}

/// Fraction of incident light that lands in the region, over both polarizations.
pub fn focusing_efficiency(h0: &Array2<f64>, h90: &Array2<f64>, pixel_area: f64, incident_energy: f64) -> Result<f64> {
    if !(incident_energy > 0.0) {
        return Err(Error::Domain("incident energy must be positive".into()));
    }
    Ok((h0.sum() + h90.sum()) * pixel_area / incident_energy)
}

/// Sensor-resolution PSFs for every batch entry.
#[derive(Clone, Debug)]
pub struct PsfStack {
    pub entries: Vec<BatchEntry>,
    /// `h[b][c]`, channels 0°, 45°, 90°, 135°.
    pub h: Vec<[Array2<f64>; N_CHANNELS]>,
    /// Phases on the computation grid.
    pub psi0: Vec<Array2<f64>>,
    pub psi90: Vec<Array2<f64>>,
    pub pixel_area: f64,
    /// Incident energy over the aperture, both polarizations.
    pub incident_energy: Vec<f64>,
}

impl PsfStack {
    pub fn batch(&self) -> usize {
        self.h.len()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.h[0][0].dim()
    }

    pub fn efficiency(&self, b: usize) -> f64 {
        focusing_efficiency(&self.h[b][0], &self.h[b][2], self.pixel_area, self.incident_energy[b])
            .expect("incident energy is positive by construction")
    }

    pub fn mean_efficiency(&self) -> f64 {
        (0..self.batch()).map(|b| self.efficiency(b)).sum::<f64>() / self.batch() as f64
    }

    /// Net PSF `sum_c alpha_c h_c` of batch entry `b`.
    pub fn net(&self, b: usize, alpha: &[f64; N_CHANNELS]) -> Array2<f64> {
        let mut out = Array2::zeros(self.dim());
        for (h, &a) in self.h[b].iter().zip(alpha) {
            out.scaled_add(a, h);
        }
        out
    }

    /// `max |(h45 + h135) - (h0 + h90)| / max(h0 + h90)` over the stack.
    pub fn conservation_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for h in &self.h {
            let peak = Zip::from(&h[0]).and(&h[2]).fold(0.0f64, |m, a, b| m.max(a + b));
            let dev = Zip::from(&h[0])
                .and(&h[1])
                .and(&h[2])
                .and(&h[3])
                .fold(0.0f64, |m, a, b, c, d| m.max(((b + d) - (a + c)).abs()));
            if peak > 0.0 {
                worst = worst.max(dev / peak);
            }
        }
        worst
    }

    /// 4x4 channel Gram matrix of batch entry `b`.
    pub fn gram(&self, b: usize) -> nalgebra::Matrix4<f64> {
        let h = &self.h[b];
        nalgebra::Matrix4::from_fn(|i, j| Zip::from(&h[i]).and(&h[j]).fold(0.0, |s, a, c| s + a * c))
    }

    /// Smallest over largest singular value of the channel matrix, worst over the batch.
    pub fn rank_ratio(&self) -> f64 {
        (0..self.batch())
            .map(|b| {
                let sv = self.gram(b).symmetric_eigenvalues().map(|e| e.abs().sqrt());
                sv.min() / sv.max().max(f64::MIN_POSITIVE)
            })
            .fold(0.0, f64::max)
    }

    /// `[B, 4, rows, cols]` tensor.
    pub fn to_tensor(&self) -> PortableTensor {
        let (r, c) = self.dim();
        let data = self.h.iter().flat_map(|hs| hs.iter().flat_map(|h| h.iter().map(|&v| v as f32))).collect();
        PortableTensor::new(
            vec![self.batch(), N_CHANNELS, r, c],
            ["batch", "channel", "y", "x"].map(String::from).to_vec(),
            "W/m^2 per unit incident irradiance",
            data,
        )
        .expect("shape matches data")
        .with_meta(serde_json::json!({
            "channels_deg": [0, 45, 90, 135],
            "entries": self.entries,
            "pixel_area_m2": self.pixel_area,
            "incident_energy": self.incident_energy,
        }))
    }
}

/// Forward state kept for [`PsfEngine::backward`].
pub struct PsfForward {
    pub stack: PsfStack,
    profiles: Vec<Profiles>,
    fields: Vec<[Array2<Complex64>; 2]>,
}

/// Precomputed propagators and incident fields for a fixed batch.
pub struct PsfEngine {
    cfg: PsfConfig,
    entries: Vec<BatchEntry>,
    props: Vec<FresnelPropagator>,
    incident: Vec<Array2<Complex64>>,
    incident_energy: Vec<f64>,
    /// Distinct wavelengths and the wavelength slot of every entry.
    wavelengths: Vec<f64>,
    slot: Vec<usize>,
}

impl PsfEngine {
    pub fn new(design: &MetasurfaceDesign, cfg: PsfConfig, entries: Vec<BatchEntry>) -> Result<Self> {
        cfg.validate()?;
        if entries.is_empty() {
            return Err(Error::Config("PSF batch is empty".into()));
        }
        let region = cfg.region();
        let mask = design.grid.mask();
        let dx2 = design.grid.pitch().powi(2);
        let mut wavelengths: Vec<f64> = Vec::new();
        let mut slot = Vec::new();
        let (mut props, mut incident, mut incident_energy) = (vec![], vec![], vec![]);
        for e in &entries {
            if let Some(z) = e.depth {
                if !(z > 0.0) {
                    return Err(Error::Domain(format!("source depth {z} must be positive")));
                }
            }
            let k = match wavelengths.iter().position(|&w| w == e.wavelength) {
                Some(k) => k,
                None => {
                    wavelengths.push(e.wavelength);
                    wavelengths.len() - 1
                }
            };
            slot.push(k);
            props.push(FresnelPropagator::new(design.grid.spec(), e.wavelength, cfg.sensor_distance, region, cfg.pad_factor)?);
            let inc = incident_field(design, e.depth, e.wavelength)?;
            let energy = 2.0 * Zip::from(&inc).and(&mask).fold(0.0, |s, z, m| s + m * z.norm_sqr()) * dx2;
            incident.push(inc);
            incident_energy.push(energy);
        }
        Ok(Self { cfg, entries, props, incident, incident_energy, wavelengths, slot })
    }

    pub fn config(&self) -> &PsfConfig {
        &self.cfg
    }

    pub fn entries(&self) -> &[BatchEntry] {
        &self.entries
    }

    pub fn forward(&self, design: &MetasurfaceDesign, model: Option<&SurrogateModel>) -> Result<PsfForward> {
        let profiles: Vec<Profiles> =
            self.wavelengths.iter().map(|&w| design.assemble(model, w)).collect::<Result<_>>()?;
        let mut h = Vec::with_capacity(self.entries.len());
        let (mut psi0, mut psi90, mut fields) = (vec![], vec![], vec![]);
        for (b, prop) in self.props.iter().enumerate() {
            let p = &profiles[self.slot[b]];
            let inc = &self.incident[b];
            let u0 = prop.forward(&(inc * &p.t_x));
            let u90 = prop.forward(&(inc * &p.t_y));
            let chans = interfere_fields(&u0, &u90)?;
            let pooled = [0, 1, 2, 3].map(|c| pool(&chans[c], self.cfg.subsample));
            let [a, b2, c, d] = pooled;
            h.push([a?, b2?, c?, d?]);
            psi0.push(u0.mapv(|z| z.arg()));
            psi90.push(u90.mapv(|z| z.arg()));
            fields.push([u0, u90]);
        }
        let stack = PsfStack {
            entries: self.entries.clone(),
            h,
            psi0,
            psi90,
            pixel_area: self.cfg.pixel_area(),
            incident_energy: self.incident_energy.clone(),
        };
        Ok(PsfForward { stack, profiles, fields })
    }

    /// Gradient w.r.t. the design parameter maps given `dL/dh[b][c]` at sensor resolution.
    pub fn backward(
        &self,
        fwd: &PsfForward,
        design: &MetasurfaceDesign,
        model: Option<&SurrogateModel>,
        grad_h: &[[Array2<f64>; N_CHANNELS]],
    ) -> Result<[Array2<f64>; 2]> {
        if grad_h.len() != self.entries.len() {
            return Err(Error::Shape(format!("{} gradient slices for {} entries", grad_h.len(), self.entries.len())));
        }
        let n = design.grid.cells;
        let mut g_t: Vec<[Array2<Complex64>; 2]> =
            self.wavelengths.iter().map(|_| [Array2::zeros((n, n)), Array2::zeros((n, n))]).collect();
        let r = self.cfg.subsample;
        let inv = 1.0 / (r * r) as f64;
        for (b, prop) in self.props.iter().enumerate() {
            let [u0, u90] = &fwd.fields[b];
            let g = &grad_h[b];
            let mut gu0 = Array2::zeros(u0.dim());
            let mut gu90 = Array2::zeros(u0.dim());
            for ((i, j), &a) in u0.indexed_iter() {
                let (pi, pj) = (i / r, j / r);
                let c = u90[[i, j]];
                let (g0, g45, g90, g135) =
                    (g[0][[pi, pj]] * inv, g[1][[pi, pj]] * inv, g[2][[pi, pj]] * inv, g[3][[pi, pj]] * inv);
                gu0[[i, j]] = a * (2.0 * g0) + (a - c) * g45 + (a + c) * g135;
                gu90[[i, j]] = c * (2.0 * g90) + (c - a) * g45 + (c + a) * g135;
            }
            let inc = &self.incident[b];
            let k = self.slot[b];
            Zip::from(&mut g_t[k][0]).and(&prop.adjoint(&gu0)).and(inc).for_each(|o, g, e| *o += e.conj() * g);
            Zip::from(&mut g_t[k][1]).and(&prop.adjoint(&gu90)).and(inc).for_each(|o, g, e| *o += e.conj() * g);
        }
        let shape = design.params[0].dim();
        let mut out = [Array2::zeros(shape), Array2::zeros(shape)];
        for (k, [gx, gy]) in g_t.iter().enumerate() {
            let [a, b] = fwd.profiles[k].vjp(design, model, gx, gy)?;
            out[0] += &a;
            out[1] += &b;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use crate::metasurface::{lens_phase_init, random_phase_init, DesignGrid, DesignMode, Symmetry};
    use crate::surrogate::{latent_from_width, train_surrogate, ResponseDataset, SyntheticFdtd, TrainConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LAM: f64 = 532e-9;

    fn small() -> (DesignGrid, PsfConfig) {
        let g = DesignGrid::for_aperture(40e-6, 4).unwrap();
        let cfg = PsfConfig {
            sensor_distance: lattice_distance(g.pitch(), 2e-6, LAM, 64),
            sensor_pitch: 4e-6,
            subsample: 2,
            region_pixels: 32,
            pad_factor: 2.0,
        };
        (g, cfg)
    }

    #[test]
    fn interfere_hand_cases() {
        let one = |v: f64| Array2::from_elem((1, 1), v);
        let (a, b) = interfere(&one(1.0), &one(0.0), &one(1.0), &one(0.0)).unwrap();
        assert_eq!((a[[0, 0]], b[[0, 0]]), (0.0, 2.0));
        let (a, b) = interfere(&one(1.0), &one(std::f64::consts::FRAC_PI_2), &one(1.0), &one(0.0)).unwrap();
        assert!((a[[0, 0]] - 1.0).abs() < 1e-15 && (b[[0, 0]] - 1.0).abs() < 1e-15);
        let (a, b) = interfere(&one(4.0), &one(std::f64::consts::PI), &one(1.0), &one(0.0)).unwrap();
        assert!((a[[0, 0]] - 4.5).abs() < 1e-14 && (b[[0, 0]] - 0.5).abs() < 1e-14);
        assert!(interfere(&one(1.0), &one(0.0), &Array2::zeros((2, 1)), &one(0.0)).is_err());
    }

    #[test]
    fn identical_profiles_give_identical_channels() {
        let (g, cfg) = small();
        let mut d = random_phase_init(g, Symmetry::None, 5).unwrap();
        d.params[1] = d.params[0].clone();
        let p = compute_psf_pair(&d, None, Some(3e-3), LAM, cfg.sensor_distance, cfg.region()).unwrap();
        assert_eq!(p.h0, p.h90);
        assert_eq!(p.psi0, p.psi90);
    }

    #[test]
    fn transmittance_scales_quadratically() {
        let (g, cfg) = small();
        let mut d = random_phase_init(g, Symmetry::None, 6).unwrap();
        d.transmittance = 0.5;
        let a = compute_psf_pair(&d, None, None, LAM, cfg.sensor_distance, cfg.region()).unwrap();
        d.transmittance = 1.0;
        let b = compute_psf_pair(&d, None, None, LAM, cfg.sensor_distance, cfg.region()).unwrap();
        for (x, y) in a.h0.iter().zip(b.h0.iter()) {
            assert!((4.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-30));
        }
    }

    #[test]
    fn lens_focus_lands_on_offset() {
        let g = DesignGrid::for_aperture(0.2e-3, 4).unwrap();
        let s = 2e-6;
        let d = lattice_distance(g.pitch(), s, LAM, 320);
        let off = (24e-6, -16e-6);
        let des = lens_phase_init(g, DesignMode::PhaseOnly, Symmetry::None, d, LAM, [off, (0.0, 0.0)], None).unwrap();
        let cfg = PsfConfig { sensor_distance: d, sensor_pitch: 4e-6, subsample: 2, region_pixels: 128, pad_factor: 2.0 };
        let eng = PsfEngine::new(&des, cfg, vec![BatchEntry { depth: None, wavelength: LAM }]).unwrap();
        let st = eng.forward(&des, None).unwrap().stack;
        let h0 = &st.h[0][0];
        let ((pi, pj), _) = h0.indexed_iter().fold(((0, 0), 0.0), |m, (ix, &v)| if v > m.1 { (ix, v) } else { m });
        let (x, y) = (cfg.pixel_coord(pj), cfg.pixel_coord(pi));
        assert!((x - off.0).abs() <= 4e-6 && (y - off.1).abs() <= 4e-6, "{x} {y}");
    }

    #[test]
    fn full_period_efficiency_is_one() {
        let (g, mut cfg) = small();
        let shape = g.param_shape(Symmetry::None);
        let d = MetasurfaceDesign::new(DesignMode::PhaseOnly, Symmetry::None, g, [Array2::zeros(shape), Array2::zeros(shape)], None)
            .unwrap();
        // q = 64 samples per period at 2 um: the period is 32 sensor pixels.
        cfg.region_pixels = 32;
        let eng = PsfEngine::new(&d, cfg, vec![BatchEntry { depth: None, wavelength: LAM }]).unwrap();
        let st = eng.forward(&d, None).unwrap().stack;
        assert!((st.efficiency(0) - 1.0).abs() < 1e-3, "{}", st.efficiency(0));
        cfg.region_pixels = 16;
        let half = PsfEngine::new(&d, cfg, vec![BatchEntry { depth: None, wavelength: LAM }]).unwrap();
        assert!(half.forward(&d, None).unwrap().stack.efficiency(0) <= st.efficiency(0));
        let mut dark = d.clone();
        dark.transmittance = 0.0;
        assert_eq!(eng.forward(&dark, None).unwrap().stack.efficiency(0), 0.0);
        assert!(focusing_efficiency(&st.h[0][0], &st.h[0][2], 1.0, 0.0).is_err());
    }

    #[test]
    fn resample_cases() {
        let a = Array2::from_shape_fn((8, 8), |(i, j)| (i * 8 + j) as f64);
        assert_eq!(resample_to_sensor(&a, 1e-6, 1e-6).unwrap(), a);
        let c = Array2::from_elem((8, 8), 3.0);
        assert!(resample_to_sensor(&c, 1e-6, 4e-6).unwrap().iter().all(|&v| v == 3.0));
        let p = resample_to_sensor(&a, 1e-6, 2e-6).unwrap();
        assert!((p.sum() * 4.0 - a.sum()).abs() <= 1e-12 * a.sum());
        assert!(matches!(resample_to_sensor(&a, 1e-6, 2.5e-6), Err(Error::Config(_))));
    }

    #[test]
    fn stack_has_rank_three_and_conserves() {
        let (g, cfg) = small();
        let d = random_phase_init(g, Symmetry::None, 2).unwrap();
        let entries = vec![
            BatchEntry { depth: Some(2e-3), wavelength: LAM },
            BatchEntry { depth: None, wavelength: LAM },
        ];
        let st = PsfEngine::new(&d, cfg, entries).unwrap().forward(&d, None).unwrap().stack;
        assert!(st.conservation_residual() < 1e-12);
        assert!(st.rank_ratio() < 1e-6, "{}", st.rank_ratio());
        assert!(st.h.iter().flatten().all(|h| h.iter().all(|&v| v >= 0.0)));
        let t = st.to_tensor();
        assert_eq!(t.shape, vec![2, 4, 32, 32]);
    }

    fn weights(st: &PsfStack, seed: u64) -> Vec<[Array2<f64>; 4]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        st.h.iter().map(|_| [0; 4].map(|_| Array2::from_shape_fn(st.dim(), |_| rng.random_range(-1.0..1.0)))).collect()
    }

    fn dot(st: &PsfStack, w: &[[Array2<f64>; 4]]) -> f64 {
        st.h.iter().zip(w).map(|(h, w)| h.iter().zip(w).map(|(a, b)| (a * b).sum()).sum::<f64>()).sum()
    }

    #[test]
    fn phase_only_backward_matches_finite_differences() {
        let (g, cfg) = small();
        let d0 = random_phase_init(g, Symmetry::None, 11).unwrap();
        let entries = vec![BatchEntry { depth: Some(2e-3), wavelength: LAM }, BatchEntry { depth: None, wavelength: LAM }];
        let eng = PsfEngine::new(&d0, cfg, entries).unwrap();
        let fwd = eng.forward(&d0, None).unwrap();
        let w = weights(&fwd.stack, 1);
        let [gx, gy] = eng.backward(&fwd, &d0, None, &w).unwrap();
        let grad: Vec<f64> = gx.iter().chain(gy.iter()).copied().collect();
        let x0 = d0.flat_params();
        let coords: Vec<usize> = (0..x0.len()).filter(|&k| grad[k] != 0.0).step_by(37).take(20).collect();
        let err = check_gradient(
            |x| {
                let mut d = d0.clone();
                d.set_flat_params(x);
                dot(&eng.forward(&d, None).unwrap().stack, &w)
            },
            &x0,
            &grad,
            &coords,
            1e-6,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn h45_pixel_gradient_wrt_cell_latent() {
        let data = ResponseDataset::synthetic_grid(&SyntheticFdtd::default(), 8, 3).unwrap();
        let tc = TrainConfig { hidden: [16, 16], epochs: 3, batch_size: 32, ..TrainConfig::default() };
        let (model, _) = train_surrogate(&data, &tc).unwrap();
        let (g, cfg) = small();
        let shape = g.param_shape(Symmetry::None);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut lat = || Array2::from_shape_fn(shape, |_| latent_from_width(rng.random_range(90e-9..270e-9)).unwrap());
        let d0 = MetasurfaceDesign::new(DesignMode::CellBased, Symmetry::None, g, [lat(), lat()], None).unwrap();
        let eng = PsfEngine::new(&d0, cfg, vec![BatchEntry { depth: Some(2e-3), wavelength: LAM }]).unwrap();
        let fwd = eng.forward(&d0, Some(&model)).unwrap();
        let (pi, pj) = (16, 17);
        let mut w = vec![[0; 4].map(|_| Array2::zeros(fwd.stack.dim()))];
        w[0][1][[pi, pj]] = 1.0;
        let [gx, gy] = eng.backward(&fwd, &d0, Some(&model), &w).unwrap();
        let grad: Vec<f64> = gx.iter().chain(gy.iter()).copied().collect();
        let x0 = d0.flat_params();
        let mut order: Vec<usize> = (0..x0.len()).collect();
        order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
        let coords: Vec<usize> = order.into_iter().take(20).collect();
        let err = check_gradient(
            |x| {
                let mut d = d0.clone();
                d.set_flat_params(x);
                eng.forward(&d, Some(&model)).unwrap().stack.h[0][1][[pi, pj]]
            },
            &x0,
            &grad,
            &coords,
            1e-5,
        );
        assert!(err < 1e-3, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn interference_conserves(seed in 0u64..1000, depth in 1e-3f64..1e-2) {
            let (g, cfg) = small();
            let d = random_phase_init(g, Symmetry::None, seed).unwrap();
            let eng = PsfEngine::new(&d, cfg, vec![BatchEntry { depth: Some(depth), wavelength: LAM }]).unwrap();
            let st = eng.forward(&d, None).unwrap().stack;
            prop_assert!(st.conservation_residual() < 1e-12);
            prop_assert!(st.h[0].iter().all(|h| h.iter().all(|&v| v >= 0.0)));
        }
    }
}
