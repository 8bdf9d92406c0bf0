//! Incoherent image formation, EMVA-style noise, and the 2x2 polarization mosaic.

use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::convolve_same_reflect;

/// Channel order used everywhere: 0, 45, 90, 135 degrees.
pub const CHANNEL_ANGLES_DEG: [u32; 4] = [0, 45, 90, 135];

/// Channel index sampled at `(row % 2, col % 2)`: `[[0, 45], [135, 90]]`.
pub const MOSAIC_PATTERN: [[usize; 2]; 2] = [[0, 1], [3, 2]];

/// Non-negative radiance, one slice per (depth, wavelength) batch entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub slices: Vec<Array2<f64>>,
}

impl Scene {
    pub fn new(slices: Vec<Array2<f64>>) -> Result<Self> {
        let Some(first) = slices.first() else {
            return Err(Error::Domain("scene has no slices".into()));
        };
        let dim = first.dim();
        for s in &slices {
            if s.dim() != dim {
                return Err(Error::Shape(format!("scene slices {:?} vs {:?}", s.dim(), dim)));
            }
            if s.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Domain("scene radiance must be finite and non-negative".into()));
            }
        }
        Ok(Self { slices })
    }

    /// Piecewise-planar scene: pixel `p` of `radiance` belongs to depth slice
    /// `labels[p]`. Each wavelength in `spectrum` scales the radiance; slices
    /// are ordered depth-major.
    pub fn from_depth_labels(
        radiance: &Array2<f64>,
        labels: &Array2<usize>,
        depths: usize,
        spectrum: &[f64],
    ) -> Result<Self> {
        if radiance.dim() != labels.dim() {
            return Err(Error::Shape("depth labels do not match the radiance map".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= depths) {
            return Err(Error::Domain(format!("depth label {l} out of range (< {depths})")));
        }
        let mut slices = Vec::with_capacity(depths * spectrum.len());
        for d in 0..depths {
            for &w in spectrum {
                slices.push(Zip::from(radiance).and(labels).map_collect(|&r, &l| if l == d { r * w } else { 0.0 }));
            }
        }
        Self::new(slices)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.slices[0].dim()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { slices: self.slices.iter().map(|x| x * s).collect() }
    }
}

/// `sum_b scene_b * h_b` with reflect padding; output has the scene's size.
pub fn render_channel(scene: &Scene, psf_slices: &[Array2<f64>]) -> Result<Array2<f64>> {
    if scene.slices.len() != psf_slices.len() {
        return Err(Error::Domain(format!(
            "scene has {} slices but the PSF has {}",
            scene.slices.len(),
            psf_slices.len()
        )));
    }
    let mut out = Array2::zeros(scene.dim());
    for (s, h) in scene.slices.iter().zip(psf_slices) {
        out += &convolve_same_reflect(s, h)?;
    }
    Ok(out)
}

/// Render all four channels; `psf[c][b]` is channel `c`, batch slice `b`.
pub fn render_channels(scene: &Scene, psf: &[Vec<Array2<f64>>; 4]) -> Result<[Array2<f64>; 4]> {
    Ok([
        render_channel(scene, &psf[0])?,
        render_channel(scene, &psf[1])?,
        render_channel(scene, &psf[2])?,
        render_channel(scene, &psf[3])?,
    ])
}

/// Unpolarized light through a linear polarizer keeps half its intensity.
pub fn front_polarizer(image: &Array2<f64>) -> Array2<f64> {
    image * 0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    #[serde(default = "defaults::pixel_pitch")]
    pub pixel_pitch: f64,
    #[serde(default = "defaults::qe")]
    pub quantum_efficiency: f64,
    #[serde(default = "defaults::full_well")]
    pub full_well: f64,
    #[serde(default = "defaults::read_noise")]
    pub read_noise_sigma: f64,
    #[serde(default = "defaults::bit_depth")]
    pub bit_depth: u32,
    /// DN per electron; `None` maps the full well onto the full code range.
    #[serde(default)]
    pub gain: Option<f64>,
    /// Peak shot+read+quantization SNR in dB; `None` treats the input as photons.
    #[serde(default)]
    pub target_psnr: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn pixel_pitch() -> f64 {
        4e-6
    }
    pub fn qe() -> f64 {
        0.6
    }
    pub fn full_well() -> f64 {
        1e5
    }
    pub fn read_noise() -> f64 {
        2.5
    }
    pub fn bit_depth() -> u32 {
        12
    }
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            pixel_pitch: defaults::pixel_pitch(),
            quantum_efficiency: defaults::qe(),
            full_well: defaults::full_well(),
            read_noise_sigma: defaults::read_noise(),
            bit_depth: defaults::bit_depth(),
            gain: None,
            target_psnr: Some(30.0),
            seed: 0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("sensor.{name} must be positive, got {v}")))
            }
        };
        pos("pixel_pitch", self.pixel_pitch)?;
        pos("quantum_efficiency", self.quantum_efficiency)?;
        if self.quantum_efficiency > 1.0 {
            return Err(Error::Config("sensor.quantum_efficiency must be at most 1".into()));
        }
        if !(self.full_well > 0.0) {
            return Err(Error::Config("sensor.full_well must be positive".into()));
        }
        if !(self.read_noise_sigma >= 0.0) {
            return Err(Error::Config("sensor.read_noise_sigma must be non-negative".into()));
        }
        if ![8, 10, 12, 16].contains(&self.bit_depth) {
            return Err(Error::Config(format!("sensor.bit_depth {} not in {{8,10,12,16}}", self.bit_depth)));
        }
        if let Some(g) = self.gain {
            pos("gain", g)?;
        }
        if let Some(p) = self.target_psnr {
            if !p.is_finite() {
                return Err(Error::Config("sensor.target_psnr must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn max_dn(&self) -> f64 {
        ((1u64 << self.bit_depth) - 1) as f64
    }

    pub fn effective_gain(&self) -> f64 {
        self.gain.unwrap_or(self.max_dn() / self.full_well)
    }

    /// Quantization noise expressed in electrons.
    pub fn quantization_sigma_e(&self) -> f64 {
        1.0 / (self.effective_gain() * 12f64.sqrt())
    }

    /// Mean electrons at which `mu / sqrt(mu + read^2 + quant^2)` equals the
    /// linear SNR for `psnr_db`.
    pub fn electrons_for_psnr(&self, psnr_db: f64) -> f64 {
        let s2 = 10f64.powf(psnr_db / 10.0);
        let var0 = self.read_noise_sigma.powi(2) + self.quantization_sigma_e().powi(2);
        0.5 * (s2 + (s2 * s2 + 4.0 * s2 * var0).sqrt())
    }
}

/// Noisy raw frame plus the factor mapping DN back to input units.
#[derive(Clone, Debug)]
pub struct NoisyFrame {
    pub dn: Array2<f64>,
    /// Photons per input unit applied before the shot-noise draw.
    pub photon_scale: f64,
    /// DN per input unit in expectation (`photon_scale * QE * gain`).
    pub dn_per_unit: f64,
}

impl NoisyFrame {
    pub fn to_input_units(&self) -> Array2<f64> {
        &self.dn / self.dn_per_unit
    }
}

/// Shot noise, read noise, full-well clip, gain and quantization.
///
/// With `target_psnr` set, the image is scaled so that its brightest pixel
/// reaches that peak SNR; otherwise it is taken to be in photons already.
/// `peak` overrides the brightest-pixel reference (useful when several
/// frames must share one exposure).
pub fn apply_noise(image: &Array2<f64>, config: &SensorConfig, peak: Option<f64>) -> Result<NoisyFrame> {
    config.validate()?;
    if image.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Domain("noise model input must be non-negative".into()));
    }
    let qe = config.quantum_efficiency;
    let photon_scale = match config.target_psnr {
        Some(p) => {
            let peak = peak.unwrap_or_else(|| image.fold(0.0f64, |m, &v| m.max(v)));
            if peak > 0.0 {
                config.electrons_for_psnr(p) / (qe * peak)
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let gain = config.effective_gain();
    let max_dn = config.max_dn();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let read = Normal::new(0.0, config.read_noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let dn = image.mapv(|v| {
        let mean_e = qe * photon_scale * v;
        let shot = if mean_e > 0.0 {
            Poisson::new(mean_e).map(|d| d.sample(&mut rng)).unwrap_or(mean_e)
        } else {
            0.0
        };
        let e = (shot + read.sample(&mut rng)).clamp(0.0, config.full_well);
        (e * gain).round().clamp(0.0, max_dn)
    });
    Ok(NoisyFrame { dn, photon_scale, dn_per_unit: photon_scale * qe * gain })
}

/// Raw frame from a polarization-mosaic sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MosaicFrame {
    pub pixels: Array2<f64>,
}

pub fn mosaic(channels: &[Array2<f64>; 4]) -> Result<MosaicFrame> {
    let dim = channels[0].dim();
    if channels.iter().any(|c| c.dim() != dim) {
        return Err(Error::Shape("mosaic channels differ in shape".into()));
    }
    if dim.0 % 2 != 0 || dim.1 % 2 != 0 {
        return Err(Error::Shape(format!("mosaic needs even dimensions, got {dim:?}")));
    }
    let pixels = Array2::from_shape_fn(dim, |(i, j)| channels[MOSAIC_PATTERN[i % 2][j % 2]][[i, j]]);
    Ok(MosaicFrame { pixels })
}

/// Fill each channel from its site in the same 2x2 tile.
pub fn demosaic_nearest(frame: &MosaicFrame) -> Result<[Array2<f64>; 4]> {
    let (r, c) = frame.pixels.dim();
    if r % 2 != 0 || c % 2 != 0 {
        return Err(Error::Shape(format!("mosaic frame must have even dimensions, got {r}x{c}")));
    }
    let mut site = [(0usize, 0usize); 4];
    for (dr, row) in MOSAIC_PATTERN.iter().enumerate() {
        for (dc, &ch) in row.iter().enumerate() {
            site[ch] = (dr, dc);
        }
    }
    let p = &frame.pixels;
    let build = |ch: usize| {
        let (dr, dc) = site[ch];
        Array2::from_shape_fn((r, c), |(i, j)| p[[(i & !1) + dr, (j & !1) + dc]])
    };
    Ok([build(0), build(1), build(2), build(3)])
}

/// Per-pixel `sum_c alpha_c * image_c`.
pub fn synthesize_image(channels: &[Array2<f64>; 4], alpha: &[f64; 4]) -> Result<Array2<f64>> {
    let dim = channels[0].dim();
    if channels.iter().any(|c| c.dim() != dim) {
        return Err(Error::Shape("channels differ in shape".into()));
    }
    let mut out = Array2::zeros(dim);
    for (c, &a) in channels.iter().zip(alpha) {
        out.scaled_add(a, c);
    }
    Ok(out)
}

/// `10 log10(peak^2 / mse)` with `peak` the reference's max absolute value.
pub fn psnr(reference: &Array2<f64>, test: &Array2<f64>) -> f64 {
    let peak = reference.fold(0.0f64, |m, &v| m.max(v.abs()));
    let mse = Zip::from(reference).and(test).fold(0.0, |acc, a, b| acc + (a - b).powi(2)) / reference.len() as f64;
    10.0 * (peak * peak / mse).log10()
}
