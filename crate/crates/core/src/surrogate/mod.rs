//! Cell response model: nanofin widths and wavelength to per-polarization
//! complex transmittance.

mod dataset;
mod mlp;
mod synthetic;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{ResponseDataset, ResponseSample};
pub use mlp::{train_surrogate, SurrogateEval, SurrogateModel, TrainConfig, TrainReport};
pub use synthetic::{synthetic_fdtd, SyntheticFdtd, SyntheticFdtdConfig};

pub const WIDTH_MIN: f64 = 60e-9;
pub const WIDTH_MAX: f64 = 300e-9;
pub const WAVELENGTH_MIN: f64 = 300e-9;
pub const WAVELENGTH_MAX: f64 = 750e-9;
pub const CELL_PITCH: f64 = 350e-9;

/// Nanofin cross-section in metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub w_x: f64,
    pub w_y: f64,
}

impl CellParams {
    pub fn new(w_x: f64, w_y: f64) -> Result<Self> {
        let c = Self { w_x, w_y };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let tol = 1e-15;
        for (name, w) in [("w_x", self.w_x), ("w_y", self.w_y)] {
            if !(w >= WIDTH_MIN - tol && w <= WIDTH_MAX + tol) {
                return Err(Error::Domain(format!("{name} = {w:e} m outside [60, 300] nm")));
            }
        }
        Ok(())
    }
}

/// Per-polarization transmittance and phase, phase kept as a unit (cos, sin) pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpticalResponse {
    pub t_x: f64,
    pub t_y: f64,
    pub phi_x: (f64, f64),
    pub phi_y: (f64, f64),
}

impl OpticalResponse {
    pub fn from_phases(t_x: f64, phi_x: f64, t_y: f64, phi_y: f64) -> Self {
        Self { t_x, t_y, phi_x: (phi_x.cos(), phi_x.sin()), phi_y: (phi_y.cos(), phi_y.sin()) }
    }

    pub fn field_x(&self) -> Complex64 {
        Complex64::new(self.t_x * self.phi_x.0, self.t_x * self.phi_x.1)
    }

    pub fn field_y(&self) -> Complex64 {
        Complex64::new(self.t_y * self.phi_y.0, self.t_y * self.phi_y.1)
    }

    /// `(Re A_x, Im A_x, Re A_y, Im A_y)`.
    pub fn as_fields(&self) -> [f64; 4] {
        let (a, b) = (self.field_x(), self.field_y());
        [a.re, a.im, b.re, b.im]
    }

    pub fn phase_x(&self) -> f64 {
        self.phi_x.1.atan2(self.phi_x.0)
    }

    pub fn phase_y(&self) -> f64 {
        self.phi_y.1.atan2(self.phi_y.0)
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unconstrained latent to width: `w_min + (w_max - w_min) * logistic(latent)`.
pub fn reparameterize(latent: (f64, f64)) -> CellParams {
    let f = |l: f64| WIDTH_MIN + (WIDTH_MAX - WIDTH_MIN) * logistic(l);
    CellParams { w_x: f(latent.0), w_y: f(latent.1) }
}

/// `dw/dlatent` for one coordinate.
pub fn reparameterize_derivative(latent: f64) -> f64 {
    let s = logistic(latent);
    (WIDTH_MAX - WIDTH_MIN) * s * (1.0 - s)
}

/// Inverse of [`reparameterize`] for widths strictly inside the box.
pub fn latent_from_width(w: f64) -> Result<f64> {
    let u = (w - WIDTH_MIN) / (WIDTH_MAX - WIDTH_MIN);
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("width {w:e} m is not strictly inside (60, 300) nm")));
    }
    Ok((u / (1.0 - u)).ln())
}
