//! Deterministic analytic replacement for an FDTD sweep of nanofin cells.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{logistic, CellParams, OpticalResponse, WAVELENGTH_MAX, WAVELENGTH_MIN};
use crate::error::{Error, Result};

const DEFAULT_CONFIG: &str = include_str!("../../data/synthetic_fdtd_v1.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dip {
    pub amplitude: f64,
    pub width: f64,
    pub center: f64,
    pub per_w_same: f64,
    pub per_w_cross: f64,
}

/// Generator constants; lengths in nanometres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFdtdConfig {
    pub version: u32,
    pub fin_height: f64,
    pub n_min: f64,
    pub n_max: f64,
    pub rho_center: f64,
    pub rho_scale: f64,
    pub t_min: f64,
    pub width_min: f64,
    pub width_max: f64,
    pub wavelength_min: f64,
    pub wavelength_max: f64,
    pub dips: Vec<Dip>,
}

impl SyntheticFdtdConfig {
    pub fn shipped() -> &'static SyntheticFdtdConfig {
        static CFG: OnceLock<SyntheticFdtdConfig> = OnceLock::new();
        CFG.get_or_init(|| toml::from_str(DEFAULT_CONFIG).expect("shipped generator config parses"))
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticFdtd {
    pub config: SyntheticFdtdConfig,
}

impl Default for SyntheticFdtd {
    fn default() -> Self {
        Self { config: SyntheticFdtdConfig::shipped().clone() }
    }
}

impl SyntheticFdtd {
    /// Effective index at width-to-wavelength ratio `rho`.
    pub fn n_eff(&self, rho: f64) -> f64 {
        let c = &self.config;
        c.n_min + (c.n_max - c.n_min) * logistic((rho - c.rho_center) / c.rho_scale)
    }

    fn phase(&self, w_nm: f64, lam_nm: f64) -> f64 {
        2.0 * PI * self.n_eff(w_nm / lam_nm) * self.config.fin_height / lam_nm
    }

    fn transmittance(&self, same_nm: f64, cross_nm: f64, lam_nm: f64) -> f64 {
        let mut t = 1.0;
        for d in &self.config.dips {
            let c = d.center + d.per_w_same * same_nm + d.per_w_cross * cross_nm;
            let x = (lam_nm - c) / d.width;
            t -= d.amplitude / (1.0 + x * x);
        }
        t.clamp(self.config.t_min, 1.0)
    }

    pub fn response(&self, cell: CellParams, wavelength: f64) -> Result<OpticalResponse> {
        cell.validate()?;
        if !(wavelength >= WAVELENGTH_MIN * (1.0 - 1e-12) && wavelength <= WAVELENGTH_MAX * (1.0 + 1e-12)) {
            return Err(Error::Domain(format!("wavelength {wavelength:e} m outside [300, 750] nm")));
        }
        let (wx, wy, lam) = (cell.w_x * 1e9, cell.w_y * 1e9, wavelength * 1e9);
        Ok(OpticalResponse::from_phases(
            self.transmittance(wx, wy, lam),
            self.phase(wx, lam),
            self.transmittance(wy, wx, lam),
            self.phase(wy, lam),
        ))
    }

    /// Unwrapped phase for polarization x (used by lookup inversion).
    pub fn unwrapped_phase(&self, w: f64, wavelength: f64) -> f64 {
        self.phase(w * 1e9, wavelength * 1e9)
    }
}

/// Response of the shipped generator.
pub fn synthetic_fdtd(cell: CellParams, wavelength: f64) -> Result<OpticalResponse> {
    static GEN: OnceLock<SyntheticFdtd> = OnceLock::new();
    GEN.get_or_init(SyntheticFdtd::default).response(cell, wavelength)
}
