//! Multi-image synthesis: losses, the overlap regularizer, mSBR, and the
//! joint optimizer over optic parameters and digital channel weights.

mod adam;
mod inversion;
mod losses;
mod nmf;
mod optimize;

pub use adam::{AdamMoments, OptimState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use inversion::{joint_interference_design, phase_inversion, InversionLoss, InversionReport, JointReport};
pub use losses::{
    filter_loss, filter_loss_grad, image_loss, image_loss_grad, msbr, msbr_stack, normalized_l1_error, regularizer,
    regularizer_grad, stack_epsilon, ImageObjective, StackGrad,
};
pub use nmf::{semi_nmf_baseline, SemiNmf};
pub use optimize::{
    auto_kappa, least_squares_alpha, optimize, sweep_c1, Objective, OptimConfig, OptimOutcome, OptimStatus, Problem,
    RegularizerConfig, TraceRow, C1_SWEEP,
};

use crate::error::{Error, Result};

/// Digital channel weights: one 4-vector per target, plus an activity mask
/// shared by all targets. Masked entries are held at exactly zero.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthesisWeights {
    pub alpha: Vec<[f64; 4]>,
    pub active: [bool; 4],
}

impl SynthesisWeights {
    pub fn new(alpha: Vec<[f64; 4]>, active: [bool; 4]) -> Result<Self> {
        let w = Self { alpha, active };
        w.validate()?;
        Ok(w)
    }

    pub fn unmasked(alpha: Vec<[f64; 4]>) -> Result<Self> {
        Self::new(alpha, [true; 4])
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() {
            return Err(Error::Config("at least one target weight vector is required".into()));
        }
        for a in &self.alpha {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("weights must be finite".into()));
            }
            for c in 0..4 {
                if !self.active[c] && a[c] != 0.0 {
                    return Err(Error::Domain(format!("masked channel {c} carries a nonzero weight")));
                }
            }
        }
        Ok(())
    }

    pub fn targets(&self) -> usize {
        self.alpha.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.alpha.iter().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        for (i, a) in self.alpha.iter_mut().enumerate() {
            for c in 0..4 {
                a[c] = if self.active[c] { v[4 * i + c] } else { 0.0 };
            }
        }
    }
}

/// Steered weights `alpha1 cos(theta) + alpha2 sin(theta)`.
pub fn steer_weights(alpha1: &[f64; 4], alpha2: &[f64; 4], theta: f64) -> [f64; 4] {
    let (s, c) = theta.sin_cos();
    [0, 1, 2, 3].map(|k| alpha1[k] * c + alpha2[k] * s)
}
