use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Container;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments for one flat variable vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One Adam update at (1-based) step `t`. Entries with `frozen[k]` are left untouched.
    pub fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64, t: u64, frozen: Option<&[bool]>) {
        assert_eq!(x.len(), self.m.len());
        assert_eq!(g.len(), self.m.len());
        let c1 = 1.0 - ADAM_BETA1.powf(t as f64);
        let c2 = 1.0 - ADAM_BETA2.powf(t as f64);
        for k in 0..x.len() {
            if frozen.is_some_and(|f| f[k]) {
                continue;
            }
            self.m[k] = ADAM_BETA1 * self.m[k] + (1.0 - ADAM_BETA1) * g[k];
            self.v[k] = ADAM_BETA2 * self.v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            x[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Optimizer state for the design parameters and the digital weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub design: AdamMoments,
    pub weights: AdamMoments,
    pub step: u64,
    pub lr_design: f64,
    pub lr_weights: f64,
    /// Learning rates are multiplied by `decay` every `decay_every` steps.
    pub decay: f64,
    pub decay_every: u64,
    pub seed: u64,
}

impl OptimState {
    pub fn new(n_design: usize, n_weights: usize, lr_design: f64, lr_weights: f64, decay: f64, decay_every: u64, seed: u64) -> Self {
        Self {
            design: AdamMoments::new(n_design),
            weights: AdamMoments::new(n_weights),
            step: 0,
            lr_design,
            lr_weights,
            decay,
            decay_every: decay_every.max(1),
            seed,
        }
    }

    pub fn lr_scale(&self) -> f64 {
        self.decay.powf((self.step / self.decay_every) as f64)
    }

    pub fn write_into(&self, c: &mut Container) {
        let n = |v: &[f64]| vec![v.len()];
        c.put("adam_design_m", n(&self.design.m), self.design.m.clone());
        c.put("adam_design_v", n(&self.design.v), self.design.v.clone());
        c.put("adam_weights_m", n(&self.weights.m), self.weights.m.clone());
        c.put("adam_weights_v", n(&self.weights.v), self.weights.v.clone());
        c.meta["optim"] = serde_json::json!({
            "step": self.step,
            "lr_design": self.lr_design,
            "lr_weights": self.lr_weights,
            "decay": self.decay,
            "decay_every": self.decay_every,
            "seed": self.seed,
        });
    }

    pub fn read_from(c: &Container) -> Result<Self> {
        let o = c.meta.get("optim").ok_or_else(|| Error::Format("checkpoint lacks optimizer state".into()))?;
        let num = |k: &str| o.get(k).and_then(|v| v.as_f64()).ok_or_else(|| Error::Format(format!("optimizer state lacks {k}")));
        let int = |k: &str| o.get(k).and_then(|v| v.as_u64()).ok_or_else(|| Error::Format(format!("optimizer state lacks {k}")));
        let vec = |k: &str| c.get(k).map(|(_, d)| d.clone());
        let s = Self {
            design: AdamMoments { m: vec("adam_design_m")?, v: vec("adam_design_v")? },
            weights: AdamMoments { m: vec("adam_weights_m")?, v: vec("adam_weights_v")? },
            step: int("step")?,
            lr_design: num("lr_design")?,
            lr_weights: num("lr_weights")?,
            decay: num("decay")?,
            decay_every: int("decay_every")?.max(1),
            seed: int("seed")?,
        };
        if s.design.m.len() != s.design.v.len() || s.weights.m.len() != s.weights.v.len() {
            return Err(Error::Format("optimizer moment shapes disagree".into()));
        }
        Ok(s)
    }
}
