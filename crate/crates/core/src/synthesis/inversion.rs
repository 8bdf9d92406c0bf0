use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::adam::AdamMoments;
use crate::error::{Error, Result};
use crate::metasurface::{DesignMode, MetasurfaceDesign};
use crate::psf::{PsfEngine, N_CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionLoss {
    /// `1 - cos(h, target)`: insensitive to scale, so light may leave the region.
    Cosine,
    /// `|h - target|_1 / |target|_1` against a target carrying the full
    /// incident energy of one polarization.
    L1,
}

#[derive(Clone, Debug)]
pub struct InversionReport {
    pub design: MetasurfaceDesign,
    /// `(step, loss, cosine similarity, in-region normalized L1 error, efficiency)`.
    pub trace: Vec<(u64, f64, f64, f64, f64)>,
    pub similarity: f64,
    pub l1_error: f64,
    pub efficiency: f64,
}

#[derive(Clone, Debug)]
pub struct JointReport {
    pub design: MetasurfaceDesign,
    /// Cosine similarity for the 0°, 90° and 45° targets.
    pub similarities: [f64; 3],
    pub final_loss: f64,
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |s, x, y| s + x * y)
}

fn norm(a: &Array2<f64>) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn cosine_similarity(h: &Array2<f64>, t: &Array2<f64>) -> f64 {
    let d = norm(h) * norm(t);
    if d > 0.0 {
        dot(h, t) / d
    } else {
        0.0
    }
}

/// `1 - cos(h, t)` and its gradient w.r.t. `h`.
fn cosine_loss(h: &Array2<f64>, t: &Array2<f64>) -> (f64, Array2<f64>) {
    let (nh, nt) = (norm(h).max(1e-300), norm(t));
    let c = dot(h, t) / (nh * nt);
    let g = Zip::from(h).and(t).map_collect(|&hv, &tv| -(tv / (nh * nt) - c * hv / (nh * nh)));
    (1.0 - c, g)
}

fn l1_loss(h: &Array2<f64>, t: &Array2<f64>) -> (f64, Array2<f64>) {
    let nt: f64 = t.iter().map(|v| v.abs()).sum();
    let mut v = 0.0;
    let g = Zip::from(h).and(t).map_collect(|&a, &b| {
        v += (a - b).abs();
        if a > b {
            1.0 / nt
        } else if a < b {
            -1.0 / nt
        } else {
            0.0
        }
    });
    (v / nt, g)
}

fn l1_error(h: &Array2<f64>, t: &Array2<f64>) -> f64 {
    l1_loss(h, t).0
}

fn check_engine(engine: &PsfEngine, design: &MetasurfaceDesign, dim: (usize, usize)) -> Result<()> {
    if design.mode != DesignMode::PhaseOnly {
        return Err(Error::Config("phase inversion works on phase-only designs".into()));
    }
    if engine.entries().len() != 1 {
        return Err(Error::Config("phase inversion uses a single-entry PSF batch".into()));
    }
    let n = engine.config().region_pixels;
    if dim != (n, n) {
        return Err(Error::Shape(format!("target is {dim:?}, region is {n}x{n} pixels")));
    }
    Ok(())
}

/// Recover an optic phase whose 0° PSF approximates `target` (Adam with the
/// usual step decay). Only the x-polarization parameters move.
pub fn phase_inversion(
    engine: &PsfEngine,
    target: &Array2<f64>,
    loss: InversionLoss,
    init: MetasurfaceDesign,
    steps: usize,
    lr: f64,
    log_every: usize,
) -> Result<InversionReport> {
    check_engine(engine, &init, target.dim())?;
    if target.iter().any(|v| !(*v >= 0.0)) || target.sum() <= 0.0 {
        return Err(Error::Domain("target intensity must be non-negative and not identically zero".into()));
    }
    let fwd0 = engine.forward(&init, None)?;
    let area = fwd0.stack.pixel_area;
    let target = match loss {
        InversionLoss::Cosine => target.clone(),
        InversionLoss::L1 => target * (0.5 * fwd0.stack.incident_energy[0] / (target.sum() * area)),
    };
    let mut design = init;
    let n = design.params[0].len();
    let mut adam = AdamMoments::new(n);
    let mut trace = Vec::new();
    let log_every = log_every.max(1) as u64;
    let zero = Array2::zeros(target.dim());
    let mut step = 0u64;
    loop {
        let fwd = engine.forward(&design, None)?;
        let h0 = &fwd.stack.h[0][0];
        let (value, g) = match loss {
            InversionLoss::Cosine => cosine_loss(h0, &target),
            InversionLoss::L1 => l1_loss(h0, &target),
        };
        if !value.is_finite() {
            return Err(Error::Numerical(format!("phase inversion loss became non-finite at step {step}")));
        }
        let done = step as usize == steps;
        if step % log_every == 0 || done {
            trace.push((step, value, cosine_similarity(h0, &target), l1_error(h0, &target), fwd.stack.efficiency(0)));
        }
        if done {
            return Ok(InversionReport {
                similarity: cosine_similarity(h0, &target),
                l1_error: l1_error(h0, &target),
                efficiency: fwd.stack.efficiency(0),
                design,
                trace,
            });
        }
        let grads = [g, zero.clone(), zero.clone(), zero.clone()];
        let [gx, _] = engine.backward(&fwd, &design, None, std::slice::from_ref(&grads))?;
        let mut x: Vec<f64> = design.params[0].iter().copied().collect();
        let gv: Vec<f64> = gx.iter().copied().collect();
        step += 1;
        adam.step(&mut x, &gv, lr * 0.995f64.powf((step / 10) as f64), step, None);
        for (p, v) in design.params[0].iter_mut().zip(x) {
            *p = v;
        }
    }
}

/// Jointly optimize both phase profiles so that the 0°, 90° and 45° PSFs
/// approximate their targets under the cosine loss, weighted by `weights`.
pub fn joint_interference_design(
    engine: &PsfEngine,
    targets: [&Array2<f64>; 3],
    weights: [f64; 3],
    init: MetasurfaceDesign,
    steps: usize,
    lr: f64,
) -> Result<JointReport> {
    for t in targets {
        check_engine(engine, &init, t.dim())?;
    }
    let channel = [0usize, 2, 1];
    let mut design = init;
    let mut adam = AdamMoments::new(design.n_params());
    let dim = targets[0].dim();
    let mut step = 0u64;
    loop {
        let fwd = engine.forward(&design, None)?;
        let h = &fwd.stack.h[0];
        let mut grads: [Array2<f64>; N_CHANNELS] = [0; 4].map(|_| Array2::zeros(dim));
        let mut total = 0.0;
        let mut sims = [0.0; 3];
        for k in 0..3 {
            let (v, g) = cosine_loss(&h[channel[k]], targets[k]);
            sims[k] = 1.0 - v;
            if weights[k] != 0.0 {
                total += weights[k] * v;
                grads[channel[k]].scaled_add(weights[k], &g);
            }
        }
        if !total.is_finite() {
            return Err(Error::Numerical(format!("joint design loss became non-finite at step {step}")));
        }
        if step as usize == steps {
            return Ok(JointReport { design, similarities: sims, final_loss: total });
        }
        let [gx, gy] = engine.backward(&fwd, &design, None, std::slice::from_ref(&grads))?;
        let g: Vec<f64> = gx.iter().chain(gy.iter()).copied().collect();
        let mut x = design.flat_params();
        step += 1;
        adam.step(&mut x, &g, lr * 0.995f64.powf((step / 10) as f64), step, None);
        design.set_flat_params(&x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metasurface::{lens_phase_init, random_phase_init, DesignGrid, Symmetry};
    use crate::psf::{lattice_distance, BatchEntry, PsfConfig};

    const LAM: f64 = 532e-9;

    fn engine() -> (DesignGrid, PsfEngine, f64) {
        let g = DesignGrid::for_aperture(60e-6, 4).unwrap();
        let d = lattice_distance(g.pitch(), 2e-6, LAM, 96);
        let cfg = PsfConfig { sensor_distance: d, sensor_pitch: 4e-6, subsample: 2, region_pixels: 24, pad_factor: 2.0 };
        let init = random_phase_init(g, Symmetry::None, 0).unwrap();
        (g, PsfEngine::new(&init, cfg, vec![BatchEntry { depth: None, wavelength: LAM }]).unwrap(), d)
    }

    fn disk(n: usize, r: f64) -> Array2<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        Array2::from_shape_fn((n, n), |(i, j)| if ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt() <= r { 1.0 } else { 0.0 })
    }

    #[test]
    fn lens_intensity_is_a_fixed_point() {
        let (g, eng, d) = engine();
        let lens = lens_phase_init(g, DesignMode::PhaseOnly, Symmetry::None, d, LAM, [(0.0, 0.0); 2], None).unwrap();
        let target = eng.forward(&lens, None).unwrap().stack.h[0][0].clone();
        let r = phase_inversion(&eng, &target, InversionLoss::Cosine, lens, 0, 1e-2, 1).unwrap();
        assert!(r.trace[0].1 < 1e-12);
    }

    #[test]
    fn l1_disk_error_decreases() {
        let (g, eng, d) = engine();
        let lens = lens_phase_init(g, DesignMode::PhaseOnly, Symmetry::None, d, LAM, [(0.0, 0.0); 2], None).unwrap();
        let r = phase_inversion(&eng, &disk(24, 5.0), InversionLoss::L1, lens, 150, 5e-2, 30).unwrap();
        let errs: Vec<f64> = r.trace.iter().map(|t| t.3).collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{errs:?}");
        assert!(errs.last().unwrap() < &(0.8 * errs[0]));
    }

    #[test]
    fn seeds_give_distinct_solutions() {
        let (g, eng, _) = engine();
        let t = disk(24, 5.0);
        let a = phase_inversion(&eng, &t, InversionLoss::Cosine, random_phase_init(g, Symmetry::None, 1).unwrap(), 150, 5e-2, 50).unwrap();
        let b = phase_inversion(&eng, &t, InversionLoss::Cosine, random_phase_init(g, Symmetry::None, 2).unwrap(), 150, 5e-2, 50).unwrap();
        assert!(a.similarity > 0.8 && b.similarity > 0.8, "{} {}", a.similarity, b.similarity);
        let mask = g.mask();
        let (mut re, mut n) = (0.0, 0.0);
        for ((p, q), m) in a.design.params[0].iter().zip(b.design.params[0].iter()).zip(mask.iter()) {
            if *m > 0.0 {
                re += (p - q).cos();
                n += 1.0;
            }
        }
        assert!(re / n < 0.99);
    }

    #[test]
    fn zero_h45_weight_decouples() {
        let (g, eng, _) = engine();
        let t = disk(24, 4.0);
        let init = random_phase_init(g, Symmetry::None, 3).unwrap();
        let joint = joint_interference_design(&eng, [&t, &t, &t], [1.0, 0.0, 0.0], init.clone(), 40, 5e-2).unwrap();
        let single = phase_inversion(&eng, &t, InversionLoss::Cosine, init.clone(), 40, 5e-2, 40).unwrap();
        assert_eq!(joint.design.params[0], single.design.params[0]);
        assert_eq!(joint.design.params[1], init.params[1]);
    }
}
