use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::adam::OptimState;
use super::losses::{filter_loss_grad, image_loss_grad, msbr_stack, regularizer_grad, ImageObjective, StackGrad};
use super::SynthesisWeights;
use crate::error::{Error, Result};
use crate::filters::TargetFilter;
use crate::metasurface::MetasurfaceDesign;
use crate::psf::{PsfEngine, PsfStack, N_CHANNELS};
use crate::surrogate::SurrogateModel;

/// Energy-regularizer sweep, in units of the auto-scale `kappa`.
pub const C1_SWEEP: [f64; 5] = [0.0, 1e-3, 1e-2, 1e-1, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    pub c1: f64,
    pub c2: f64,
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 >= 0.0 && self.c2 >= 0.0) || !self.c1.is_finite() || !self.c2.is_finite() {
            return Err(Error::Config("regularizer coefficients must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub steps: usize,
    pub lr_design: f64,
    pub lr_weights: f64,
    pub decay: f64,
    pub decay_every: u64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { steps: 1000, lr_design: 1e-2, lr_weights: 1e-1, decay: 0.995, decay_every: 10, log_every: 10, seed: 0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_design > 0.0 && self.lr_weights > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("learning-rate decay must lie in (0, 1]".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }

    pub fn initial_state(&self, design: &MetasurfaceDesign, weights: &SynthesisWeights) -> OptimState {
        OptimState::new(
            design.n_params(),
            4 * weights.targets(),
            self.lr_design,
            self.lr_weights,
            self.decay,
            self.decay_every,
            self.seed,
        )
    }
}

pub enum Objective {
    Filter,
    Image(ImageObjective),
}

pub struct Problem<'a> {
    pub targets: &'a [TargetFilter],
    pub engine: &'a PsfEngine,
    pub surrogate: Option<&'a SurrogateModel>,
    pub objective: &'a Objective,
    pub regularizer: RegularizerConfig,
    /// Scale applied to both regularizer coefficients.
    pub kappa: f64,
    pub log_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    /// Data objective (filter or image loss), without the regularizer.
    pub loss: f64,
    pub msbr: f64,
    pub efficiency: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimStatus {
    Completed,
    /// Non-finite loss at `step`; the returned design is the last finite one.
    Diverged { step: u64 },
}

pub struct OptimOutcome {
    pub design: MetasurfaceDesign,
    pub weights: SynthesisWeights,
    pub state: OptimState,
    pub trace: Vec<TraceRow>,
    pub status: OptimStatus,
    pub stack: PsfStack,
}

/// `1 / sum_b Tr(H_b^T H_b)`, making `c1 = 1` comparable to the data loss.
pub fn auto_kappa(stack: &PsfStack) -> f64 {
    let tr: f64 = stack.h.iter().flatten().map(|a| a.iter().map(|v| v * v).sum::<f64>()).sum();
    if tr > 0.0 {
        1.0 / tr
    } else {
        1.0
    }
}

/// Per-target least-squares weights over the active channels, scaled to unit norm.
pub fn least_squares_alpha(targets: &[TargetFilter], stack: &PsfStack, active: [bool; 4]) -> Result<Vec<[f64; 4]>> {
    let cols: Vec<usize> = (0..N_CHANNELS).filter(|&c| active[c]).collect();
    if cols.is_empty() {
        return Err(Error::Config("every channel is masked".into()));
    }
    let k = cols.len();
    let mut out = Vec::with_capacity(targets.len());
    for t in targets {
        if t.batch() != stack.batch() {
            return Err(Error::Shape(format!("target {} has {} slices, stack has {}", t.name, t.batch(), stack.batch())));
        }
        let mut ata = nalgebra::DMatrix::<f64>::zeros(k, k);
        let mut atb = nalgebra::DVector::<f64>::zeros(k);
        for (b, hb) in stack.h.iter().enumerate() {
            let f = &t.slices[b];
            let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            let hn: f64 = cols.iter().map(|&c| hb[c].iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt().max(1e-300);
            for (p, &ci) in cols.iter().enumerate() {
                atb[p] += dot(&hb[ci], f) / (fnorm * hn);
                for (q, &cj) in cols.iter().enumerate() {
                    ata[(p, q)] += dot(&hb[ci], &hb[cj]) / (hn * hn);
                }
            }
        }
        let ridge = 1e-9 * ata.trace().max(1e-300);
        for p in 0..k {
            ata[(p, p)] += ridge;
        }
        let sol = ata.cholesky().map(|c| c.solve(&atb)).unwrap_or_else(|| nalgebra::DVector::from_element(k, 1.0));
        let n = sol.norm();
        let mut a = [0.0; 4];
        for (p, &c) in cols.iter().enumerate() {
            a[c] = if n > 0.0 { sol[p] / n } else { 1.0 };
        }
        out.push(a);
    }
    Ok(out)
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    ndarray::Zip::from(a).and(b).fold(0.0, |s, x, y| s + x * y)
}

struct Evaluation {
    fwd: crate::psf::PsfForward,
    data: StackGrad,
    total: StackGrad,
}

fn evaluate(p: &Problem, design: &MetasurfaceDesign, weights: &SynthesisWeights) -> Result<Evaluation> {
    let fwd = p.engine.forward(design, p.surrogate)?;
    let h = &fwd.stack.h;
    let data = match p.objective {
        Objective::Filter => filter_loss_grad(p.targets, h, &weights.alpha)?,
        Objective::Image(obj) => image_loss_grad(obj, h, &weights.alpha)?,
    };
    let mut total = data.clone();
    let r = p.regularizer;
    if r.c1 != 0.0 || r.c2 != 0.0 {
        total.add(&regularizer_grad(h, &weights.alpha, r.c1 * p.kappa, r.c2 * p.kappa));
    }
    Ok(Evaluation { fwd, data, total })
}

fn trace_row(step: u64, e: &Evaluation, weights: &SynthesisWeights, lr: f64) -> TraceRow {
    let st = &e.fwd.stack;
    let m: f64 = weights.alpha.iter().map(|a| msbr_stack(&st.h, a).unwrap_or(f64::NAN)).sum::<f64>()
        / weights.targets() as f64;
    TraceRow { step, loss: e.data.value, msbr: m, efficiency: st.mean_efficiency(), lr }
}

/// Adam descent over design parameters and digital weights.
///
/// Runs `steps` further steps from `state`; a non-finite loss stops the run
/// and returns the last design whose loss was finite.
pub fn optimize(
    problem: &Problem,
    design: MetasurfaceDesign,
    weights: SynthesisWeights,
    mut state: OptimState,
    steps: usize,
) -> Result<OptimOutcome> {
    problem.regularizer.validate()?;
    weights.validate()?;
    if state.design.m.len() != design.n_params() || state.weights.m.len() != 4 * weights.targets() {
        return Err(Error::Shape("optimizer state does not match the variables".into()));
    }
    let log_every = problem.log_every.max(1) as u64;
    let frozen: Vec<bool> = (0..weights.targets()).flat_map(|_| weights.active.map(|a| !a)).collect();
    let mut design = design;
    let mut weights = weights;
    let mut trace = Vec::new();
    let mut eval = evaluate(problem, &design, &weights)?;
    if !eval.total.value.is_finite() {
        return Err(Error::Numerical("initial loss is not finite".into()));
    }
    let mut status = OptimStatus::Completed;
    for _ in 0..steps {
        let lr = state.lr_scale();
        if state.step % log_every == 0 {
            trace.push(trace_row(state.step, &eval, &weights, lr * state.lr_design));
        }
        let g_design = problem.engine.backward(&eval.fwd, &design, problem.surrogate, &eval.total.g_h)?;
        let g_d: Vec<f64> = g_design[0].iter().chain(g_design[1].iter()).copied().collect();
        let g_w: Vec<f64> = eval.total.g_alpha.iter().flatten().copied().collect();
        if g_d.iter().chain(&g_w).any(|v| !v.is_finite()) {
            status = OptimStatus::Diverged { step: state.step };
            break;
        }
        let mut x = design.flat_params();
        let mut w = weights.flat();
        let t = state.step + 1;
        state.design.step(&mut x, &g_d, lr * state.lr_design, t, None);
        state.weights.step(&mut w, &g_w, lr * state.lr_weights, t, Some(&frozen));
        if x.iter().chain(&w).any(|v| !v.is_finite()) {
            status = OptimStatus::Diverged { step: t };
            break;
        }
        let mut next_design = design.clone();
        next_design.set_flat_params(&x);
        let mut next_weights = weights.clone();
        next_weights.set_flat(&w);
        let next = match evaluate(problem, &next_design, &next_weights) {
            Ok(e) if e.total.value.is_finite() => e,
            Ok(_) | Err(Error::Numerical(_)) => {
                status = OptimStatus::Diverged { step: t };
                break;
            }
            Err(e) => return Err(e),
        };
        state.step = t;
        design = next_design;
        weights = next_weights;
        eval = next;
    }
    if status == OptimStatus::Completed {
        trace.push(trace_row(state.step, &eval, &weights, state.lr_scale() * state.lr_design));
    }
    Ok(OptimOutcome { design, weights, state, trace, status, stack: eval.fwd.stack })
}

/// Coarse sweep of the energy coefficient: runs `c1 = s * kappa` for each `s`
/// in `scales` (ascending) and stops once the mean in-region efficiency
/// gains less than `tol` over the previous value. Returns every run and the
/// index of the selected one.
#[allow(clippy::too_many_arguments)]
pub fn sweep_c1(
    problem: &Problem,
    design: &MetasurfaceDesign,
    weights: &SynthesisWeights,
    config: &OptimConfig,
    scales: &[f64],
    c2: f64,
    tol: f64,
) -> Result<(Vec<(f64, OptimOutcome)>, usize)> {
    let mut runs: Vec<(f64, OptimOutcome)> = Vec::new();
    for &s in scales {
        let p = Problem {
            targets: problem.targets,
            engine: problem.engine,
            surrogate: problem.surrogate,
            objective: problem.objective,
            regularizer: RegularizerConfig { c1: s, c2 },
            kappa: problem.kappa,
            log_every: problem.log_every,
        };
        let out = optimize(&p, design.clone(), weights.clone(), config.initial_state(design, weights), config.steps)?;
        let eff = out.stack.mean_efficiency();
        if let Some((_, prev)) = runs.last() {
            if eff - prev.stack.mean_efficiency() < tol {
                let chosen = runs.len() - 1;
                runs.push((s, out));
                return Ok((runs, chosen));
            }
        }
        runs.push((s, out));
    }
    let last = runs.len().saturating_sub(1);
    Ok((runs, last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::{embed, KernelSpec};
    use crate::gradcheck::check_gradient;
    use crate::metasurface::{random_phase_init, DesignGrid, Symmetry};
    use crate::psf::{lattice_distance, BatchEntry, PsfConfig};

    const LAM: f64 = 532e-9;

    fn setup() -> (MetasurfaceDesign, PsfEngine, Vec<TargetFilter>) {
        let g = DesignGrid::for_aperture(40e-6, 4).unwrap();
        let cfg = PsfConfig {
            sensor_distance: lattice_distance(g.pitch(), 2e-6, LAM, 64),
            sensor_pitch: 4e-6,
            subsample: 2,
            region_pixels: 16,
            pad_factor: 2.0,
        };
        let d = random_phase_init(g, Symmetry::None, 3).unwrap();
        let entries = vec![BatchEntry { depth: Some(3e-3), wavelength: LAM }, BatchEntry { depth: None, wavelength: LAM }];
        let eng = PsfEngine::new(&d, cfg, entries).unwrap();
        let k = |th: f64| embed(&KernelSpec::derivative(1.5, 1, th).build().unwrap(), 16, 16).unwrap();
        let targets = vec![
            TargetFilter::replicated("dx", k(0.0), 2).unwrap(),
            TargetFilter::replicated("dy", k(std::f64::consts::FRAC_PI_2), 2).unwrap(),
        ];
        (d, eng, targets)
    }

    #[test]
    fn zero_steps_is_identity() {
        let (d, eng, t) = setup();
        let obj = Objective::Filter;
        let p = Problem { targets: &t, engine: &eng, surrogate: None, objective: &obj, regularizer: RegularizerConfig::default(), kappa: 1.0, log_every: 1 };
        let w = SynthesisWeights::unmasked(vec![[1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 0.0, -1.0]]).unwrap();
        let cfg = OptimConfig::default();
        let out = optimize(&p, d.clone(), w.clone(), cfg.initial_state(&d, &w), 0).unwrap();
        assert_eq!(out.design, d);
        assert_eq!(out.weights, w);
        assert_eq!(out.status, OptimStatus::Completed);
    }

    #[test]
    fn full_objective_gradient() {
        let (d0, eng, t) = setup();
        let w0 = SynthesisWeights::unmasked(vec![[0.8, -0.2, -0.6, 0.3], [0.1, 0.7, -0.2, -0.5]]).unwrap();
        let kappa = auto_kappa(&eng.forward(&d0, None).unwrap().stack);
        let obj = Objective::Filter;
        let p = Problem {
            targets: &t,
            engine: &eng,
            surrogate: None,
            objective: &obj,
            regularizer: RegularizerConfig { c1: 0.3, c2: 0.5 },
            kappa,
            log_every: 1,
        };
        let e = evaluate(&p, &d0, &w0).unwrap();
        let gd = eng.backward(&e.fwd, &d0, None, &e.total.g_h).unwrap();
        let nd = d0.n_params();
        let grad: Vec<f64> =
            gd[0].iter().chain(gd[1].iter()).copied().chain(e.total.g_alpha.iter().flatten().copied()).collect();
        let mut x0 = d0.flat_params();
        x0.extend(w0.flat());
        let mut coords: Vec<usize> = (0..nd).filter(|&k| grad[k].abs() > 0.0).step_by(53).take(12).collect();
        coords.extend(nd..nd + 8);
        let loss = |x: &[f64]| {
            let mut d = d0.clone();
            d.set_flat_params(&x[..nd]);
            let mut w = w0.clone();
            w.set_flat(&x[nd..]);
            evaluate(&p, &d, &w).unwrap().total.value
        };
        let err = check_gradient(loss, &x0, &grad, &coords, 1e-6);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn optimization_reduces_loss_and_honors_mask() {
        let (d, eng, t) = setup();
        let t = vec![t[0].clone()];
        let obj = Objective::Filter;
        let p = Problem { targets: &t, engine: &eng, surrogate: None, objective: &obj, regularizer: RegularizerConfig::default(), kappa: 1.0, log_every: 5 };
        let active = [true, false, true, false];
        let st = eng.forward(&d, None).unwrap().stack;
        let w = SynthesisWeights::new(least_squares_alpha(&t, &st, active).unwrap(), active).unwrap();
        let cfg = OptimConfig { lr_design: 5e-2, ..OptimConfig::default() };
        let out = optimize(&p, d.clone(), w.clone(), cfg.initial_state(&d, &w), 60).unwrap();
        let first = out.trace.first().unwrap().loss;
        let last = out.trace.last().unwrap().loss;
        assert!(last < 0.8 * first, "{first} -> {last}");
        assert_eq!(out.weights.alpha[0][1], 0.0);
        assert_eq!(out.weights.alpha[0][3], 0.0);
        // Bit-reproducible.
        let again = optimize(&p, d.clone(), w.clone(), cfg.initial_state(&d, &w), 60).unwrap();
        assert_eq!(again.design, out.design);
        assert_eq!(again.weights, out.weights);
        // Resuming in two halves matches one run.
        let half = optimize(&p, d.clone(), w.clone(), cfg.initial_state(&d, &w), 30).unwrap();
        let rest = optimize(&p, half.design, half.weights, half.state, 30).unwrap();
        assert_eq!(rest.design, out.design);
    }

    #[test]
    fn divergence_returns_last_good() {
        let (mut d, eng, t) = setup();
        let obj = Objective::Filter;
        let p = Problem { targets: &t, engine: &eng, surrogate: None, objective: &obj, regularizer: RegularizerConfig::default(), kappa: 1.0, log_every: 1 };
        let w = SynthesisWeights::unmasked(vec![[1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 0.0, -1.0]]).unwrap();
        let cfg = OptimConfig { lr_design: f64::INFINITY, ..OptimConfig::default() };
        d.params[0][[0, 0]] = 0.0;
        let out = optimize(&p, d.clone(), w.clone(), cfg.initial_state(&d, &w), 5).unwrap();
        assert!(matches!(out.status, OptimStatus::Diverged { .. }));
        assert!(out.design.flat_params().iter().all(|v| v.is_finite()));
    }
}
