//! Subcommand implementations. Each returns a small summary so the
//! integration tests can inspect results without parsing files.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::Serialize;

use polarsynth::io::PortableTensor;
use polarsynth::psf::{PsfStack, N_CHANNELS};
use polarsynth::sensor::{apply_noise, mosaic, psnr, render_channel, synthesize_image, SensorConfig};
use polarsynth::surrogate::{train_surrogate, ResponseDataset, SyntheticFdtd, TrainReport};
use polarsynth::synthesis::{
    auto_kappa, least_squares_alpha, msbr_stack, normalized_l1_error, optimize, phase_inversion, steer_weights,
    sweep_c1, OptimStatus, Problem, RegularizerConfig, SynthesisWeights, TraceRow,
};

use crate::artifacts::{append_csv, save_tensor, write_csv, write_json, Outputs, RunCheckpoint};
use crate::config::{ExperimentConfig, Task};
use crate::error::{CliError, CliResult};
use crate::pipeline;
use crate::preview::{write_gray, write_signed};

/// Config from `--config`, or the defaults for a steerable run.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::from_toml("task = \"steerable\"", None)?,
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

// ---------------------------------------------------------------- train-surrogate

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    pub train_mae: f64,
    pub test_mae: f64,
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    train_mse: f64,
}

pub fn train(
    config: Option<&Path>,
    seed: Option<u64>,
    synthetic: bool,
    dataset: Option<&Path>,
    out: &Path,
) -> CliResult<TrainSummary> {
    let mut cfg = resolve_config(config, seed)?;
    if let Some(d) = dataset {
        cfg.surrogate.dataset = Some(d.to_path_buf());
    }
    if synthetic {
        cfg.surrogate.dataset = None;
    }
    let data = match (&cfg.surrogate.dataset, synthetic) {
        (Some(p), false) => {
            if !p.exists() {
                return Err(CliError::artifact(p, "dataset not found"));
            }
            ResponseDataset::load(p).map_err(|e| CliError::artifact(p, e))?
        }
        (None, true) => ResponseDataset::synthetic_grid(
            &SyntheticFdtd::default(),
            cfg.surrogate.synthetic_widths,
            cfg.surrogate.synthetic_wavelengths,
        )?,
        _ => {
            return Err(CliError::Config(
                "no training data: pass --dataset PATH (or set surrogate.dataset) or --synthetic".into(),
            ))
        }
    };
    let outputs = Outputs::create(out, &cfg.hash())?;
    outputs.write_config(&cfg)?;
    let (model, report): (_, TrainReport) = train_surrogate(&data, &cfg.surrogate.train)?;
    let checkpoint = outputs.path("surrogate", "ckpt");
    model.save(&checkpoint, Some(&report)).map_err(|e| CliError::artifact(&checkpoint, e))?;
    let metrics = outputs.path("surrogate-metrics", "csv");
    let rows: Vec<EpochRow> = report.history.iter().map(|&(epoch, train_mse)| EpochRow { epoch, train_mse }).collect();
    write_csv(&metrics, &rows)?;
    let summary = TrainSummary {
        checkpoint,
        metrics,
        n_train: report.n_train,
        n_test: report.n_test,
        train_mae: report.train_mae,
        test_mae: report.test_mae,
    };
    write_json(&outputs.path("surrogate-report", "json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------- optimize

#[derive(Debug, Clone, Serialize)]
pub struct TargetMetrics {
    pub target: String,
    /// Normalized L1 error, averaged over the batch.
    pub filter_error: f64,
    pub msbr: f64,
    pub alpha: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct OptimizeSummary {
    pub checkpoint: PathBuf,
    pub trace: Vec<TraceRow>,
    pub targets: Vec<TargetMetrics>,
    pub efficiency: f64,
    pub c1: f64,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    config_hash: &'a str,
    task: Task,
    target: &'a str,
    steps: u64,
    filter_error: f64,
    msbr: f64,
    efficiency: f64,
}

#[derive(Serialize)]
struct SweepRow {
    c1: f64,
    loss: f64,
    msbr: f64,
    efficiency: f64,
    selected: bool,
}

fn target_metrics(
    targets: &[polarsynth::filters::TargetFilter],
    stack: &PsfStack,
    weights: &SynthesisWeights,
) -> CliResult<Vec<TargetMetrics>> {
    targets
        .iter()
        .zip(&weights.alpha)
        .map(|(t, a)| {
            let err = (0..stack.batch()).map(|b| normalized_l1_error(&t.slices[b], &stack.net(b, a))).sum::<f64>()
                / stack.batch() as f64;
            Ok(TargetMetrics { target: t.name.clone(), filter_error: err, msbr: msbr_stack(&stack.h, a)?, alpha: *a })
        })
        .collect()
}

/// Writes the PSF tensor plus channel and net-PSF previews.
fn write_psf_artifacts(
    outputs: &Outputs,
    stack: &PsfStack,
    targets: &[polarsynth::filters::TargetFilter],
    weights: &SynthesisWeights,
    channels: bool,
) -> CliResult<()> {
    save_tensor(&stack.to_tensor(), &outputs.path("psf", "ptns"))?;
    for b in 0..stack.batch() {
        for (t, a) in targets.iter().zip(&weights.alpha) {
            write_signed(&outputs.path(&format!("net-psf-{}-b{b}", t.name), "png"), &stack.net(b, a))?;
        }
        if channels {
            for (c, deg) in [0, 45, 90, 135].iter().enumerate() {
                write_gray(&outputs.path(&format!("psf-{deg}-b{b}"), "png"), &stack.h[b][c])?;
            }
        }
    }
    Ok(())
}

pub fn optimize_cmd(config: Option<&Path>, seed: Option<u64>, out: &Path, resume: Option<&Path>) -> CliResult<OptimizeSummary> {
    let cfg = resolve_config(config, seed)?;
    let model = pipeline::load_surrogate(&cfg)?;
    let (targets, active) = pipeline::targets(&cfg)?;
    let outputs = Outputs::create(out, &cfg.hash())?;

    let (design, weights, state, mut trace, kappa, c1) = match resume {
        Some(path) => {
            let ck = RunCheckpoint::load(path)?;
            let mut stored = ck.config.clone();
            stored.optimizer.steps = cfg.optimizer.steps;
            if !stored.regularizer.c1_sweep.is_empty() {
                stored.regularizer.c1 = cfg.regularizer.c1;
            }
            if stored != cfg {
                return Err(CliError::Config(format!(
                    "{} was produced by a different configuration (only optimizer.steps may change on resume)",
                    path.display()
                )));
            }
            if ck.state.step as usize > cfg.optimizer.steps {
                return Err(CliError::Config(format!(
                    "checkpoint is at step {} but optimizer.steps is {}",
                    ck.state.step, cfg.optimizer.steps
                )));
            }
            let c1 = ck.config.regularizer.c1;
            (ck.design, ck.weights, ck.state, ck.trace, ck.kappa, c1)
        }
        None => {
            let design = pipeline::initial_design(&cfg, model.as_ref())?;
            let fwd = pipeline::engine(&cfg, &design)?.forward(&design, model.as_ref())?;
            let alpha = if cfg.task == Task::PhaseInversion {
                vec![[1.0, 0.0, 0.0, 0.0]]
            } else {
                least_squares_alpha(&targets, &fwd.stack, active)?
            };
            let active = if cfg.task == Task::PhaseInversion { [true, false, false, false] } else { active };
            let weights = SynthesisWeights::new(alpha, active)?;
            let state = cfg.optimizer.initial_state(&design, &weights);
            (design, weights, state, Vec::new(), auto_kappa(&fwd.stack), cfg.regularizer.c1)
        }
    };
    let engine = pipeline::engine(&cfg, &design)?;
    outputs.write_config(&cfg)?;

    if cfg.task == Task::PhaseInversion {
        return run_inversion(&cfg, &outputs, &engine, &targets, design, weights, kappa);
    }

    let objective = pipeline::objective(&cfg, &targets)?;
    let problem = Problem {
        targets: &targets,
        engine: &engine,
        surrogate: model.as_ref(),
        objective: &objective,
        regularizer: RegularizerConfig { c1, c2: cfg.regularizer.c2 },
        kappa,
        log_every: cfg.optimizer.log_every,
    };
    let (out, c1) = if resume.is_none() && !cfg.regularizer.c1_sweep.is_empty() {
        let (runs, chosen) = sweep_c1(
            &problem,
            &design,
            &weights,
            &cfg.optimizer,
            &cfg.regularizer.c1_sweep,
            cfg.regularizer.c2,
            cfg.regularizer.sweep_tolerance,
        )?;
        let rows: Vec<SweepRow> = runs
            .iter()
            .enumerate()
            .map(|(i, (c1, o))| {
                let last = o.trace.last();
                SweepRow {
                    c1: *c1,
                    loss: last.map_or(f64::NAN, |r| r.loss),
                    msbr: last.map_or(f64::NAN, |r| r.msbr),
                    efficiency: o.stack.mean_efficiency(),
                    selected: i == chosen,
                }
            })
            .collect();
        write_csv(&outputs.path("c1-sweep", "csv"), &rows)?;
        let (c1, o) = runs.into_iter().nth(chosen).expect("sweep returns the chosen run");
        (o, c1)
    } else {
        let remaining = cfg.optimizer.steps - state.step as usize;
        (optimize(&problem, design, weights, state, remaining)?, c1)
    };
    // A resumed run re-logs the step it starts from; keep the earlier row.
    let skip = usize::from(trace.last().zip(out.trace.first()).is_some_and(|(a, b)| a.step == b.step));
    trace.extend(out.trace.iter().skip(skip).cloned());

    let mut frozen = cfg.clone();
    frozen.regularizer.c1 = c1;
    let ck = RunCheckpoint { config: frozen, design: out.design, weights: out.weights, state: out.state, trace, kappa };
    if let OptimStatus::Diverged { step } = out.status {
        let path = outputs.path("design-abort", "ckpt");
        ck.save(&path)?;
        write_csv(&outputs.path("trace", "csv"), &ck.trace)?;
        return Err(CliError::Numerical(format!(
            "non-finite loss at step {step}; last finite design saved to {}",
            path.display()
        )));
    }
    finish_run(&cfg, &outputs, &targets, &out.stack, ck, c1)
}

fn finish_run(
    cfg: &ExperimentConfig,
    outputs: &Outputs,
    targets: &[polarsynth::filters::TargetFilter],
    stack: &PsfStack,
    ck: RunCheckpoint,
    c1: f64,
) -> CliResult<OptimizeSummary> {
    let checkpoint = outputs.path("design", "ckpt");
    ck.save(&checkpoint)?;
    write_csv(&outputs.path("trace", "csv"), &ck.trace)?;
    write_psf_artifacts(outputs, stack, targets, &ck.weights, false)?;
    let metrics = target_metrics(targets, stack, &ck.weights)?;
    let efficiency = stack.mean_efficiency();
    for m in &metrics {
        append_csv(
            &outputs.dir.join("summary.csv"),
            &SummaryRow {
                config_hash: &outputs.hash,
                task: cfg.task,
                target: &m.target,
                steps: ck.state.step,
                filter_error: m.filter_error,
                msbr: m.msbr,
                efficiency,
            },
        )?;
    }
    Ok(OptimizeSummary { checkpoint, trace: ck.trace, targets: metrics, efficiency, c1 })
}

fn run_inversion(
    cfg: &ExperimentConfig,
    outputs: &Outputs,
    engine: &polarsynth::psf::PsfEngine,
    targets: &[polarsynth::filters::TargetFilter],
    design: polarsynth::metasurface::MetasurfaceDesign,
    weights: SynthesisWeights,
    kappa: f64,
) -> CliResult<OptimizeSummary> {
    let target = targets[0].slices[0].mapv(|v| v.max(0.0));
    let o = &cfg.optimizer;
    let report = phase_inversion(engine, &target, cfg.kernels.inversion_loss, design, o.steps, o.lr_design, o.log_every)?;
    let trace: Vec<TraceRow> = report
        .trace
        .iter()
        .map(|&(step, loss, _, _, efficiency)| TraceRow { step, loss, msbr: 1.0, efficiency, lr: o.lr_design })
        .collect();
    let mut state = o.initial_state(&report.design, &weights);
    state.step = o.steps as u64;
    let stack = engine.forward(&report.design, None)?.stack;
    let ck = RunCheckpoint { config: cfg.clone(), design: report.design, weights, state, trace, kappa };
    let inv_targets = [polarsynth::filters::TargetFilter::replicated(&targets[0].name, target, 1)?];
    finish_run(cfg, outputs, &inv_targets, &stack, ck, 0.0)
}

// ---------------------------------------------------------------- render

#[derive(Debug, Clone, Serialize)]
pub struct PsnrRow {
    pub sensor_psnr_db: f64,
    pub image: String,
    pub net_psnr_db: f64,
}

#[derive(Debug, Clone)]
pub struct RenderSummary {
    pub channels: [Array2<f64>; 4],
    /// `(name, alpha, noiseless net image)`.
    pub nets: Vec<(String, [f64; 4], Array2<f64>)>,
    pub psnr: Vec<PsnrRow>,
}

fn stack_for(ck: &RunCheckpoint) -> CliResult<PsfStack> {
    let model = pipeline::load_surrogate(&ck.config)?;
    let engine = pipeline::engine(&ck.config, &ck.design)?;
    Ok(engine.forward(&ck.design, model.as_ref())?.stack)
}

fn channel_psfs(stack: &PsfStack) -> [Vec<Array2<f64>>; 4] {
    [0, 1, 2, 3].map(|c| stack.h.iter().map(|h| h[c].clone()).collect())
}

fn stack3(images: &[Array2<f64>]) -> Array3<f64> {
    let (r, c) = images[0].dim();
    Array3::from_shape_fn((images.len(), r, c), |(k, i, j)| images[k][[i, j]])
}

pub fn render(
    checkpoint: &Path,
    scene_path: Option<&Path>,
    thetas_deg: &[f64],
    psnrs: &[f64],
    seed: Option<u64>,
    out: &Path,
) -> CliResult<RenderSummary> {
    let ck = RunCheckpoint::load(checkpoint)?;
    let mut cfg = ck.config.clone();
    if let Some(p) = scene_path {
        cfg.scene.path = Some(p.to_path_buf());
    }
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    if !thetas_deg.is_empty() && ck.weights.targets() != 2 {
        return Err(CliError::Config("--theta needs a design with two steerable basis targets".into()));
    }
    let stack = stack_for(&ck)?;
    let scene = pipeline::scene(&cfg, cfg.scene.test_seed)?;
    let psf = channel_psfs(&stack);
    let rendered: Vec<Array2<f64>> =
        (0..N_CHANNELS).into_par_iter().map(|c| render_channel(&scene, &psf[c])).collect::<Result<_, _>>()?;
    let channels: [Array2<f64>; 4] = rendered.try_into().expect("four channels");

    let outputs = Outputs::create(out, &cfg.hash())?;
    let frame = mosaic(&channels)?;
    save_tensor(&PortableTensor::from_array2(&frame.pixels, ["y", "x"], "relative irradiance"), &outputs.path("mosaic", "ptns"))?;
    write_gray(&outputs.path("mosaic", "png"), &frame.pixels)?;
    save_tensor(
        &PortableTensor::from_array3(&stack3(&channels), ["channel", "y", "x"], "relative irradiance"),
        &outputs.path("channels", "ptns"),
    )?;
    for (c, deg) in [0, 45, 90, 135].iter().enumerate() {
        write_gray(&outputs.path(&format!("channel-{deg}"), "png"), &channels[c])?;
    }

    let (targets, _) = pipeline::targets(&ck.config)?;
    let mut alphas: Vec<(String, [f64; 4])> =
        targets.iter().zip(&ck.weights.alpha).map(|(t, a)| (t.name.clone(), *a)).collect();
    for &deg in thetas_deg {
        let a = steer_weights(&ck.weights.alpha[0], &ck.weights.alpha[1], deg.to_radians());
        alphas.push((format!("theta_{deg}"), a));
    }
    let mut nets = Vec::new();
    for (name, a) in &alphas {
        let net = synthesize_image(&channels, a)?;
        save_tensor(&PortableTensor::from_array2(&net, ["y", "x"], "relative irradiance"), &outputs.path(&format!("net-{name}"), "ptns"))?;
        write_signed(&outputs.path(&format!("net-{name}"), "png"), &net)?;
        nets.push((name.clone(), *a, net));
    }

    let peak = channels.iter().flat_map(|c| c.iter()).fold(0.0f64, |m, v| m.max(*v));
    let mut rows = Vec::new();
    for &p in psnrs {
        let noisy: Vec<Array2<f64>> = channels
            .iter()
            .enumerate()
            .map(|(c, ch)| {
                let sc = SensorConfig { target_psnr: Some(p), seed: cfg.sensor.seed * 4 + c as u64, ..cfg.sensor.clone() };
                Ok(apply_noise(ch, &sc, Some(peak))?.to_input_units())
            })
            .collect::<CliResult<_>>()?;
        let noisy: [Array2<f64>; 4] = noisy.try_into().expect("four channels");
        let tag = format!("psnr{p}");
        save_tensor(
            &PortableTensor::from_array2(&mosaic(&noisy)?.pixels, ["y", "x"], "relative irradiance"),
            &outputs.path(&format!("mosaic-{tag}"), "ptns"),
        )?;
        for (name, a, clean) in &nets {
            let net = synthesize_image(&noisy, a)?;
            write_signed(&outputs.path(&format!("net-{name}-{tag}"), "png"), &net)?;
            rows.push(PsnrRow { sensor_psnr_db: p, image: name.clone(), net_psnr_db: psnr(clean, &net) });
        }
    }
    if !rows.is_empty() {
        write_csv(&outputs.path("render-psnr", "csv"), &rows)?;
    }
    Ok(RenderSummary { channels, nets, psnr: rows })
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub config_hash: String,
    pub task: Task,
    pub targets: Vec<TargetMetrics>,
    pub efficiency: f64,
    pub conservation_residual: f64,
    pub rank_ratio: f64,
    /// Noisy net-PSF PSNR against the scaled target, per target.
    pub psf_psnr_db: Vec<f64>,
    pub failures: Vec<String>,
}

/// Net PSF of batch slice 0 under the sensor model (channels exposed at a
/// common peak) against the least-squares-scaled target.
fn noisy_psf_psnr(stack: &PsfStack, target: &Array2<f64>, a: &[f64; 4], sensor: &SensorConfig) -> CliResult<f64> {
    let clean = stack.net(0, a);
    let s = (&clean * target).sum() / (target * target).sum();
    let peak = stack.h[0].iter().flat_map(|c| c.iter()).fold(0.0f64, |m, v| m.max(*v));
    let mut noisy = Array2::zeros(target.dim());
    for c in 0..N_CHANNELS {
        let sc = SensorConfig {
            target_psnr: Some(sensor.target_psnr.unwrap_or(30.0)),
            seed: sensor.seed * 4 + c as u64,
            ..sensor.clone()
        };
        noisy.scaled_add(a[c], &apply_noise(&stack.h[0][c], &sc, Some(peak))?.to_input_units());
    }
    Ok(psnr(&(target * s), &noisy))
}

pub fn evaluate(checkpoint: &Path, out: Option<&Path>) -> CliResult<EvaluationReport> {
    let ck = RunCheckpoint::load(checkpoint)?;
    let cfg = &ck.config;
    let stack = stack_for(&ck)?;
    let (mut targets, _) = pipeline::targets(cfg)?;
    if cfg.task == Task::PhaseInversion {
        let t = targets[0].slices[0].mapv(|v| v.max(0.0));
        targets = vec![polarsynth::filters::TargetFilter::replicated(&targets[0].name, t, 1)?];
    }
    let metrics = target_metrics(&targets, &stack, &ck.weights)?;
    let psf_psnr_db = targets
        .iter()
        .zip(&ck.weights.alpha)
        .map(|(t, a)| noisy_psf_psnr(&stack, &t.slices[0], a, &cfg.sensor))
        .collect::<CliResult<Vec<_>>>()?;
    let mut report = EvaluationReport {
        config_hash: cfg.hash(),
        task: cfg.task,
        efficiency: stack.mean_efficiency(),
        conservation_residual: stack.conservation_residual(),
        rank_ratio: stack.rank_ratio(),
        targets: metrics,
        psf_psnr_db,
        failures: Vec::new(),
    };
    let th = &cfg.evaluate;
    let mut fail = |ok: bool, msg: String| {
        if !ok {
            report.failures.push(msg);
        }
    };
    for m in &report.targets {
        if let Some(v) = th.max_filter_error {
            fail(m.filter_error < v, format!("{}: filter error {:.4} >= {v}", m.target, m.filter_error));
        }
        if let Some(v) = th.min_msbr {
            fail(m.msbr > v, format!("{}: mSBR {:.4} <= {v}", m.target, m.msbr));
        }
    }
    if let Some(v) = th.min_efficiency {
        fail(report.efficiency > v, format!("efficiency {:.4} <= {v}", report.efficiency));
    }
    if let Some(v) = th.min_psnr {
        for p in &report.psf_psnr_db {
            fail(*p > v, format!("net-PSF PSNR {p:.2} dB <= {v}"));
        }
    }
    if let Some(v) = th.max_conservation_residual {
        fail(report.conservation_residual < v, format!("conservation residual {:.3e} >= {v:e}", report.conservation_residual));
    }
    if let Some(out) = out {
        let outputs = Outputs::create(out, &report.config_hash)?;
        write_json(&outputs.path("report", "json"), &report)?;
        let rows: Vec<_> = report
            .targets
            .iter()
            .zip(&report.psf_psnr_db)
            .map(|(m, p)| EvalRow {
                target: &m.target,
                filter_error: m.filter_error,
                msbr: m.msbr,
                efficiency: report.efficiency,
                psf_psnr_db: *p,
                conservation_residual: report.conservation_residual,
                rank_ratio: report.rank_ratio,
            })
            .collect();
        write_csv(&outputs.path("report", "csv"), &rows)?;
    }
    Ok(report)
}

#[derive(Serialize)]
struct EvalRow<'a> {
    target: &'a str,
    filter_error: f64,
    msbr: f64,
    efficiency: f64,
    psf_psnr_db: f64,
    conservation_residual: f64,
    rank_ratio: f64,
}

// ---------------------------------------------------------------- export-psf

pub fn export_psf(checkpoint: &Path, out: &Path) -> CliResult<PathBuf> {
    let ck = RunCheckpoint::load(checkpoint)?;
    let stack = stack_for(&ck)?;
    let (targets, _) = pipeline::targets(&ck.config)?;
    let outputs = Outputs::create(out, &ck.config.hash())?;
    write_psf_artifacts(&outputs, &stack, &targets, &ck.weights, true)?;
    Ok(outputs.path("psf", "ptns"))
}
