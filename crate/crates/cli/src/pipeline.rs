//! Turns a resolved config into the core objects of one experiment.

use std::f64::consts::FRAC_PI_2;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use polarsynth::filters::{depth_orientation_targets, embed, KernelSpec, TargetFilter};
use polarsynth::metasurface::{
    lens_phase_init, multifocal_phase_init, random_phase_init, DesignGrid, DesignMode, Focus, MetasurfaceDesign,
};
use polarsynth::metrics::synthetic_scene;
use polarsynth::psf::PsfEngine;
use polarsynth::sensor::Scene;
use polarsynth::surrogate::SurrogateModel;
use polarsynth::synthesis::{ImageObjective, Objective};

use crate::artifacts::load_scene;
use crate::config::{ExperimentConfig, InitKind, Task};
use crate::error::{CliError, CliResult};

pub fn grid(cfg: &ExperimentConfig) -> CliResult<DesignGrid> {
    Ok(DesignGrid::for_aperture(cfg.optics.aperture, cfg.optics.supersample)?)
}

pub fn load_surrogate(cfg: &ExperimentConfig) -> CliResult<Option<SurrogateModel>> {
    if cfg.optics.mode != DesignMode::CellBased {
        return Ok(None);
    }
    let path = cfg
        .surrogate
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("cell_based designs need surrogate.checkpoint".into()))?;
    if !path.exists() {
        return Err(CliError::artifact(path, "surrogate checkpoint not found"));
    }
    SurrogateModel::load(path).map(Some).map_err(|e| CliError::artifact(path, e))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Starting design for the configured initialization.
pub fn initial_design(cfg: &ExperimentConfig, model: Option<&SurrogateModel>) -> CliResult<MetasurfaceDesign> {
    let g = grid(cfg)?;
    let d = cfg.psf_config()?.sensor_distance;
    let lam = cfg.init.design_wavelength.unwrap_or_else(|| mean(&cfg.optics.wavelengths));
    let finite: Vec<f64> = cfg.depths().into_iter().flatten().collect();
    // Thin-lens focus for a point at the mean depth; the lens centre sits at
    // `f / d` of the desired sensor-plane spot position.
    let in_focus = |z: Option<f64>| z.map_or(d, |z| 1.0 / (1.0 / d + 1.0 / z));
    let mean_depth = (!finite.is_empty()).then(|| mean(&finite));
    let r = cfg.init.spot_offset;
    let design = match (cfg.init.kind, cfg.optics.mode) {
        (InitKind::Lens, mode) => {
            let f = cfg.init.focal_length.unwrap_or_else(|| in_focus(mean_depth));
            let o = r * f / d;
            let x = lens_phase_init(g, mode, cfg.optics.symmetry, f, lam, [(o, 0.0), (-o, 0.0)], model)?;
            if cfg.init.focal_ratio_y == 1.0 {
                x
            } else {
                let fy = f * cfg.init.focal_ratio_y;
                let oy = r * fy / d;
                let y = lens_phase_init(g, mode, cfg.optics.symmetry, fy, lam, [(oy, 0.0), (-oy, 0.0)], model)?;
                let mut x = x;
                x.params[1] = y.params[1].clone();
                x
            }
        }
        (InitKind::Random, DesignMode::PhaseOnly) => random_phase_init(g, cfg.optics.symmetry, cfg.seed)?,
        (InitKind::Random, DesignMode::CellBased) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let shape = g.param_shape(cfg.optics.symmetry);
            let mut draw = || Array2::from_shape_fn(shape, |_| rng.random_range(-2.0..2.0));
            let params = [draw(), draw()];
            MetasurfaceDesign::new(DesignMode::CellBased, cfg.optics.symmetry, g, params, Some(cfg.seed))?
        }
        (InitKind::Multifocal, DesignMode::PhaseOnly) => {
            let s = &cfg.kernels.schedule;
            let foci: Vec<Focus> = s
                .depths()
                .into_iter()
                .map(|z| {
                    let f = in_focus(Some(z));
                    let th = s.theta(z);
                    let (x, y) = (r * th.cos() * f / d, r * th.sin() * f / d);
                    Focus { focal_length: f, offsets: [(x, y), (-x, -y)] }
                })
                .collect();
            multifocal_phase_init(g, lam, &foci)?
        }
        (InitKind::Multifocal, DesignMode::CellBased) => {
            return Err(CliError::Config("multifocal init is phase-only".into()));
        }
    };
    Ok(design)
}

fn replicated(name: &str, spec: &KernelSpec, n: usize, batch: usize) -> CliResult<TargetFilter> {
    Ok(TargetFilter::replicated(name, embed(&spec.build()?, n, n)?, batch)?)
}

/// Target filters and the digital-weight mask.
pub fn targets(cfg: &ExperimentConfig) -> CliResult<(Vec<TargetFilter>, [bool; 4])> {
    let n = cfg.optics.region_pixels;
    let b = cfg.batch().len();
    let k = &cfg.kernels;
    let deriv = KernelSpec::derivative(k.derivative_sigma, k.derivative_order, 0.0);
    Ok(match cfg.task {
        Task::Steerable => (
            vec![replicated("theta_0", &deriv, n, b)?, replicated("theta_90", &deriv.with_theta(FRAC_PI_2), n, b)?],
            [true; 4],
        ),
        Task::DepthDerivative => {
            if cfg.optics.wavelengths.len() != 1 {
                return Err(CliError::Config("depth_derivative uses a single wavelength".into()));
            }
            (vec![depth_orientation_targets(&k.schedule, &deriv, n, n)?], [true, false, true, false])
        }
        Task::BroadbandLog => (vec![replicated("log", &KernelSpec::log(k.log_sigma), n, b)?], [true; 4]),
        Task::Custom | Task::PhaseInversion => (
            k.custom.iter().enumerate().map(|(i, s)| replicated(&format!("custom_{i}"), s, n, b)).collect::<CliResult<_>>()?,
            [true; 4],
        ),
    })
}

/// Scene replicated over the batch (or taken slice-by-slice from a file).
pub fn scene(cfg: &ExperimentConfig, seed: u64) -> CliResult<Scene> {
    let b = cfg.batch().len();
    let slices = match &cfg.scene.path {
        Some(p) => load_scene(p)?,
        None => vec![synthetic_scene(cfg.scene.size, cfg.scene.size, seed)],
    };
    let slices = match slices.len() {
        1 => vec![slices[0].clone(); b],
        n if n == b => slices,
        n => return Err(CliError::Config(format!("scene has {n} slices but the batch has {b} entries"))),
    };
    Ok(Scene::new(slices)?)
}

pub fn objective(cfg: &ExperimentConfig, targets: &[TargetFilter]) -> CliResult<Objective> {
    Ok(match cfg.task {
        Task::BroadbandLog => Objective::Image(ImageObjective::new(targets, &scene(cfg, cfg.scene.train_seed)?)?),
        _ => Objective::Filter,
    })
}

pub fn engine(cfg: &ExperimentConfig, design: &MetasurfaceDesign) -> CliResult<PsfEngine> {
    Ok(PsfEngine::new(design, cfg.psf_config()?, cfg.batch())?)
}
