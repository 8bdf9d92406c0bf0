//! End-to-end runs of the public pipeline on a small aperture.

use ndarray::{s, Array2};

use polarsynth::filters::{embed, KernelSpec, TargetFilter};
use polarsynth::io::Container;
use polarsynth::metasurface::{lens_phase_init, DesignGrid, DesignMode, MetasurfaceDesign, Symmetry};
use polarsynth::psf::{lattice_distance, BatchEntry, PsfConfig, PsfEngine, N_CHANNELS};
use polarsynth::sensor::{render_channels, synthesize_image, Scene};
use polarsynth::synthesis::{
    auto_kappa, filter_loss, least_squares_alpha, optimize, Objective, OptimConfig, OptimStatus, Problem,
    RegularizerConfig, SynthesisWeights,
};

const LAMBDA: f64 = 532e-9;
const N: usize = 16;

fn setup() -> (MetasurfaceDesign, PsfEngine, Vec<TargetFilter>) {
    let grid = DesignGrid::for_aperture(40e-6, 4).unwrap();
    let d = lattice_distance(grid.pitch(), 2e-6, LAMBDA, 64);
    let design =
        lens_phase_init(grid, DesignMode::PhaseOnly, Symmetry::None, d, LAMBDA, [(8e-6, 0.0), (-8e-6, 0.0)], None).unwrap();
    let cfg = PsfConfig { sensor_distance: d, sensor_pitch: 4e-6, subsample: 2, region_pixels: N, pad_factor: 2.0 };
    let engine = PsfEngine::new(&design, cfg, vec![BatchEntry { depth: None, wavelength: LAMBDA }]).unwrap();
    let spec = KernelSpec::derivative(1.5, 1, 0.0);
    let targets = vec![TargetFilter::replicated("dx", embed(&spec.build().unwrap(), N, N).unwrap(), 1).unwrap()];
    (design, engine, targets)
}

fn weights(engine: &PsfEngine, design: &MetasurfaceDesign, targets: &[TargetFilter]) -> SynthesisWeights {
    let stack = engine.forward(design, None).unwrap().stack;
    SynthesisWeights::new(least_squares_alpha(targets, &stack, [true; 4]).unwrap(), [true; 4]).unwrap()
}

#[test]
fn optimization_lowers_the_filter_loss_and_reports_its_own_stack() {
    let (design, engine, targets) = setup();
    let w = weights(&engine, &design, &targets);
    let start = engine.forward(&design, None).unwrap().stack;
    let before = filter_loss(&targets, &start.h, &w.alpha).unwrap();
    let problem = Problem {
        targets: &targets,
        engine: &engine,
        surrogate: None,
        objective: &Objective::Filter,
        regularizer: RegularizerConfig { c1: 0.0, c2: 0.0 },
        kappa: auto_kappa(&start),
        log_every: 10,
    };
    let oc = OptimConfig { steps: 60, lr_design: 5e-2, ..OptimConfig::default() };
    let state = oc.initial_state(&design, &w);
    let out = optimize(&problem, design, w, state, 60).unwrap();
    assert!(matches!(out.status, OptimStatus::Completed));
    let after = filter_loss(&targets, &out.stack.h, &out.weights.alpha).unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");

    let fresh = engine.forward(&out.design, None).unwrap().stack;
    for c in 0..N_CHANNELS {
        assert_eq!(fresh.h[0][c], out.stack.h[0][c]);
    }
    assert!(out.stack.conservation_residual() < 1e-12);
}

#[test]
fn a_stored_design_reproduces_its_psfs() {
    let (design, engine, _) = setup();
    let mut bytes = Vec::new();
    design.to_container().write_to(&mut bytes).unwrap();
    let back = MetasurfaceDesign::from_container(&Container::read_from(bytes.as_slice()).unwrap()).unwrap();
    let a = engine.forward(&design, None).unwrap().stack;
    let b = engine.forward(&back, None).unwrap().stack;
    for c in 0..N_CHANNELS {
        assert_eq!(a.h[0][c], b.h[0][c]);
    }
}

#[test]
fn synthesized_image_is_the_scene_filtered_by_the_net_psf() {
    let (design, engine, targets) = setup();
    let w = weights(&engine, &design, &targets);
    let stack = engine.forward(&design, None).unwrap().stack;
    // A single bright point far from the borders reproduces the net PSF.
    let mut point = Array2::zeros((3 * N, 3 * N));
    point[[3 * N / 2, 3 * N / 2]] = 1.0;
    let scene = Scene::new(vec![point]).unwrap();
    let psf = [0, 1, 2, 3].map(|c| vec![stack.h[0][c].clone()]);
    let image = synthesize_image(&render_channels(&scene, &psf).unwrap(), &w.alpha[0]).unwrap();
    let image = image.slice(s![N..2 * N, N..2 * N]);
    let net = stack.net(0, &w.alpha[0]);
    let scale = net.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = (&image - &net).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-9 * scale, "{err:e} of {scale:e}");
}
