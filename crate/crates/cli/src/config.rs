//! Experiment configuration: a TOML document with every default filled in,
//! so the frozen copy written next to each artifact is self-describing.

use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use polarsynth::filters::{DepthSchedule, KernelSpec};
use polarsynth::metasurface::{DesignMode, Symmetry};
use polarsynth::psf::{lattice_distance, BatchEntry, PsfConfig};
use polarsynth::sensor::SensorConfig;
use polarsynth::surrogate::TrainConfig;
use polarsynth::synthesis::{InversionLoss, OptimConfig};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Steerable,
    DepthDerivative,
    BroadbandLog,
    PhaseInversion,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optics: OpticsConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub kernels: KernelsConfig,
    #[serde(default)]
    pub regularizer: RegularizerSection,
    #[serde(default)]
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub sensor: SensorConfig,
    #[serde(default)]
    pub surrogate: SurrogateSection,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub evaluate: Thresholds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpticsConfig {
    /// Aperture diameter in metres.
    pub aperture: f64,
    /// Nanofin cells per optimized sample along each axis.
    pub supersample: usize,
    pub mode: DesignMode,
    pub symmetry: Symmetry,
    pub wavelengths: Vec<f64>,
    /// Point-source depths in metres; empty means a source at infinity.
    /// Ignored by `depth_derivative`, which takes depths from its schedule.
    pub depths: Vec<f64>,
    /// Optic-to-sensor distance; when absent it is chosen so the FFT
    /// propagator lands on the field sample lattice (`lattice_q`).
    pub sensor_distance: Option<f64>,
    pub lattice_q: usize,
    pub sensor_pitch: f64,
    /// Field samples per sensor pixel along each axis.
    pub subsample: usize,
    pub region_pixels: usize,
    pub pad_factor: f64,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        Self {
            aperture: 0.2e-3,
            supersample: 4,
            mode: DesignMode::PhaseOnly,
            symmetry: Symmetry::None,
            wavelengths: vec![532e-9],
            depths: Vec::new(),
            sensor_distance: None,
            lattice_q: 320,
            sensor_pitch: 4e-6,
            subsample: 2,
            region_pixels: 128,
            pad_factor: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Lens,
    Random,
    /// One lens per scheduled depth (depth task only).
    Multifocal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub kind: InitKind,
    /// Sensor-plane distance of the x and y foci from the axis (opposite sides).
    pub spot_offset: f64,
    /// Focal length of the x lens; defaults to the in-focus value for the
    /// sensor distance and (mean) depth.
    pub focal_length: Option<f64>,
    /// Focal length of the y lens relative to the x lens.
    pub focal_ratio_y: f64,
    /// Wavelength the lens profile is designed for; defaults to the mean.
    pub design_wavelength: Option<f64>,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { kind: InitKind::Lens, spot_offset: 16e-6, focal_length: None, focal_ratio_y: 1.0, design_wavelength: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelsConfig {
    pub derivative_sigma: f64,
    pub derivative_order: u32,
    pub log_sigma: f64,
    pub schedule: DepthSchedule,
    /// Targets for the `custom` task. For `phase_inversion` the positive
    /// part of the first one is the target 0-degree intensity.
    pub custom: Vec<KernelSpec>,
    pub inversion_loss: InversionLoss,
}

impl Default for KernelsConfig {
    fn default() -> Self {
        Self {
            derivative_sigma: 4.0,
            derivative_order: 1,
            log_sigma: 2.0,
            schedule: DepthSchedule { z_min: 1.5e-3, z_max: 3e-3, theta_min: 0.0, theta_max: FRAC_PI_2, samples: 3 },
            custom: Vec::new(),
            inversion_loss: InversionLoss::Cosine,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerSection {
    /// Energy coefficient in units of `1 / Tr R` at initialization.
    pub c1: f64,
    pub c2: f64,
    /// When non-empty, replaces `c1` with a coarse ascending sweep.
    pub c1_sweep: Vec<f64>,
    /// Stop the sweep once efficiency improves by less than this.
    pub sweep_tolerance: f64,
}

impl Default for RegularizerSection {
    fn default() -> Self {
        Self { c1: 0.0, c2: 0.0, c1_sweep: Vec::new(), sweep_tolerance: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateSection {
    /// Trained model used by cell-based designs.
    pub checkpoint: Option<PathBuf>,
    /// Response dataset for `train-surrogate`.
    pub dataset: Option<PathBuf>,
    pub synthetic_widths: usize,
    pub synthetic_wavelengths: usize,
    pub train: TrainConfig,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            dataset: None,
            synthetic_widths: 48,
            synthetic_wavelengths: 10,
            train: toml::from_str("").expect("train defaults"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Scene tensor (`[rows, cols]` or `[slices, rows, cols]`) or grayscale PNG;
    /// when absent a procedural scene is generated.
    pub path: Option<PathBuf>,
    pub size: usize,
    pub train_seed: u64,
    pub test_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { path: None, size: 128, train_seed: 1, test_seed: 99 }
    }
}

/// Pass/fail gates applied by `evaluate`; absent gates are not checked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub max_filter_error: Option<f64>,
    pub min_msbr: Option<f64>,
    pub min_efficiency: Option<f64>,
    pub min_psnr: Option<f64>,
    pub max_conservation_residual: Option<f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            max_filter_error: None,
            min_msbr: None,
            min_efficiency: None,
            min_psnr: None,
            max_conservation_residual: Some(1e-12),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML, resolving relative paths against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> CliResult<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.set_seed(cfg.seed);
        if let Some(base) = base {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent())
    }

    /// The top-level seed drives the optimizer, surrogate training and
    /// sensor noise seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.optimizer.seed = seed;
        self.surrogate.train.seed = seed;
        self.sensor.seed = seed;
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.surrogate.checkpoint, &mut self.surrogate.dataset, &mut self.scene.path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let err = |m: String| Err(CliError::Config(m));
        let o = &self.optics;
        if o.wavelengths.is_empty() || o.wavelengths.iter().any(|w| !(*w > 0.0)) {
            return err("optics.wavelengths must be a non-empty list of positive values".into());
        }
        if o.depths.iter().any(|z| !(*z > 0.0)) {
            return err("optics.depths must be positive".into());
        }
        if self.task == Task::DepthDerivative {
            self.kernels.schedule.validate().map_err(CliError::from)?;
        }
        if matches!(self.task, Task::Custom | Task::PhaseInversion) && self.kernels.custom.is_empty() {
            return err(format!("task {:?} needs at least one kernels.custom entry", self.task));
        }
        for k in &self.kernels.custom {
            k.validate().map_err(CliError::from)?;
        }
        if self.init.kind == InitKind::Multifocal && self.task != Task::DepthDerivative {
            return err("init.kind = multifocal needs task = depth_derivative".into());
        }
        if self.regularizer.c1_sweep.windows(2).any(|w| w[1] <= w[0]) {
            return err("regularizer.c1_sweep must be strictly ascending".into());
        }
        polarsynth::synthesis::RegularizerConfig { c1: self.regularizer.c1, c2: self.regularizer.c2 }
            .validate()
            .map_err(CliError::from)?;
        self.optimizer.validate().map_err(CliError::from)?;
        self.sensor.validate().map_err(CliError::from)?;
        self.psf_config()?.validate().map_err(CliError::from)?;
        Ok(())
    }

    pub fn psf_config(&self) -> CliResult<PsfConfig> {
        let o = &self.optics;
        let sensor_distance = match o.sensor_distance {
            Some(d) => d,
            None => {
                let grid = polarsynth::metasurface::DesignGrid::for_aperture(o.aperture, o.supersample)?;
                lattice_distance(grid.pitch(), o.sensor_pitch / o.subsample as f64, o.wavelengths[0], o.lattice_q)
            }
        };
        Ok(PsfConfig {
            sensor_distance,
            sensor_pitch: o.sensor_pitch,
            subsample: o.subsample,
            region_pixels: o.region_pixels,
            pad_factor: o.pad_factor,
        })
    }

    /// Depth samples of the batch (`None` = infinity).
    pub fn depths(&self) -> Vec<Option<f64>> {
        if self.task == Task::DepthDerivative {
            self.kernels.schedule.depths().into_iter().map(Some).collect()
        } else if self.optics.depths.is_empty() {
            vec![None]
        } else {
            self.optics.depths.iter().map(|&z| Some(z)).collect()
        }
    }

    /// Batch entries, depth-major.
    pub fn batch(&self) -> Vec<BatchEntry> {
        self.depths()
            .into_iter()
            .flat_map(|depth| self.optics.wavelengths.iter().map(move |&wavelength| BatchEntry { depth, wavelength }))
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..12].to_string()
    }
}
