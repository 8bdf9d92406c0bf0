//! Artifact naming and (de)serialization.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;

use polarsynth::io::{Container, PortableTensor};
use polarsynth::metasurface::MetasurfaceDesign;
use polarsynth::synthesis::{OptimState, SynthesisWeights, TraceRow};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Output directory plus the config hash stamped into every file name.
pub struct Outputs {
    pub dir: PathBuf,
    pub hash: String,
}

impl Outputs {
    pub fn create(dir: &Path, hash: &str) -> CliResult<Self> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), hash: hash.to_string() })
    }

    /// `<dir>/<stem>-<hash>.<ext>`
    pub fn path(&self, stem: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{stem}-{}.{ext}", self.hash))
    }

    pub fn write_config(&self, cfg: &ExperimentConfig) -> CliResult<PathBuf> {
        let p = self.path("config", "toml");
        std::fs::write(&p, cfg.to_toml())?;
        Ok(p)
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::artifact(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::artifact(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Appends one row, writing the header when the file is new.
pub fn append_csv<T: Serialize>(path: &Path, row: &T) -> CliResult<()> {
    let fresh = !path.exists();
    let f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(f);
    w.serialize(row).map_err(|e| CliError::artifact(path, e))?;
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| CliError::artifact(path, e))?;
    writeln!(f)?;
    Ok(())
}

pub fn save_tensor(t: &PortableTensor, path: &Path) -> CliResult<()> {
    t.save(path).map_err(|e| CliError::artifact(path, e))
}

pub fn load_tensor(path: &Path) -> CliResult<PortableTensor> {
    if !path.exists() {
        return Err(CliError::artifact(path, "not found"));
    }
    PortableTensor::load(path).map_err(|e| CliError::artifact(path, e))
}

/// Scene slices from a portable tensor (`[rows, cols]` or `[slices, rows,
/// cols]`) or an 8/16-bit grayscale PNG scaled to `[0, 1]`.
pub fn load_scene(path: &Path) -> CliResult<Vec<Array2<f64>>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        return Ok(vec![load_png_gray(path)?]);
    }
    let t = load_tensor(path)?;
    match t.shape.len() {
        2 => Ok(vec![t.to_array2()?]),
        3 => Ok(t.to_array3()?.outer_iter().map(|s| s.to_owned()).collect()),
        _ => Err(CliError::artifact(path, format!("scene tensor has rank {}, expected 2 or 3", t.shape.len()))),
    }
}

fn load_png_gray(path: &Path) -> CliResult<Array2<f64>> {
    let f = File::open(path).map_err(|e| CliError::artifact(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(f));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| CliError::artifact(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| CliError::artifact(path, e))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(CliError::artifact(path, "scene PNG must be grayscale"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data: Vec<f64> = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..2 * w * h].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0).collect(),
        _ => buf[..w * h].iter().map(|&v| v as f64 / 255.0).collect(),
    };
    Ok(Array2::from_shape_vec((h, w), data).expect("decoded size"))
}

/// Everything needed to evaluate a design or continue its optimization.
pub struct RunCheckpoint {
    pub config: ExperimentConfig,
    pub design: MetasurfaceDesign,
    pub weights: SynthesisWeights,
    pub state: OptimState,
    pub trace: Vec<TraceRow>,
    /// Energy coefficient scale fixed at the first run.
    pub kappa: f64,
}

impl RunCheckpoint {
    pub fn save(&self, path: &Path) -> CliResult<()> {
        let mut c = self.design.to_container();
        c.kind = "checkpoint".into();
        self.state.write_into(&mut c);
        let alpha: Vec<f64> = self.weights.alpha.iter().flatten().copied().collect();
        c.put("alpha", vec![self.weights.alpha.len(), 4], alpha);
        c.meta["active"] = serde_json::json!(self.weights.active);
        c.meta["config"] = serde_json::to_value(&self.config).expect("config serializes");
        c.meta["trace"] = serde_json::to_value(&self.trace).expect("trace serializes");
        c.meta["kappa"] = serde_json::json!(self.kappa);
        c.save(path).map_err(|e| CliError::artifact(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.exists() {
            return Err(CliError::artifact(path, "checkpoint not found"));
        }
        let c = Container::load(path).map_err(|e| CliError::artifact(path, e))?;
        Self::from_container(&c).map_err(|e| match e {
            CliError::Artifact(m) => CliError::artifact(path, m),
            other => other,
        })
    }

    fn from_container(c: &Container) -> CliResult<Self> {
        if c.kind != "checkpoint" {
            return Err(CliError::Artifact(format!("expected a checkpoint, found a {} container", c.kind)));
        }
        let meta = |k: &str| c.meta.get(k).cloned().ok_or_else(|| CliError::Artifact(format!("checkpoint lacks {k}")));
        let bad = |e: serde_json::Error| CliError::Artifact(format!("bad checkpoint metadata: {e}"));
        let config: ExperimentConfig = serde_json::from_value(meta("config")?).map_err(bad)?;
        config.validate()?;
        let (shape, data) = c.get("alpha")?;
        if shape.len() != 2 || shape[1] != 4 {
            return Err(CliError::Artifact(format!("alpha has shape {shape:?}")));
        }
        let alpha = data.chunks(4).map(|a| [a[0], a[1], a[2], a[3]]).collect();
        let active: [bool; 4] = serde_json::from_value(meta("active")?).map_err(bad)?;
        Ok(Self {
            design: MetasurfaceDesign::from_container(c)?,
            weights: SynthesisWeights::new(alpha, active)
                .map_err(|e| CliError::Artifact(format!("stored weights are invalid: {e}")))?,
            state: OptimState::read_from(c)?,
            trace: serde_json::from_value(meta("trace")?).map_err(bad)?,
            kappa: serde_json::from_value(meta("kappa")?).map_err(bad)?,
            config,
        })
    }
}
