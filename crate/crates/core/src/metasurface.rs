//! Metasurface designs and their per-polarization transmittance profiles.
//!
//! A design holds two real parameter maps, one per polarization: phases in
//! `PhaseOnly` mode, unconstrained width latents in `CellBased` mode. With
//! radial symmetry each map is a single row indexed by ring number.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::GridSpec;
use crate::io::{Container, PortableTensor};
use crate::surrogate::{
    latent_from_width, reparameterize, reparameterize_derivative, CellParams, SurrogateEval, SurrogateModel, CELL_PITCH,
    WIDTH_MAX, WIDTH_MIN,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignMode {
    PhaseOnly,
    CellBased,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    #[default]
    None,
    Radial,
}

/// Square cell lattice covering a circular aperture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignGrid {
    pub cells: usize,
    /// Physical cells (350 nm) per simulated cell along each axis.
    pub supersample: usize,
    /// Aperture diameter in metres.
    pub aperture: f64,
}

impl DesignGrid {
    /// Smallest even lattice that contains the aperture.
    pub fn for_aperture(aperture: f64, supersample: usize) -> Result<Self> {
        if !(aperture > 0.0) || supersample == 0 {
            return Err(Error::Config("aperture and supersample must be positive".into()));
        }
        let pitch = CELL_PITCH * supersample as f64;
        let cells = 2 * (0.5 * aperture / pitch - 1e-9).ceil() as usize;
        Ok(Self { cells: cells.max(2), supersample, aperture })
    }

    pub fn pitch(&self) -> f64 {
        CELL_PITCH * self.supersample as f64
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec::square(self.cells, self.pitch())
    }

    fn radius2(&self, i: usize, j: usize) -> f64 {
        let g = self.spec();
        g.x(j).powi(2) + g.y(i).powi(2)
    }

    /// 1 inside the aperture (cell centre within the radius), 0 outside.
    pub fn mask(&self) -> Array2<f64> {
        let r2 = (0.5 * self.aperture).powi(2);
        Array2::from_shape_fn((self.cells, self.cells), |(i, j)| if self.radius2(i, j) <= r2 { 1.0 } else { 0.0 })
    }

    /// Ring number `round(r / pitch)` of every cell.
    pub fn ring_index(&self) -> Array2<usize> {
        let p = self.pitch();
        Array2::from_shape_fn((self.cells, self.cells), |(i, j)| (self.radius2(i, j).sqrt() / p).round() as usize)
    }

    pub fn n_rings(&self) -> usize {
        (0.5 * self.aperture / self.pitch()).round() as usize + 1
    }

    pub fn param_shape(&self, symmetry: Symmetry) -> (usize, usize) {
        match symmetry {
            Symmetry::None => (self.cells, self.cells),
            Symmetry::Radial => (1, self.n_rings()),
        }
    }

    /// Physical position of every parameter entry (cell centre, or ring radius along +x).
    fn param_positions(&self, symmetry: Symmetry) -> Array2<(f64, f64)> {
        let g = self.spec();
        match symmetry {
            Symmetry::None => Array2::from_shape_fn((self.cells, self.cells), |(i, j)| (g.x(j), g.y(i))),
            Symmetry::Radial => Array2::from_shape_fn((1, self.n_rings()), |(_, r)| (r as f64 * self.pitch(), 0.0)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetasurfaceDesign {
    pub mode: DesignMode,
    pub symmetry: Symmetry,
    pub grid: DesignGrid,
    /// Uniform amplitude transmittance in phase-only mode.
    pub transmittance: f64,
    /// `[x, y]` polarization parameter maps.
    pub params: [Array2<f64>; 2],
    pub seed: Option<u64>,
}

/// Assembled complex transmittance on the cell lattice plus what the VJP needs.
pub struct Profiles {
    pub t_x: Array2<Complex64>,
    pub t_y: Array2<Complex64>,
    eval: Option<(SurrogateEval, Vec<(f64, f64)>)>,
}

impl MetasurfaceDesign {
    pub fn new(
        mode: DesignMode,
        symmetry: Symmetry,
        grid: DesignGrid,
        params: [Array2<f64>; 2],
        seed: Option<u64>,
    ) -> Result<Self> {
        let d = Self { mode, symmetry, grid, transmittance: 1.0, params, seed };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.grid.param_shape(self.symmetry);
        for p in &self.params {
            if p.dim() != shape {
                return Err(Error::Shape(format!("design parameters {:?}, expected {shape:?}", p.dim())));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("design parameters must be finite".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.transmittance) {
            return Err(Error::Domain("transmittance must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        2 * self.params[0].len()
    }

    /// Parameters flattened as `[x..., y...]`.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params[0].iter().chain(self.params[1].iter()).copied().collect()
    }

    pub fn set_flat_params(&mut self, v: &[f64]) {
        let n = self.params[0].len();
        assert_eq!(v.len(), 2 * n);
        for (dst, src) in self.params[0].iter_mut().zip(&v[..n]) {
            *dst = *src;
        }
        for (dst, src) in self.params[1].iter_mut().zip(&v[n..]) {
            *dst = *src;
        }
    }

    fn param_of_cell(&self) -> impl Fn(usize, usize) -> (usize, usize) + '_ {
        let rings = match self.symmetry {
            Symmetry::Radial => Some(self.grid.ring_index()),
            Symmetry::None => None,
        };
        move |i, j| match &rings {
            Some(r) => (0, r[[i, j]]),
            None => (i, j),
        }
    }

    /// Widths of every parameter entry (cell-based mode).
    pub fn widths(&self) -> Result<Array2<CellParams>> {
        if self.mode != DesignMode::CellBased {
            return Err(Error::Domain("widths are only defined for cell-based designs".into()));
        }
        Ok(ndarray::Zip::from(&self.params[0]).and(&self.params[1]).map_collect(|&a, &b| reparameterize((a, b))))
    }

    pub fn assemble(&self, model: Option<&SurrogateModel>, wavelength: f64) -> Result<Profiles> {
        assemble_profiles(self, model, wavelength)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("design", 1);
        c.meta = serde_json::json!({
            "mode": self.mode,
            "symmetry": self.symmetry,
            "grid": self.grid,
            "pitch_m": self.grid.pitch(),
            "transmittance": self.transmittance,
            "seed": self.seed,
        });
        c.put_array2("param_x", &self.params[0]);
        c.put_array2("param_y", &self.params[1]);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "design" && c.kind != "checkpoint" {
            return Err(Error::Format(format!("expected a design container, found {}", c.kind)));
        }
        let m = &c.meta;
        let field = |k: &str| m.get(k).cloned().ok_or_else(|| Error::Format(format!("design metadata lacks {k}")));
        let d = Self {
            mode: de(field("mode")?)?,
            symmetry: de(field("symmetry")?)?,
            grid: de(field("grid")?)?,
            transmittance: de(field("transmittance")?)?,
            params: [c.get_array2("param_x")?, c.get_array2("param_y")?],
            seed: de(field("seed")?)?,
        };
        d.validate().map_err(|e| Error::Format(format!("stored design is invalid: {e}")))?;
        Ok(d)
    }

    /// Parameter maps as a `[2, rows, cols]` tensor.
    pub fn to_tensor(&self) -> PortableTensor {
        let (r, c) = self.params[0].dim();
        let data = self.params.iter().flat_map(|p| p.iter().map(|&v| v as f32)).collect();
        let units = match self.mode {
            DesignMode::PhaseOnly => "rad",
            DesignMode::CellBased => "latent",
        };
        PortableTensor::new(vec![2, r, c], vec!["polarization".into(), "y".into(), "x".into()], units, data)
            .expect("shape matches data")
            .with_meta(self.to_container().meta)
    }
}

fn de<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Format(e.to_string()))
}

/// Per-polarization complex transmittance maps `t e^{i phi}`, aperture-masked.
pub fn assemble_profiles(design: &MetasurfaceDesign, model: Option<&SurrogateModel>, wavelength: f64) -> Result<Profiles> {
    design.validate()?;
    let mask = design.grid.mask();
    let n = design.grid.cells;
    let map = design.param_of_cell();
    match design.mode {
        DesignMode::PhaseOnly => {
            let t = design.transmittance;
            let build = |p: &Array2<f64>| {
                Array2::from_shape_fn((n, n), |(i, j)| {
                    if mask[[i, j]] == 0.0 {
                        Complex64::new(0.0, 0.0)
                    } else {
                        Complex64::from_polar(t, p[map(i, j)])
                    }
                })
            };
            Ok(Profiles { t_x: build(&design.params[0]), t_y: build(&design.params[1]), eval: None })
        }
        DesignMode::CellBased => {
            let model = model.ok_or_else(|| Error::Config("cell-based design needs a surrogate model".into()))?;
            let (lo, hi) = model.wavelength_range();
            if !(wavelength >= lo * (1.0 - 1e-9) && wavelength <= hi * (1.0 + 1e-9)) {
                return Err(Error::Domain(format!(
                    "wavelength {wavelength:e} outside the surrogate range [{lo:e}, {hi:e}]"
                )));
            }
            let latents: Vec<(f64, f64)> =
                design.params[0].iter().zip(design.params[1].iter()).map(|(&a, &b)| (a, b)).collect();
            let inputs = Array2::from_shape_fn((latents.len(), 3), |(k, c)| {
                let w = reparameterize(latents[k]);
                [w.w_x, w.w_y, wavelength][c]
            });
            let eval = model.forward(&inputs)?;
            let (_, pc) = design.params[0].dim();
            let f = &eval.fields;
            let build = |off: usize| {
                Array2::from_shape_fn((n, n), |(i, j)| {
                    if mask[[i, j]] == 0.0 {
                        return Complex64::new(0.0, 0.0);
                    }
                    let (a, b) = map(i, j);
                    let k = a * pc + b;
                    Complex64::new(f[[k, off]], f[[k, off + 1]])
                })
            };
            Ok(Profiles { t_x: build(0), t_y: build(2), eval: Some((eval, latents)) })
        }
    }
}

impl Profiles {
    /// Gradient w.r.t. the design parameter maps, given complex gradients
    /// `dL/dRe T + i dL/dIm T` for each polarization.
    pub fn vjp(
        &self,
        design: &MetasurfaceDesign,
        model: Option<&SurrogateModel>,
        g_x: &Array2<Complex64>,
        g_y: &Array2<Complex64>,
    ) -> Result<[Array2<f64>; 2]> {
        let shape = design.grid.param_shape(design.symmetry);
        let map = design.param_of_cell();
        let mask = design.grid.mask();
        let n = design.grid.cells;
        match design.mode {
            DesignMode::PhaseOnly => {
                let mut out = [Array2::zeros(shape), Array2::zeros(shape)];
                for (o, (t, g)) in out.iter_mut().zip([(&self.t_x, g_x), (&self.t_y, g_y)]) {
                    for i in 0..n {
                        for j in 0..n {
                            if mask[[i, j]] != 0.0 {
                                let z = t[[i, j]];
                                o[map(i, j)] += (g[[i, j]].conj() * Complex64::new(-z.im, z.re)).re;
                            }
                        }
                    }
                }
                Ok(out)
            }
            DesignMode::CellBased => {
                let model = model.ok_or_else(|| Error::Config("cell-based design needs a surrogate model".into()))?;
                let (eval, latents) = self.eval.as_ref().expect("cell-based profiles carry surrogate state");
                let pc = shape.1;
                let mut gf = Array2::zeros((latents.len(), 4));
                for i in 0..n {
                    for j in 0..n {
                        if mask[[i, j]] != 0.0 {
                            let (a, b) = map(i, j);
                            let k = a * pc + b;
                            gf[[k, 0]] += g_x[[i, j]].re;
                            gf[[k, 1]] += g_x[[i, j]].im;
                            gf[[k, 2]] += g_y[[i, j]].re;
                            gf[[k, 3]] += g_y[[i, j]].im;
                        }
                    }
                }
                let gw = model.vjp(eval, &gf);
                let mut out = [Array2::zeros(shape), Array2::zeros(shape)];
                for (k, &(lx, ly)) in latents.iter().enumerate() {
                    let (a, b) = (k / pc, k % pc);
                    out[0][[a, b]] = gw[[k, 0]] * reparameterize_derivative(lx);
                    out[1][[a, b]] = gw[[k, 1]] * reparameterize_derivative(ly);
                }
                Ok(out)
            }
        }
    }
}

/// Hyperbolic lens phase focusing to `offset` at distance `f`.
pub fn lens_phase(x: f64, y: f64, focal_length: f64, wavelength: f64, offset: (f64, f64)) -> f64 {
    let k = 2.0 * PI / wavelength;
    let (dx, dy) = (x - offset.0, y - offset.1);
    -k * ((dx * dx + dy * dy + focal_length * focal_length).sqrt() - focal_length)
}

/// Width lookup grid used to invert phase targets.
const LOOKUP_STEPS: usize = 61;

/// Lens initialization, one focus offset per polarization `[x, y]`.
///
/// Cell-based designs pick, per cell, the width pair on a lookup grid whose
/// surrogate response is closest to the unit-amplitude target in both
/// polarizations.
#[allow(clippy::too_many_arguments)]
pub fn lens_phase_init(
    grid: DesignGrid,
    mode: DesignMode,
    symmetry: Symmetry,
    focal_length: f64,
    wavelength: f64,
    offsets: [(f64, f64); 2],
    model: Option<&SurrogateModel>,
) -> Result<MetasurfaceDesign> {
    if !(focal_length > 0.0) {
        return Err(Error::Domain(format!("focal length {focal_length} must be positive")));
    }
    if symmetry == Symmetry::Radial && offsets.iter().any(|o| *o != (0.0, 0.0)) {
        return Err(Error::Config("radially symmetric designs cannot focus off axis".into()));
    }
    let pos = grid.param_positions(symmetry);
    let phases: [Array2<f64>; 2] = [0, 1].map(|p| pos.mapv(|(x, y)| lens_phase(x, y, focal_length, wavelength, offsets[p])));
    let params = match mode {
        DesignMode::PhaseOnly => phases,
        DesignMode::CellBased => {
            let model = model.ok_or_else(|| Error::Config("cell-based init needs a surrogate model".into()))?;
            invert_by_lookup(&phases, model, wavelength)?
        }
    };
    MetasurfaceDesign::new(mode, symmetry, grid, params, None)
}

fn invert_by_lookup(phases: &[Array2<f64>; 2], model: &SurrogateModel, wavelength: f64) -> Result<[Array2<f64>; 2]> {
    let step = (WIDTH_MAX - WIDTH_MIN) / (LOOKUP_STEPS + 1) as f64;
    let widths: Vec<f64> = (1..=LOOKUP_STEPS).map(|i| WIDTH_MIN + step * i as f64).collect();
    let cells: Vec<(CellParams, f64)> = widths
        .iter()
        .flat_map(|&a| widths.iter().map(move |&b| (CellParams { w_x: a, w_y: b }, wavelength)))
        .collect();
    let table: Vec<(Complex64, Complex64)> =
        model.eval_batch(&cells)?.iter().map(|r| (r.field_x(), r.field_y())).collect();
    let shape = phases[0].dim();
    let mut lx = Array2::zeros(shape);
    let mut ly = Array2::zeros(shape);
    for ((idx, &px), &py) in phases[0].indexed_iter().zip(phases[1].iter()) {
        let (tx, ty) = (Complex64::from_polar(1.0, px), Complex64::from_polar(1.0, py));
        let best = table
            .iter()
            .enumerate()
            .map(|(k, (ax, ay))| (k, (ax - tx).norm_sqr() + (ay - ty).norm_sqr()))
            .fold((0, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc })
            .0;
        lx[idx] = latent_from_width(cells[best].0.w_x)?;
        ly[idx] = latent_from_width(cells[best].0.w_y)?;
    }
    Ok([lx, ly])
}

/// One focus of a multiplexed lens: focal length and per-polarization
/// `[x, y]` lens-centre offsets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Focus {
    pub focal_length: f64,
    pub offsets: [(f64, f64); 2],
}

/// Phase-only multiplexed lens: the phase of the equal-weight phasor sum of
/// one lens per focus, per polarization.
pub fn multifocal_phase_init(grid: DesignGrid, wavelength: f64, foci: &[Focus]) -> Result<MetasurfaceDesign> {
    if foci.is_empty() {
        return Err(Error::Config("multifocal init needs at least one focus".into()));
    }
    if let Some(f) = foci.iter().find(|f| !(f.focal_length > 0.0)) {
        return Err(Error::Domain(format!("focal length {} must be positive", f.focal_length)));
    }
    let pos = grid.param_positions(Symmetry::None);
    let params = [0, 1].map(|p| {
        pos.mapv(|(x, y)| {
            foci.iter()
                .map(|f| Complex64::from_polar(1.0, lens_phase(x, y, f.focal_length, wavelength, f.offsets[p])))
                .sum::<Complex64>()
                .arg()
        })
    });
    MetasurfaceDesign::new(DesignMode::PhaseOnly, Symmetry::None, grid, params, None)
}

/// Phase-only design with i.i.d. uniform phases in `[0, 2 pi)`.
pub fn random_phase_init(grid: DesignGrid, symmetry: Symmetry, seed: u64) -> Result<MetasurfaceDesign> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = grid.param_shape(symmetry);
    let mut draw = || Array2::from_shape_fn(shape, |_| rng.random_range(0.0..2.0 * PI));
    let params = [draw(), draw()];
    MetasurfaceDesign::new(DesignMode::PhaseOnly, symmetry, grid, params, Some(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{field_energy, plane_wave, ComplexField, FresnelPropagator, Plane, SimulationRegion};
    use crate::gradcheck::check_gradient;

    fn small_grid() -> DesignGrid {
        DesignGrid::for_aperture(40e-6, 4).unwrap()
    }

    #[test]
    fn grid_geometry() {
        let g = DesignGrid::for_aperture(0.2e-3, 4).unwrap();
        assert_eq!(g.cells, 144);
        assert!((g.pitch() - 1.4e-6).abs() < 1e-18);
        let m = g.mask();
        assert_eq!(m[[72, 72]], 1.0);
        assert_eq!(m[[0, 0]], 0.0);
        let area = m.sum() * g.pitch().powi(2);
        assert!((area / (PI * 1e-8) - 1.0).abs() < 0.02);
    }

    #[test]
    fn zero_phase_gives_aperture_indicator() {
        let g = small_grid();
        let shape = g.param_shape(Symmetry::None);
        let d = MetasurfaceDesign::new(DesignMode::PhaseOnly, Symmetry::None, g, [Array2::zeros(shape), Array2::zeros(shape)], None)
            .unwrap();
        let p = d.assemble(None, 532e-9).unwrap();
        let m = g.mask();
        for (a, b) in p.t_x.iter().zip(m.iter()) {
            assert_eq!(*a, Complex64::new(*b, 0.0));
        }
        assert_eq!(p.t_x, p.t_y);
    }

    #[test]
    fn outside_aperture_is_exactly_zero() {
        let g = small_grid();
        let d = random_phase_init(g, Symmetry::None, 3).unwrap();
        let p = d.assemble(None, 532e-9).unwrap();
        let r2 = (0.5 * g.aperture).powi(2);
        let spec = g.spec();
        for ((i, j), z) in p.t_x.indexed_iter() {
            if spec.x(j).powi(2) + spec.y(i).powi(2) > r2 {
                assert_eq!(z.norm(), 0.0);
            }
        }
    }

    #[test]
    fn random_init_properties() {
        let g = DesignGrid::for_aperture(0.2e-3, 4).unwrap();
        let a = random_phase_init(g, Symmetry::None, 1).unwrap();
        let b = random_phase_init(g, Symmetry::None, 1).unwrap();
        let c = random_phase_init(g, Symmetry::None, 2).unwrap();
        assert_eq!(a, b);
        let differ = a.params[0].iter().zip(c.params[0].iter()).filter(|(x, y)| x != y).count();
        assert!(differ as f64 >= 0.99 * a.params[0].len() as f64);
        // Chi-squared test against uniform with 20 bins; 1% critical value for 19 dof is 36.19.
        let bins = 20;
        let mut counts = vec![0usize; bins];
        for v in a.params[0].iter().chain(a.params[1].iter()) {
            assert!((0.0..2.0 * PI).contains(v));
            counts[((v / (2.0 * PI)) * bins as f64) as usize] += 1;
        }
        let n = a.n_params() as f64;
        let e = n / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 36.19, "chi2 {chi2}");
    }

    #[test]
    fn lens_init_is_symmetric_without_offset() {
        let g = small_grid();
        let d = lens_phase_init(g, DesignMode::PhaseOnly, Symmetry::None, 1e-3, 532e-9, [(0.0, 0.0); 2], None).unwrap();
        let n = g.cells;
        // Centre sample is at index n/2, so mirror pairs are (n/2 - k, n/2 + k).
        for i in 1..n {
            for j in 1..n {
                let (mi, mj) = (n - i, n - j);
                assert!((d.params[0][[i, j]] - d.params[0][[mi, mj]]).abs() < 1e-9);
                assert!((d.params[0][[i, j]] - d.params[0][[j, i]]).abs() < 1e-9);
            }
        }
        assert!(lens_phase_init(g, DesignMode::PhaseOnly, Symmetry::None, 0.0, 532e-9, [(0.0, 0.0); 2], None).is_err());
    }

    #[test]
    fn single_focus_matches_lens_init() {
        let g = small_grid();
        let offsets = [(3e-6, 0.0), (0.0, -2e-6)];
        let a = lens_phase_init(g, DesignMode::PhaseOnly, Symmetry::None, 1e-3, 532e-9, offsets, None).unwrap();
        let b = multifocal_phase_init(g, 532e-9, &[Focus { focal_length: 1e-3, offsets }]).unwrap();
        for p in 0..2 {
            for (x, y) in a.params[p].iter().zip(b.params[p].iter()) {
                let d = Complex64::from_polar(1.0, *x) - Complex64::from_polar(1.0, *y);
                assert!(d.norm() < 1e-9);
            }
        }
        assert!(multifocal_phase_init(g, 532e-9, &[]).is_err());
    }

    fn desk_lens(offsets: [(f64, f64); 2]) -> (DesignGrid, f64, FresnelPropagator, MetasurfaceDesign) {
        let lam = 532e-9;
        let g = DesignGrid::for_aperture(0.2e-3, 4).unwrap();
        let s = 2e-6;
        let d = 320.0 * s * g.pitch() / lam;
        let region = SimulationRegion::centered(256, s);
        let prop = FresnelPropagator::new(g.spec(), lam, d, region, 2.0).unwrap();
        let des = lens_phase_init(g, DesignMode::PhaseOnly, Symmetry::None, d, lam, offsets, None).unwrap();
        (g, d, prop, des)
    }

    #[test]
    fn lens_init_focuses_energy() {
        let (g, d, prop, des) = desk_lens([(0.0, 0.0); 2]);
        let p = des.assemble(None, 532e-9).unwrap();
        let inc = plane_wave(g.spec(), 532e-9).unwrap();
        let f = ComplexField::new(&p.t_x * inc.amplitude(), g.pitch(), 532e-9, Plane::Optic).unwrap();
        let out = prop.propagate(&f).unwrap();
        let airy = 1.22 * 532e-9 * d / g.aperture;
        let region = prop.region();
        let mut inside = 0.0;
        for ((i, j), v) in out.intensity().indexed_iter() {
            if region.u(j).hypot(region.v(i)) <= 5.0 * airy {
                inside += v * region.sample_pitch.powi(2);
            }
        }
        let frac = inside / field_energy(&f);
        assert!(frac >= 0.5, "fraction {frac}");
    }

    #[test]
    fn opposite_offsets_separate_foci() {
        let sft = 20e-6;
        let (g, _, prop, des) = desk_lens([(sft, 0.0), (-sft, 0.0)]);
        let p = des.assemble(None, 532e-9).unwrap();
        let region = prop.region();
        let centroid = |t: &Array2<Complex64>| {
            let out = prop.forward(t);
            let (mut m, mut mu) = (0.0, 0.0);
            for ((i, j), z) in out.indexed_iter() {
                let w = z.norm_sqr();
                if region.u(j).abs() < 60e-6 && region.v(i).abs() < 60e-6 && (region.u(j) * sft.signum()).abs() >= 0.0 {
                    m += w;
                    mu += w * region.u(j);
                }
            }
            mu / m
        };
        let _ = g;
        let half = |t: &Array2<Complex64>, sign: f64| {
            let out = prop.forward(t);
            let (mut m, mut mu) = (0.0, 0.0);
            for ((i, j), z) in out.indexed_iter() {
                let u = region.u(j);
                if u * sign > 0.0 && region.v(i).abs() < 30e-6 {
                    m += z.norm_sqr();
                    mu += z.norm_sqr() * u;
                }
            }
            mu / m
        };
        let (cx, cy) = (half(&p.t_x, 1.0), half(&p.t_y, -1.0));
        let sensor_pixel = 4e-6;
        assert!(((cx - cy) - 2.0 * sft).abs() < sensor_pixel, "{cx} {cy}");
        assert!(centroid(&p.t_x) > 0.0);
    }

    #[test]
    fn radial_design_expands_by_ring() {
        let g = small_grid();
        let mut d = lens_phase_init(g, DesignMode::PhaseOnly, Symmetry::Radial, 1e-3, 532e-9, [(0.0, 0.0); 2], None).unwrap();
        assert_eq!(d.params[0].dim(), (1, g.n_rings()));
        d.params[0][[0, 3]] = 1.234;
        let p = d.assemble(None, 532e-9).unwrap();
        let rings = g.ring_index();
        for ((i, j), z) in p.t_x.indexed_iter() {
            if rings[[i, j]] == 3 && g.mask()[[i, j]] == 1.0 {
                assert!((z.arg() - 1.234).abs() < 1e-12);
            }
        }
        assert!(lens_phase_init(g, DesignMode::PhaseOnly, Symmetry::Radial, 1e-3, 532e-9, [(1e-6, 0.0); 2], None).is_err());
    }

    fn loss_of(design: &MetasurfaceDesign, model: Option<&SurrogateModel>, wx: &Array2<Complex64>, wy: &Array2<Complex64>) -> f64 {
        let p = design.assemble(model, 532e-9).unwrap();
        // Real-part projection plus a quadratic term, so both Re and Im paths matter.
        let mut l = 0.0;
        for ((a, b), (c, d)) in p.t_x.iter().zip(p.t_y.iter()).zip(wx.iter().zip(wy.iter())) {
            l += (a * c.conj()).re + (b * d.conj()).re + 0.3 * (a * b.conj()).re;
        }
        l
    }

    fn grads(design: &MetasurfaceDesign, model: Option<&SurrogateModel>, wx: &Array2<Complex64>, wy: &Array2<Complex64>) -> Vec<f64> {
        let p = design.assemble(model, 532e-9).unwrap();
        // d/dconj-style complex gradient of Re(a conj c) + 0.3 Re(a conj b).
        let gx = wx + &p.t_y.mapv(|z| z * 0.3);
        let gy = wy + &p.t_x.mapv(|z| z * 0.3);
        let g = p.vjp(design, model, &gx, &gy).unwrap();
        g[0].iter().chain(g[1].iter()).copied().collect()
    }

    fn weights(n: usize, seed: u64) -> (Array2<Complex64>, Array2<Complex64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = || Array2::from_shape_fn((n, n), |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        (w(), w())
    }

    #[test]
    fn phase_only_vjp_matches_finite_differences() {
        for sym in [Symmetry::None, Symmetry::Radial] {
            let g = small_grid();
            let d0 = random_phase_init(g, sym, 8).unwrap();
            let (wx, wy) = weights(g.cells, 9);
            let grad = grads(&d0, None, &wx, &wy);
            let x0 = d0.flat_params();
            let coords: Vec<usize> = (0..x0.len()).step_by((x0.len() / 25).max(1)).collect();
            let err = check_gradient(
                |x| {
                    let mut d = d0.clone();
                    d.set_flat_params(x);
                    loss_of(&d, None, &wx, &wy)
                },
                &x0,
                &grad,
                &coords,
                1e-6,
            );
            assert!(err < 1e-4, "{sym:?}: {err}");
        }
    }

    #[test]
    fn container_round_trip() {
        let d = random_phase_init(small_grid(), Symmetry::Radial, 4).unwrap();
        let mut buf = Vec::new();
        d.to_container().write_to(&mut buf).unwrap();
        let back = MetasurfaceDesign::from_container(&Container::read_from(&buf[..]).unwrap()).unwrap();
        assert_eq!(back, d);
        let t = d.to_tensor();
        assert_eq!(t.shape, vec![2, 1, small_grid().n_rings()]);
    }

    #[test]
    fn cell_based_requires_model() {
        let g = small_grid();
        let shape = g.param_shape(Symmetry::None);
        let d = MetasurfaceDesign::new(DesignMode::CellBased, Symmetry::None, g, [Array2::zeros(shape), Array2::zeros(shape)], None)
            .unwrap();
        assert!(matches!(d.assemble(None, 532e-9), Err(Error::Config(_))));
    }
}
