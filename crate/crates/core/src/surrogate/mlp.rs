//! Two-hidden-layer ReLU network from `(w_x, w_y, lambda)` to
//! `(t_x, t_y, cos phi_x, sin phi_x, cos phi_y, sin phi_y)`.
//!
//! Transmittances pass through a logistic, each phase pair is projected onto
//! the unit circle. Training runs in f32; the stored model is f64.

use ndarray::{Array1, Array2, ArrayView2, Axis, NdFloat};
use num_traits::FromPrimitive;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::{CellParams, OpticalResponse, ResponseDataset};
use crate::error::{Error, Result};
use crate::io::Container;

const N_IN: usize = 3;
const N_OUT: usize = 6;
const NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Debug)]
struct Net<F> {
    w: Vec<Array2<F>>,
    b: Vec<Array1<F>>,
}

struct Cache<F> {
    x: Array2<F>,
    acts: Vec<Array2<F>>,
    out: Array2<F>,
}

fn logistic<F: NdFloat>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: NdFloat + FromPrimitive> Net<F> {
    fn init(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut w = Vec::new();
        let mut b = Vec::new();
        for win in sizes.windows(2) {
            // Uniform in +-1/sqrt(fan_in) for weights and biases; nonzero
            // biases spread the first-layer ReLU kinks across the input box.
            let bound = 1.0 / (win[0] as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            w.push(Array2::from_shape_fn((win[0], win[1]), |_| F::from_f64(u.sample(rng)).unwrap()));
            b.push(Array1::from_shape_fn(win[1], |_| F::from_f64(u.sample(rng)).unwrap()));
        }
        Self { w, b }
    }

    fn cast<G: NdFloat + FromPrimitive>(&self) -> Net<G> {
        let c = |v: F| G::from_f64(v.to_f64().unwrap()).unwrap();
        Net { w: self.w.iter().map(|a| a.mapv(c)).collect(), b: self.b.iter().map(|a| a.mapv(c)).collect() }
    }

    fn forward(&self, x: ArrayView2<F>) -> Cache<F> {
        let mut acts = Vec::with_capacity(self.w.len() - 1);
        let mut h = x.to_owned();
        let last = self.w.len() - 1;
        for (l, (w, b)) in self.w.iter().zip(&self.b).enumerate() {
            let mut z = h.dot(w);
            z += b;
            if l < last {
                z.mapv_inplace(|v| v.max(F::zero()));
                acts.push(z.clone());
            }
            h = z;
        }
        Cache { x: x.to_owned(), acts, out: h }
    }

    /// Gradients w.r.t. weights, biases and inputs, given `g_out` w.r.t. the raw outputs.
    fn backward(&self, cache: &Cache<F>, g_out: Array2<F>, want_params: bool) -> (Vec<Array2<F>>, Vec<Array1<F>>, Array2<F>) {
        let n_layers = self.w.len();
        let mut gw = vec![Array2::zeros((0, 0)); n_layers];
        let mut gb = vec![Array1::zeros(0); n_layers];
        let mut g = g_out;
        for l in (0..n_layers).rev() {
            let input = if l == 0 { &cache.x } else { &cache.acts[l - 1] };
            if want_params {
                gw[l] = input.t().dot(&g);
                gb[l] = g.sum_axis(Axis(0));
            }
            let mut gi = g.dot(&self.w[l].t());
            if l > 0 {
                gi.zip_mut_with(&cache.acts[l - 1], |a, &act| {
                    if act <= F::zero() {
                        *a = F::zero();
                    }
                });
            }
            g = gi;
        }
        (gw, gb, g)
    }
}

/// Raw network outputs to `(Re A_x, Im A_x, Re A_y, Im A_y)`.
fn head<F: NdFloat + FromPrimitive>(o: &Array2<F>) -> Array2<F> {
    let guard = F::from_f64(NORM_GUARD).unwrap();
    let mut a = Array2::zeros((o.nrows(), 4));
    for (r, mut out) in o.outer_iter().zip(a.outer_iter_mut()) {
        for p in 0..2 {
            let t = logistic(r[p]);
            let (c, s) = (r[2 + 2 * p], r[3 + 2 * p]);
            let n = (c * c + s * s).sqrt().max(guard);
            out[2 * p] = t * c / n;
            out[2 * p + 1] = t * s / n;
        }
    }
    a
}

/// Chain `g_a` (w.r.t. head outputs) back to raw outputs.
fn head_vjp<F: NdFloat + FromPrimitive>(o: &Array2<F>, g_a: &Array2<F>) -> Array2<F> {
    let guard = F::from_f64(NORM_GUARD).unwrap();
    let mut g = Array2::zeros(o.raw_dim());
    for ((r, ga), mut go) in o.outer_iter().zip(g_a.outer_iter()).zip(g.outer_iter_mut()) {
        for p in 0..2 {
            let t = logistic(r[p]);
            let (c, s) = (r[2 + 2 * p], r[3 + 2 * p]);
            let n = (c * c + s * s).sqrt().max(guard);
            let (uc, us) = (c / n, s / n);
            let (g0, g1) = (ga[2 * p], ga[2 * p + 1]);
            go[p] = t * (F::one() - t) * (g0 * uc + g1 * us);
            let dot = g0 * uc + g1 * us;
            go[2 + 2 * p] = t / n * (g0 - uc * dot);
            go[3 + 2 * p] = t / n * (g1 - us * dot);
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::hidden")]
    pub hidden: [usize; 2],
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub learning_rate: f64,
    /// Learning rate at the last epoch relative to the first (exponential schedule).
    #[serde(default = "defaults::final_lr_ratio")]
    pub final_lr_ratio: f64,
    #[serde(default = "defaults::test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn hidden() -> [usize; 2] {
        [256, 256]
    }
    pub fn epochs() -> usize {
        600
    }
    pub fn batch() -> usize {
        256
    }
    pub fn lr() -> f64 {
        2e-3
    }
    pub fn final_lr_ratio() -> f64 {
        0.01
    }
    pub fn test_fraction() -> f64 {
        0.1
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: defaults::hidden(),
            epochs: defaults::epochs(),
            batch_size: defaults::batch(),
            learning_rate: defaults::lr(),
            final_lr_ratio: defaults::final_lr_ratio(),
            test_fraction: defaults::test_fraction(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(256..=1024).contains(&self.hidden[0]) || !(256..=1024).contains(&self.hidden[1]) {
            // Smaller nets are allowed for experiments but flagged by the CLI; keep them legal here.
            if self.hidden.contains(&0) {
                return Err(Error::Config("hidden layer sizes must be positive".into()));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.final_lr_ratio > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.test_fraction >= 0.1 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction {} must be in [0.1, 1)", self.test_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_train: usize,
    pub n_test: usize,
    pub train_mae: f64,
    pub test_mae: f64,
    /// `(epoch, mean training MSE)` per epoch.
    pub history: Vec<(usize, f64)>,
}

/// Trained cell-response network with its input normalization box.
#[derive(Clone, Debug)]
pub struct SurrogateModel {
    net: Net<f64>,
    in_min: [f64; N_IN],
    in_max: [f64; N_IN],
}

/// Forward results kept for a later vector-Jacobian product.
pub struct SurrogateEval {
    /// Rows of `(Re A_x, Im A_x, Re A_y, Im A_y)`.
    pub fields: Array2<f64>,
    cache: Cache<f64>,
}

impl SurrogateModel {
    pub fn hidden(&self) -> Vec<usize> {
        self.w_shapes().iter().take(2).map(|s| s.1).collect()
    }

    fn w_shapes(&self) -> Vec<(usize, usize)> {
        self.net.w.iter().map(|w| w.dim()).collect()
    }

    pub fn bounds(&self) -> ([f64; N_IN], [f64; N_IN]) {
        (self.in_min, self.in_max)
    }

    pub fn wavelength_range(&self) -> (f64, f64) {
        (self.in_min[2], self.in_max[2])
    }

    fn normalize(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != N_IN {
            return Err(Error::Shape(format!("surrogate input has {} columns, expected 3", inputs.ncols())));
        }
        let mut x = inputs.clone();
        for mut row in x.outer_iter_mut() {
            for k in 0..N_IN {
                let (lo, hi) = (self.in_min[k], self.in_max[k]);
                let tol = 1e-9 * (hi - lo);
                if !(row[k] >= lo - tol && row[k] <= hi + tol) {
                    let name = ["w_x", "w_y", "wavelength"][k];
                    return Err(Error::Domain(format!(
                        "surrogate input {name} = {:e} outside training range [{lo:e}, {hi:e}]",
                        row[k]
                    )));
                }
                row[k] = (row[k] - lo) / (hi - lo);
            }
        }
        Ok(x)
    }

    /// Evaluate rows of `(w_x, w_y, lambda)` in metres.
    pub fn forward(&self, inputs: &Array2<f64>) -> Result<SurrogateEval> {
        let x = self.normalize(inputs)?;
        let cache = self.net.forward(x.view());
        Ok(SurrogateEval { fields: head(&cache.out), cache })
    }

    /// Gradient w.r.t. `(w_x, w_y, lambda)` in metres, given the gradient w.r.t. `fields`.
    pub fn vjp(&self, eval: &SurrogateEval, grad_fields: &Array2<f64>) -> Array2<f64> {
        let g_o = head_vjp(&eval.cache.out, grad_fields);
        let (_, _, mut gx) = self.net.backward(&eval.cache, g_o, false);
        for mut row in gx.outer_iter_mut() {
            for k in 0..N_IN {
                row[k] /= self.in_max[k] - self.in_min[k];
            }
        }
        gx
    }

    pub fn eval_response(&self, cell: CellParams, wavelength: f64) -> Result<OpticalResponse> {
        Ok(self.eval_batch(&[(cell, wavelength)])?.remove(0))
    }

    pub fn eval_batch(&self, inputs: &[(CellParams, f64)]) -> Result<Vec<OpticalResponse>> {
        let x = Array2::from_shape_fn((inputs.len(), N_IN), |(i, k)| match k {
            0 => inputs[i].0.w_x,
            1 => inputs[i].0.w_y,
            _ => inputs[i].1,
        });
        let x = self.normalize(&x)?;
        let o = self.net.forward(x.view()).out;
        Ok(o
            .outer_iter()
            .map(|r| {
                let unit = |c: f64, s: f64| {
                    let n = c.hypot(s).max(NORM_GUARD);
                    (c / n, s / n)
                };
                OpticalResponse {
                    t_x: logistic(r[0]),
                    t_y: logistic(r[1]),
                    phi_x: unit(r[2], r[3]),
                    phi_y: unit(r[4], r[5]),
                }
            })
            .collect())
    }

    pub fn to_container(&self, report: Option<&TrainReport>) -> Container {
        let mut c = Container::new("surrogate", 1);
        c.meta = serde_json::json!({
            "layers": self.w_shapes(),
            "inputs": ["w_x_m", "w_y_m", "wavelength_m"],
            "outputs": ["t_x", "t_y", "cos_phi_x", "sin_phi_x", "cos_phi_y", "sin_phi_y"],
            "report": report.map(|r| serde_json::json!({
                "n_train": r.n_train, "n_test": r.n_test,
                "train_mae": r.train_mae, "test_mae": r.test_mae,
            })),
        });
        for (l, (w, b)) in self.net.w.iter().zip(&self.net.b).enumerate() {
            c.put_array2(&format!("w{l}"), w);
            c.put(&format!("b{l}"), vec![b.len()], b.to_vec());
        }
        c.put("in_min", vec![N_IN], self.in_min.to_vec());
        c.put("in_max", vec![N_IN], self.in_max.to_vec());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "surrogate" || c.version != 1 {
            return Err(Error::Format(format!("expected surrogate v1 checkpoint, found {} v{}", c.kind, c.version)));
        }
        let mut w = Vec::new();
        let mut b = Vec::new();
        for l in 0..3 {
            let wl = c.get_array2(&format!("w{l}"))?;
            let (shape, data) = c.get(&format!("b{l}"))?;
            if shape != &vec![wl.ncols()] {
                return Err(Error::Format(format!("bias b{l} does not match w{l}")));
            }
            w.push(wl);
            b.push(Array1::from(data.clone()));
        }
        if w[0].nrows() != N_IN || w[2].ncols() != N_OUT || w[1].nrows() != w[0].ncols() || w[2].nrows() != w[1].ncols()
        {
            return Err(Error::Format("surrogate layer shapes are inconsistent".into()));
        }
        let arr3 = |name: &str| -> Result<[f64; N_IN]> {
            let (_, d) = c.get(name)?;
            d.as_slice().try_into().map_err(|_| Error::Format(format!("{name} must have 3 entries")))
        };
        Ok(Self { net: Net { w, b }, in_min: arr3("in_min")?, in_max: arr3("in_max")? })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, report: Option<&TrainReport>) -> Result<()> {
        self.to_container(report).save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn dataset_arrays(data: &ResponseDataset) -> (Array2<f64>, Array2<f64>) {
    let n = data.samples.len();
    let mut x = Array2::zeros((n, N_IN));
    let mut y = Array2::zeros((n, 4));
    for (i, s) in data.samples.iter().enumerate() {
        x[[i, 0]] = s.cell.w_x;
        x[[i, 1]] = s.cell.w_y;
        x[[i, 2]] = s.wavelength;
        let f = s.response.as_fields();
        for k in 0..4 {
            y[[i, k]] = f[k];
        }
    }
    (x, y)
}

/// Mean of `(|dA_x| + |dA_y|) / 2` over rows.
fn complex_mae(pred: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let n = pred.nrows().max(1);
    let mut acc = 0.0;
    for (p, t) in pred.outer_iter().zip(target.outer_iter()) {
        acc += 0.5 * ((p[0] - t[0]).hypot(p[1] - t[1]) + (p[2] - t[2]).hypot(p[3] - t[3]));
    }
    acc / n as f64
}

struct Adam<F> {
    m_w: Vec<Array2<F>>,
    v_w: Vec<Array2<F>>,
    m_b: Vec<Array1<F>>,
    v_b: Vec<Array1<F>>,
    t: i32,
}

impl<F: NdFloat + FromPrimitive> Adam<F> {
    fn new(net: &Net<F>) -> Self {
        Self {
            m_w: net.w.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            v_w: net.w.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            m_b: net.b.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            v_b: net.b.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut Net<F>, gw: &[Array2<F>], gb: &[Array1<F>], lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let f = |v: f64| F::from_f64(v).unwrap();
        let (b1f, b2f, nb1, nb2) = (f(b1), f(b2), f(1.0 - b1), f(1.0 - b2));
        let step = f(lr / c1);
        let c2f = f(c2);
        let epsf = f(eps);
        let upd = |p: &mut F, m: &mut F, v: &mut F, g: F| {
            *m = b1f * *m + nb1 * g;
            *v = b2f * *v + nb2 * g * g;
            *p -= step * *m / ((*v / c2f).sqrt() + epsf);
        };
        for l in 0..net.w.len() {
            ndarray::Zip::from(&mut net.w[l]).and(&mut self.m_w[l]).and(&mut self.v_w[l]).and(&gw[l]).for_each(
                |p, m, v, &g| upd(p, m, v, g),
            );
            ndarray::Zip::from(&mut net.b[l]).and(&mut self.m_b[l]).and(&mut self.v_b[l]).and(&gb[l]).for_each(
                |p, m, v, &g| upd(p, m, v, g),
            );
        }
    }
}

/// Fit the network to the dataset with Adam on the MSE of the complex fields.
pub fn train_surrogate(data: &ResponseDataset, config: &TrainConfig) -> Result<(SurrogateModel, TrainReport)> {
    train_surrogate_with(data, config, |_, _| {})
}

/// As [`train_surrogate`], calling `on_epoch(epoch, mse)` after every epoch.
pub fn train_surrogate_with(
    data: &ResponseDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(SurrogateModel, TrainReport)> {
    config.validate()?;
    data.validate()?;
    let (x_all, y_all) = dataset_arrays(data);
    let n = x_all.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_test = ((n as f64 * config.test_fraction).ceil() as usize).clamp(1, n.saturating_sub(1).max(1));
    let (test_idx, train_idx) = order.split_at(n_test);
    if train_idx.is_empty() {
        return Err(Error::Domain("dataset too small to hold out a test split".into()));
    }

    let mut in_min = [f64::INFINITY; N_IN];
    let mut in_max = [f64::NEG_INFINITY; N_IN];
    for row in x_all.outer_iter() {
        for k in 0..N_IN {
            in_min[k] = in_min[k].min(row[k]);
            in_max[k] = in_max[k].max(row[k]);
        }
    }
    for k in 0..N_IN {
        if in_max[k] <= in_min[k] {
            // Degenerate axis: widen so normalization stays finite.
            let pad = in_min[k].abs().max(1e-9) * 1e-3;
            in_min[k] -= pad;
            in_max[k] += pad;
        }
    }
    let xn = Array2::from_shape_fn((n, N_IN), |(i, k)| (x_all[[i, k]] - in_min[k]) / (in_max[k] - in_min[k]));
    let xf = xn.mapv(|v| v as f32);
    let yf = y_all.mapv(|v| v as f32);

    let sizes = [N_IN, config.hidden[0], config.hidden[1], N_OUT];
    let mut net: Net<f32> = Net::init(&sizes, &mut rng);
    let mut adam = Adam::new(&net);
    let mut train_order = train_idx.to_vec();
    let mut history = Vec::with_capacity(config.epochs);
    let decay = config.final_lr_ratio.powf(1.0 / (config.epochs.max(2) - 1) as f64);
    let mut last_good = f64::NAN;

    for epoch in 0..config.epochs {
        let lr = config.learning_rate * decay.powi(epoch as i32);
        train_order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0f64, 0usize);
        for (bi, chunk) in train_order.chunks(config.batch_size).enumerate() {
            let xb = xf.select(Axis(0), chunk);
            let yb = yf.select(Axis(0), chunk);
            let cache = net.forward(xb.view());
            let pred = head(&cache.out);
            let diff = &pred - &yb;
            let m = diff.len() as f32;
            let loss: f64 = diff.iter().map(|&d| (d as f64) * (d as f64)).sum::<f64>() / m as f64;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "surrogate training diverged at epoch {epoch}, batch {bi} (lr {lr:.3e}); last finite epoch MSE {last_good:.3e}"
                )));
            }
            sum += loss * chunk.len() as f64;
            count += chunk.len();
            let g_a = diff.mapv(|d| 2.0 * d / m);
            let g_o = head_vjp(&cache.out, &g_a);
            let (gw, gb, _) = net.backward(&cache, g_o, true);
            adam.step(&mut net, &gw, &gb, lr);
        }
        let mse = sum / count as f64;
        last_good = mse;
        history.push((epoch, mse));
        on_epoch(epoch, mse);
    }

    let model = SurrogateModel { net: net.cast(), in_min, in_max };
    let mae_on = |idx: &[usize]| -> f64 {
        let xs = x_all.select(Axis(0), idx);
        let ys = y_all.select(Axis(0), idx);
        let pred = model.forward(&xs).expect("training inputs are inside the box").fields;
        complex_mae(&pred, &ys)
    };
    let report = TrainReport {
        n_train: train_idx.len(),
        n_test: test_idx.len(),
        train_mae: mae_on(train_idx),
        test_mae: mae_on(test_idx),
        history,
    };
    if !report.test_mae.is_finite() {
        return Err(Error::Numerical("surrogate produced non-finite predictions".into()));
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::relative_error;
    use crate::surrogate::{ResponseSample, SyntheticFdtd};
    use rand::Rng;

    fn tiny_model(seed: u64) -> SurrogateModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net: Net<f64> = Net::init(&[3, 24, 24, 6], &mut rng);
        // Non-zero biases so every ReLU region is exercised.
        let mut net = net;
        for b in &mut net.b {
            b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
        SurrogateModel { net, in_min: [60e-9, 60e-9, 300e-9], in_max: [300e-9, 300e-9, 750e-9] }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let model = tiny_model(21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Array2::from_shape_fn((9, 3), |_| rng.random_range(0.05..0.95));
        let w_out = Array2::from_shape_fn((9, 4), |_| rng.random_range(-1.0..1.0));
        let loss = |net: &Net<f64>| (head(&net.forward(x.view()).out) * &w_out).sum();
        let cache = model.net.forward(x.view());
        let (gw, gb, _) = model.net.backward(&cache, head_vjp(&cache.out, &w_out), true);
        let h = 1e-6;
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for l in 0..3 {
            for k in 0..6 {
                let (r, c) = (k % model.net.w[l].nrows(), (3 * k) % model.net.w[l].ncols());
                let mut p = model.net.clone();
                p.w[l][[r, c]] += h;
                let mut m = model.net.clone();
                m.w[l][[r, c]] -= h;
                numeric.push((loss(&p) - loss(&m)) / (2.0 * h));
                analytic.push(gw[l][[r, c]]);
                let j = (5 * k) % model.net.b[l].len();
                let mut p = model.net.clone();
                p.b[l][j] += h;
                let mut m = model.net.clone();
                m.b[l][j] -= h;
                numeric.push((loss(&p) - loss(&m)) / (2.0 * h));
                analytic.push(gb[l][j]);
            }
        }
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn outputs_are_physical() {
        let m = tiny_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cells: Vec<(CellParams, f64)> = (0..200)
            .map(|_| {
                (
                    CellParams { w_x: rng.random_range(60e-9..300e-9), w_y: rng.random_range(60e-9..300e-9) },
                    rng.random_range(300e-9..750e-9),
                )
            })
            .collect();
        let batch = m.eval_batch(&cells).unwrap();
        for (r, (c, l)) in batch.iter().zip(&cells) {
            assert!((0.0..=1.0).contains(&r.t_x) && (0.0..=1.0).contains(&r.t_y));
            assert!((r.phi_x.0.hypot(r.phi_x.1) - 1.0).abs() < 1e-6);
            assert_eq!(*r, m.eval_response(*c, *l).unwrap());
        }
    }

    #[test]
    fn rejects_out_of_bounds() {
        let m = tiny_model(1);
        assert!(matches!(m.eval_response(CellParams { w_x: 40e-9, w_y: 100e-9 }, 500e-9), Err(Error::Domain(_))));
        assert!(m.eval_response(CellParams { w_x: 100e-9, w_y: 100e-9 }, 800e-9).is_err());
    }

    #[test]
    fn input_vjp_matches_finite_differences() {
        let m = tiny_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..50 {
            let x0 = ndarray::arr2(&[[
                rng.random_range(80e-9..280e-9),
                rng.random_range(80e-9..280e-9),
                rng.random_range(320e-9..730e-9),
            ]]);
            let wgt = ndarray::arr2(&[[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]]);
            let f = |x: &Array2<f64>| (&m.forward(x).unwrap().fields * &wgt).sum();
            let ev = m.forward(&x0).unwrap();
            let g = m.vjp(&ev, &wgt);
            for k in 0..3 {
                let h = 1e-6 * (m.in_max[k] - m.in_min[k]);
                let mut xp = x0.clone();
                xp[[0, k]] += h;
                let mut xm = x0.clone();
                xm[[0, k]] -= h;
                analytic.push(g[[0, k]]);
                numeric.push((f(&xp) - f(&xm)) / (2.0 * h));
            }
        }
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny_model(5);
        let c = m.to_container(None);
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = SurrogateModel::from_container(&Container::read_from(&buf[..]).unwrap()).unwrap();
        let cell = CellParams { w_x: 123e-9, w_y: 211e-9 };
        assert_eq!(m.eval_response(cell, 555e-9).unwrap(), back.eval_response(cell, 555e-9).unwrap());
        assert_eq!(back.hidden(), vec![24, 24]);
    }

    #[test]
    fn constant_dataset_is_learned() {
        let resp = OpticalResponse::from_phases(0.8, 1.1, 0.6, -2.0);
        let widths: Vec<f64> = (0..8).map(|i| 60e-9 + 30e-9 * i as f64).collect();
        let lams = vec![400e-9, 500e-9, 600e-9];
        let mut samples = Vec::new();
        for &a in &widths {
            for &b in &widths {
                for &l in &lams {
                    samples.push(ResponseSample { cell: CellParams { w_x: a, w_y: b }, wavelength: l, response: resp });
                }
            }
        }
        let data = ResponseDataset::new(widths, lams, samples).unwrap();
        let cfg = TrainConfig { hidden: [16, 16], epochs: 4000, batch_size: 16, learning_rate: 1e-3, ..TrainConfig::default() };
        let (_, rep) = train_surrogate(&data, &cfg).unwrap();
        assert!(rep.test_mae < 1e-4, "{}", rep.test_mae);
    }

    #[test]
    fn training_is_deterministic() {
        let data = ResponseDataset::synthetic_grid(&SyntheticFdtd::default(), 6, 3).unwrap();
        let cfg = TrainConfig { hidden: [16, 16], epochs: 5, batch_size: 32, ..TrainConfig::default() };
        let (_, a) = train_surrogate(&data, &cfg).unwrap();
        let (_, b) = train_surrogate(&data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn diverging_training_reports() {
        let data = ResponseDataset::synthetic_grid(&SyntheticFdtd::default(), 4, 2).unwrap();
        let cfg = TrainConfig { hidden: [8, 8], epochs: 3, learning_rate: f64::MAX, ..TrainConfig::default() };
        match train_surrogate(&data, &cfg) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("diverged")),
            Ok((_, r)) => assert!(!r.test_mae.is_finite() || r.history.iter().any(|h| !h.1.is_finite())),
            Err(e) => panic!("unexpected {e}"),
        }
    }
}
