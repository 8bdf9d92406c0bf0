use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::fft::ReflectConvolver;
use crate::filters::TargetFilter;
use crate::psf::N_CHANNELS;
use crate::sensor::Scene;

type Channels = [Array2<f64>; N_CHANNELS];

/// Loss value with gradients w.r.t. every PSF channel and every weight vector.
#[derive(Clone, Debug)]
pub struct StackGrad {
    pub value: f64,
    pub g_h: Vec<Channels>,
    pub g_alpha: Vec<[f64; 4]>,
}

impl StackGrad {
    pub fn zeros(h: &[Channels], targets: usize) -> Self {
        let dim = h[0][0].dim();
        Self {
            value: 0.0,
            g_h: h.iter().map(|_| [0; 4].map(|_| Array2::zeros(dim))).collect(),
            g_alpha: vec![[0.0; 4]; targets],
        }
    }

    pub fn add(&mut self, other: &StackGrad) {
        self.value += other.value;
        for (a, b) in self.g_h.iter_mut().zip(&other.g_h) {
            for c in 0..N_CHANNELS {
                a[c] += &b[c];
            }
        }
        for (a, b) in self.g_alpha.iter_mut().zip(&other.g_alpha) {
            for c in 0..4 {
                a[c] += b[c];
            }
        }
    }
}

/// Division guard `1e-12 * max(H)` over the whole stack.
pub fn stack_epsilon(h: &[Channels]) -> f64 {
    1e-12 * h.iter().flatten().flat_map(|a| a.iter()).fold(0.0f64, |m, &v| m.max(v.abs()))
}

fn net(h: &Channels, alpha: &[f64; 4]) -> Array2<f64> {
    let mut y = Array2::zeros(h[0].dim());
    for (hc, &a) in h.iter().zip(alpha) {
        if a != 0.0 {
            y.scaled_add(a, hc);
        }
    }
    y
}

/// Smoothed L2 norm `sqrt(sum y^2 + eps^2)`.
fn guarded_norm(y: &Array2<f64>, eps: f64) -> f64 {
    (y.iter().map(|v| v * v).sum::<f64>() + eps * eps).sqrt()
}

fn unit(f: &Array2<f64>) -> Array2<f64> {
    let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    f / n
}

/// Backpropagate through `y_hat = y / sqrt(|y|^2 + eps^2)`.
fn normalize_vjp(y: &Array2<f64>, n: f64, g_hat: &Array2<f64>) -> Array2<f64> {
    let dot = Zip::from(y).and(g_hat).fold(0.0, |s, a, b| s + a * b);
    let k = dot / (n * n * n);
    Zip::from(y).and(g_hat).map_collect(|&a, &g| g / n - a * k)
}

/// Push `g_y` (gradient w.r.t. the net PSF) onto channels and weights.
fn scatter(h: &Channels, alpha: &[f64; 4], g_y: &Array2<f64>, g_h: &mut Channels, g_alpha: &mut [f64; 4]) {
    for c in 0..N_CHANNELS {
        if alpha[c] != 0.0 {
            g_h[c].scaled_add(alpha[c], g_y);
        }
        g_alpha[c] += Zip::from(&h[c]).and(g_y).fold(0.0, |s, a, b| s + a * b);
    }
}

fn check(targets: &[TargetFilter], h: &[Channels], alpha: &[[f64; 4]]) -> Result<()> {
    if targets.len() != alpha.len() {
        return Err(Error::Shape(format!("{} targets but {} weight vectors", targets.len(), alpha.len())));
    }
    if h.is_empty() {
        return Err(Error::Shape("empty PSF stack".into()));
    }
    for t in targets {
        if t.batch() != h.len() {
            return Err(Error::Shape(format!("target {} has {} slices, stack has {}", t.name, t.batch(), h.len())));
        }
        if t.dim() != h[0][0].dim() {
            return Err(Error::Shape(format!("target {} is {:?}, PSFs are {:?}", t.name, t.dim(), h[0][0].dim())));
        }
    }
    Ok(())
}

/// `sum_i sum_b || F_b / |F_b| - H_b a_i / |H_b a_i| ||_1`.
pub fn filter_loss(targets: &[TargetFilter], h: &[Channels], alpha: &[[f64; 4]]) -> Result<f64> {
    Ok(filter_loss_grad(targets, h, alpha)?.value)
}

pub fn filter_loss_grad(targets: &[TargetFilter], h: &[Channels], alpha: &[[f64; 4]]) -> Result<StackGrad> {
    check(targets, h, alpha)?;
    let eps = stack_epsilon(h);
    let mut out = StackGrad::zeros(h, targets.len());
    for (i, (t, a)) in targets.iter().zip(alpha).enumerate() {
        for (b, hb) in h.iter().enumerate() {
            let f = unit(&t.slices[b]);
            let y = net(hb, a);
            let n = guarded_norm(&y, eps);
            let mut g_hat = Array2::zeros(y.dim());
            for ((g, &fv), &yv) in g_hat.iter_mut().zip(f.iter()).zip(y.iter()) {
                let d = fv - yv / n;
                out.value += d.abs();
                *g = -sign(d);
            }
            let g_y = normalize_vjp(&y, n, &g_hat);
            scatter(hb, a, &g_y, &mut out.g_h[b], &mut out.g_alpha[i]);
        }
    }
    Ok(out)
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-slice `|F_hat - N_hat|_1 / |F_hat|_1` with both sides L2-normalized.
pub fn normalized_l1_error(target: &Array2<f64>, net_psf: &Array2<f64>) -> f64 {
    let f = unit(target);
    let eps = 1e-12 * net_psf.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let n = guarded_norm(net_psf, eps);
    let num: f64 = f.iter().zip(net_psf.iter()).map(|(a, b)| (a - b / n).abs()).sum();
    num / f.iter().map(|v| v.abs()).sum::<f64>()
}

/// Mean signal-to-bias ratio `|H a| / (H |a|)` of one slice; pixels with a
/// denominator below `eps` are excluded.
pub fn msbr(h: &Channels, alpha: &[f64; 4], eps: f64) -> Result<f64> {
    let abs = alpha.map(f64::abs);
    let num = net(h, alpha);
    let den = net(h, &abs);
    let (mut s, mut n) = (0.0, 0usize);
    for (a, d) in num.iter().zip(den.iter()) {
        if *d >= eps && *d > 0.0 {
            s += (a.abs() / d).min(1.0);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Numerical("mSBR undefined: the biased PSF is zero everywhere".into()));
    }
    Ok(s / n as f64)
}

/// mSBR averaged over the batch.
pub fn msbr_stack(h: &[Channels], alpha: &[f64; 4]) -> Result<f64> {
    let eps = stack_epsilon(h);
    let mut s = 0.0;
    for hb in h {
        s += msbr(hb, alpha, eps)?;
    }
    Ok(s / h.len() as f64)
}

fn gram(h: &Channels) -> [[f64; 4]; 4] {
    let mut r = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in i..4 {
            let v = Zip::from(&h[i]).and(&h[j]).fold(0.0, |s, a, b| s + a * b);
            r[i][j] = v;
            r[j][i] = v;
        }
    }
    r
}

fn unit_alpha(a: &[f64; 4]) -> ([f64; 4], f64) {
    let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        ([0.0; 4], 0.0)
    } else {
        (a.map(|v| v / n), n)
    }
}

/// `sum_i sum_b (-c1 Tr R_b + c2 |M_i o R_b|_1)` with `R_b = H_b^T H_b` and
/// `M_i = max(-a_i a_i^T, 0)` built from the unit-norm weight vector.
pub fn regularizer(h: &[Channels], alpha: &[[f64; 4]], c1: f64, c2: f64) -> f64 {
    regularizer_grad(h, alpha, c1, c2).value
}

pub fn regularizer_grad(h: &[Channels], alpha: &[[f64; 4]], c1: f64, c2: f64) -> StackGrad {
    let mut out = StackGrad::zeros(h, alpha.len());
    if c1 == 0.0 && c2 == 0.0 {
        return out;
    }
    let i_count = alpha.len() as f64;
    for (b, hb) in h.iter().enumerate() {
        let r = gram(hb);
        let trace: f64 = (0..4).map(|c| r[c][c]).sum();
        out.value -= c1 * i_count * trace;
        // d(-c1 I Tr R)/dh_c = -2 c1 I h_c
        let mut coef = [[0.0; 4]; 4];
        for (c, row) in coef.iter_mut().enumerate() {
            row[c] = -2.0 * c1 * i_count;
        }
        for (i, a) in alpha.iter().enumerate() {
            let (u, norm) = unit_alpha(a);
            let mut g_u = [0.0; 4];
            for j in 0..4 {
                for k in 0..4 {
                    let m = -u[j] * u[k];
                    if m > 0.0 {
                        out.value += c2 * m * r[j][k];
                        coef[j][k] += 2.0 * c2 * m;
                        g_u[j] -= 2.0 * c2 * u[k] * r[j][k];
                    }
                }
            }
            if norm > 0.0 {
                let dot: f64 = (0..4).map(|c| u[c] * g_u[c]).sum();
                for c in 0..4 {
                    out.g_alpha[i][c] += (g_u[c] - u[c] * dot) / norm;
                }
            }
        }
        for c in 0..4 {
            for k in 0..4 {
                if coef[c][k] != 0.0 {
                    out.g_h[b][c].scaled_add(coef[c][k], &hb[k]);
                }
            }
        }
    }
    out
}

/// Image-space objective over fixed planar scenes, one scene slice per batch entry.
///
/// Slice images are summed: the sensor integrates over depth and wavelength.
pub struct ImageObjective {
    convolvers: Vec<ReflectConvolver>,
    /// Per target: `sum_b (F_b / |F_b|) * I_b`.
    target_images: Vec<Array2<f64>>,
}

impl ImageObjective {
    pub fn new(targets: &[TargetFilter], scene: &Scene) -> Result<Self> {
        let Some(first) = targets.first() else {
            return Err(Error::Config("image objective needs at least one target".into()));
        };
        if scene.slices.len() != first.batch() {
            return Err(Error::Shape(format!("scene has {} slices, targets have {}", scene.slices.len(), first.batch())));
        }
        let convolvers: Vec<ReflectConvolver> =
            scene.slices.iter().map(|s| ReflectConvolver::new(s, first.dim())).collect::<Result<_>>()?;
        let target_images = targets
            .iter()
            .map(|t| {
                let mut acc = Array2::zeros(scene.dim());
                for (cv, f) in convolvers.iter().zip(&t.slices) {
                    acc += &cv.apply(&unit(f));
                }
                acc
            })
            .collect();
        Ok(Self { convolvers, target_images })
    }

    pub fn target_image(&self, i: usize) -> &Array2<f64> {
        &self.target_images[i]
    }

    /// Synthesized image `sum_b (H_b a / |H_b a|) * I_b`.
    pub fn synthesized(&self, h: &[Channels], alpha: &[f64; 4]) -> Array2<f64> {
        let eps = stack_epsilon(h);
        let mut acc = Array2::zeros(self.target_images[0].dim());
        for (cv, hb) in self.convolvers.iter().zip(h) {
            let y = net(hb, alpha);
            let n = guarded_norm(&y, eps);
            acc += &cv.apply(&(y / n));
        }
        acc
    }
}

pub fn image_loss(obj: &ImageObjective, h: &[Channels], alpha: &[[f64; 4]]) -> Result<f64> {
    Ok(image_loss_grad(obj, h, alpha)?.value)
}

pub fn image_loss_grad(obj: &ImageObjective, h: &[Channels], alpha: &[[f64; 4]]) -> Result<StackGrad> {
    if alpha.len() != obj.target_images.len() {
        return Err(Error::Shape("one weight vector per target is required".into()));
    }
    if h.len() != obj.convolvers.len() {
        return Err(Error::Shape(format!("stack has {} slices, scene has {}", h.len(), obj.convolvers.len())));
    }
    let eps = stack_epsilon(h);
    let mut out = StackGrad::zeros(h, alpha.len());
    for (i, a) in alpha.iter().enumerate() {
        let ys: Vec<(Array2<f64>, f64)> = h
            .iter()
            .map(|hb| {
                let y = net(hb, a);
                let n = guarded_norm(&y, eps);
                (y, n)
            })
            .collect();
        let mut img = Array2::zeros(obj.target_images[i].dim());
        for (cv, (y, n)) in obj.convolvers.iter().zip(&ys) {
            img += &cv.apply(&(y / *n));
        }
        let mut g_img = Array2::zeros(img.dim());
        for ((g, &t), &v) in g_img.iter_mut().zip(obj.target_images[i].iter()).zip(img.iter()) {
            let d = t - v;
            out.value += d.abs();
            *g = -sign(d);
        }
        for (b, (cv, (y, n))) in obj.convolvers.iter().zip(&ys).enumerate() {
            let g_hat = cv.kernel_vjp(&g_img);
            let g_y = normalize_vjp(y, *n, &g_hat);
            scatter(&h[b], a, &g_y, &mut out.g_h[b], &mut out.g_alpha[i]);
        }
    }
    Ok(out)
}
