//! Two-dimensional FFT helpers built on `rustfft`.
//!
//! Transforms are unnormalized in both directions, so `inverse` is the exact
//! adjoint of `forward`.

use std::sync::Arc;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Planned 2D transform over a `rows x cols` buffer.
#[derive(Clone)]
pub struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("rows", &self.rows).field("cols", &self.cols).finish()
    }
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Full transform of every row and column.
    pub fn process(&self, buf: &mut Array2<Complex64>, dir: Direction) {
        let all_rows: Vec<usize> = (0..self.rows).collect();
        let all_cols: Vec<usize> = (0..self.cols).collect();
        self.process_pruned(buf, dir, Axis(1), &all_cols, &all_rows);
    }

    /// Pruned separable transform.
    ///
    /// With `first = Axis(1)` the column transforms run only on `first_idx`
    /// (the columns that hold nonzero data) and the row transforms only on
    /// `second_idx` (the rows whose output is needed). With `first = Axis(0)`
    /// the roles swap. Entries outside the requested output lines are left in
    /// an unspecified state.
    pub fn process_pruned(
        &self,
        buf: &mut Array2<Complex64>,
        dir: Direction,
        first: Axis,
        first_idx: &[usize],
        second_idx: &[usize],
    ) {
        assert_eq!(buf.dim(), (self.rows, self.cols));
        let (row_fft, col_fft) = match dir {
            Direction::Forward => (&self.row_fwd, &self.col_fwd),
            Direction::Inverse => (&self.row_inv, &self.col_inv),
        };
        let scratch_len = row_fft
            .get_inplace_scratch_len()
            .max(col_fft.get_inplace_scratch_len());
        let mut scratch = vec![Complex64::new(0.0, 0.0); scratch_len];
        let mut line = vec![Complex64::new(0.0, 0.0); self.rows.max(self.cols)];

        let mut do_cols = |buf: &mut Array2<Complex64>, idx: &[usize]| {
            let line = &mut line[..self.rows];
            for &c in idx {
                for (r, v) in line.iter_mut().enumerate() {
                    *v = buf[[r, c]];
                }
                col_fft.process_with_scratch(line, &mut scratch[..col_fft.get_inplace_scratch_len()]);
                for (r, v) in line.iter().enumerate() {
                    buf[[r, c]] = *v;
                }
            }
        };
        let mut scratch2 = vec![Complex64::new(0.0, 0.0); row_fft.get_inplace_scratch_len()];
        let do_rows = |buf: &mut Array2<Complex64>, idx: &[usize], scratch: &mut [Complex64]| {
            for &r in idx {
                let mut row = buf.row_mut(r);
                let slice = row.as_slice_mut().expect("standard layout");
                row_fft.process_with_scratch(slice, scratch);
            }
        };

        if first == Axis(1) {
            do_cols(buf, first_idx);
            do_rows(buf, second_idx, &mut scratch2);
        } else {
            do_rows(buf, first_idx, &mut scratch2);
            do_cols(buf, second_idx);
        }
    }
}

/// Smallest integer `>= n` whose only prime factors are 2, 3 and 5.
pub fn fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut k = m;
        for p in [2, 3, 5] {
            while k % p == 0 {
                k /= p;
            }
        }
        if k == 1 {
            return m;
        }
        m += 1;
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

/// "Same"-size 2D convolution of a fixed image with arbitrary kernels of a
/// fixed shape, using reflect padding at the image borders.
///
/// The kernel centre sits at `(k_rows / 2, k_cols / 2)`, so
/// `out(y, x) = sum_{a,b} K(a, b) I(y - a + k_rows/2, x - b + k_cols/2)`.
#[derive(Debug, Clone)]
pub struct ReflectConvolver {
    img_shape: (usize, usize),
    k_shape: (usize, usize),
    size: (usize, usize),
    fft: Fft2,
    image_spectrum: Array2<Complex64>,
}

impl ReflectConvolver {
    pub fn new(image: &Array2<f64>, k_shape: (usize, usize)) -> Result<Self> {
        let (r, c) = image.dim();
        let (kr, kc) = k_shape;
        if r == 0 || c == 0 || kr == 0 || kc == 0 {
            return Err(Error::Shape("empty image or kernel".into()));
        }
        let ext = (r + kr - 1, c + kc - 1);
        let size = (fast_len(ext.0), fast_len(ext.1));
        let pad_top = (kr - 1 - kr / 2) as isize;
        let pad_left = (kc - 1 - kc / 2) as isize;
        let mut buf = Array2::<Complex64>::zeros(size);
        for p in 0..ext.0 {
            let sr = reflect_index(p as isize - pad_top, r);
            for q in 0..ext.1 {
                let sc = reflect_index(q as isize - pad_left, c);
                buf[[p, q]] = Complex64::new(image[[sr, sc]], 0.0);
            }
        }
        let fft = Fft2::new(size.0, size.1);
        fft.process(&mut buf, Direction::Forward);
        Ok(Self { img_shape: (r, c), k_shape, size, fft, image_spectrum: buf })
    }

    pub fn kernel_shape(&self) -> (usize, usize) {
        self.k_shape
    }

    pub fn image_shape(&self) -> (usize, usize) {
        self.img_shape
    }

    pub fn apply(&self, kernel: &Array2<f64>) -> Array2<f64> {
        assert_eq!(kernel.dim(), self.k_shape, "kernel shape fixed at construction");
        let mut buf = Array2::<Complex64>::zeros(self.size);
        for ((a, b), &v) in kernel.indexed_iter() {
            buf[[a, b]] = Complex64::new(v, 0.0);
        }
        let kcols: Vec<usize> = (0..self.k_shape.1).collect();
        let all_rows: Vec<usize> = (0..self.size.0).collect();
        self.fft.process_pruned(&mut buf, Direction::Forward, Axis(1), &kcols, &all_rows);
        buf *= &self.image_spectrum;
        let (kr, kc) = self.k_shape;
        let (r, c) = self.img_shape;
        let out_rows: Vec<usize> = (kr - 1..kr - 1 + r).collect();
        let all_cols: Vec<usize> = (0..self.size.1).collect();
        // columns first over everything, then only the rows we read back
        self.fft.process_pruned(&mut buf, Direction::Inverse, Axis(1), &all_cols, &out_rows);
        let norm = 1.0 / (self.size.0 * self.size.1) as f64;
        Array2::from_shape_fn((r, c), |(y, x)| buf[[y + kr - 1, x + kc - 1]].re * norm)
    }

    /// Gradient of `sum(grad_out * apply(K))` with respect to `K`.
    pub fn kernel_vjp(&self, grad_out: &Array2<f64>) -> Array2<f64> {
        assert_eq!(grad_out.dim(), self.img_shape);
        let (kr, kc) = self.k_shape;
        let (r, c) = self.img_shape;
        let mut buf = Array2::<Complex64>::zeros(self.size);
        for ((y, x), &g) in grad_out.indexed_iter() {
            buf[[y + kr - 1, x + kc - 1]] = Complex64::new(g, 0.0);
        }
        let gcols: Vec<usize> = (kc - 1..kc - 1 + c).collect();
        let all_rows: Vec<usize> = (0..self.size.0).collect();
        self.fft.process_pruned(&mut buf, Direction::Forward, Axis(1), &gcols, &all_rows);
        buf.zip_mut_with(&self.image_spectrum, |g, s| *g *= s.conj());
        let all_cols: Vec<usize> = (0..self.size.1).collect();
        let k_rows: Vec<usize> = (0..kr).collect();
        self.fft.process_pruned(&mut buf, Direction::Inverse, Axis(1), &all_cols, &k_rows);
        let _ = r;
        let norm = 1.0 / (self.size.0 * self.size.1) as f64;
        Array2::from_shape_fn(self.k_shape, |(a, b)| buf[[a, b]].re * norm)
    }
}

/// One-shot reflect-padded "same" convolution.
pub fn convolve_same_reflect(image: &Array2<f64>, kernel: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(ReflectConvolver::new(image, kernel.dim())?.apply(kernel))
}
