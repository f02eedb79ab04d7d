//! Dense row-major matrices, a portable seeded RNG, initializers and
//! activation functions (including exp-centered units) with exact derivatives.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NamError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NamError::Dimension(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(NamError::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Builds a matrix from column vectors of equal length.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        let cols = columns.len();
        let mut m = Self::zeros(rows, cols);
        for (j, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(NamError::Dimension(format!(
                    "column {j} has {} rows, expected {rows}",
                    c.len()
                )));
            }
            for (i, v) in c.iter().enumerate() {
                m.data[i * cols + j] = *v;
            }
        }
        Ok(m)
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Column sums, one per column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(NamError::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(self, false, other, false, &mut out, 0.0);
        Ok(out)
    }
}

/// `c = op(a) * op(b) + beta * c`, where `op` optionally transposes.
///
/// Shapes are asserted; callers are expected to have validated them.
pub(crate) fn gemm(a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, c: &mut Matrix, beta: f64) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimensions disagree");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.data.fill(0.0);
        } else {
            c.data.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: all pointers come from live Vecs whose lengths match the
    // (rows, cols, stride) triples asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Dense layer: `out[b,h] = sum_i input[b,i] * weights[i,h] + bias[h]`.
pub fn affine_forward(input: &Matrix, weights: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if input.cols != weights.rows || bias.len() != weights.cols {
        return Err(NamError::Dimension(format!(
            "affine: input {}x{}, weights {}x{}, bias {}",
            input.rows,
            input.cols,
            weights.rows,
            weights.cols,
            bias.len()
        )));
    }
    let mut out = Matrix::zeros(input.rows, weights.cols);
    for r in 0..out.rows {
        out.row_mut(r).copy_from_slice(bias);
    }
    gemm(input, false, weights, false, &mut out, 1.0);
    Ok(out)
}

/// Seeded, platform-independent random number generator (ChaCha8).
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Independent child generator; advances this one by a single draw.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on `[lo, hi)`; returns `lo` when the interval is empty.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = self.inner.sample(StandardNormal);
        mean + std * z
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    /// ReLU clipped above at `n`.
    ReluN(f64),
    Identity,
    Sigmoid,
}

impl Activation {
    pub fn validate(&self) -> Result<()> {
        match self {
            Activation::ReluN(n) if !(*n > 0.0) || !n.is_finite() => Err(NamError::Config(
                format!("ReLU-n cap must be positive, got {n}"),
            )),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            Activation::Relu => z.max(0.0),
            Activation::ReluN(n) => z.clamp(0.0, n),
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative with respect to the pre-activation. Kinks get 0.
    #[inline]
    pub fn derivative(&self, z: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::ReluN(n) => {
                if z > 0.0 && z < n {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }

    /// Distance from `z` to the nearest non-differentiable point.
    pub fn kink_distance(&self, z: f64) -> f64 {
        match *self {
            Activation::Relu => z.abs(),
            Activation::ReluN(n) => z.abs().min((z - n).abs()),
            Activation::Identity | Activation::Sigmoid => f64::INFINITY,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Values retained by [`exu_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ExuCache {
    pub x: Vec<f64>,
    pub scale: Vec<f64>,
    /// Pre-activations `exp(w) * (x - b)`, row-major `[B x H]`.
    pub pre: Matrix,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExuGrads {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Exp-centered units: `out[j,h] = act(exp(w[h]) * (x[j] - b[h]))`.
pub fn exu_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    act: Activation,
) -> Result<(Matrix, ExuCache)> {
    if w.len() != b.len() {
        return Err(NamError::Dimension(format!(
            "ExU weights ({}) and biases ({}) differ in length",
            w.len(),
            b.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NamError::Numeric("non-finite ExU input".into()));
    }
    let h = w.len();
    let scale: Vec<f64> = w.iter().map(|v| v.exp()).collect();
    let mut pre = Matrix::zeros(x.len(), h);
    let mut out = Matrix::zeros(x.len(), h);
    for (j, &xj) in x.iter().enumerate() {
        let prow = pre.row_mut(j);
        for u in 0..h {
            prow[u] = scale[u] * (xj - b[u]);
        }
        let orow = &mut out.data[j * h..(j + 1) * h];
        for (o, z) in orow.iter_mut().zip(pre.row(j)) {
            *o = act.apply(*z);
        }
    }
    Ok((
        out,
        ExuCache {
            x: x.to_vec(),
            scale,
            pre,
            activation: act,
        },
    ))
}

/// Gradients of `sum_{j,h} grad_out[j,h] * out[j,h]` for an ExU layer.
pub fn exu_backward(cache: &ExuCache, grad_out: &Matrix) -> Result<ExuGrads> {
    let (bsz, h) = cache.pre.shape();
    if grad_out.shape() != (bsz, h) {
        return Err(NamError::Dimension(format!(
            "ExU grad_out is {}x{}, expected {bsz}x{h}",
            grad_out.rows, grad_out.cols
        )));
    }
    let mut gx = vec![0.0; bsz];
    let mut gw = vec![0.0; h];
    let mut gb = vec![0.0; h];
    for j in 0..bsz {
        let pre = cache.pre.row(j);
        let g = grad_out.row(j);
        let mut acc_x = 0.0;
        for u in 0..h {
            let d = g[u] * cache.activation.derivative(pre[u]);
            if d != 0.0 {
                gw[u] += d * pre[u];
                gb[u] -= d * cache.scale[u];
                acc_x += d * cache.scale[u];
            }
        }
        gx[j] = acc_x;
    }
    Ok(ExuGrads { x: gx, w: gw, b: gb })
}

/// ExU initializer: a layer mean drawn from `[3, 4]`, weights
/// `Normal(mean, 0.5)`, and biases uniform over the feature range.
pub fn init_exu(rng: &mut Rng, fan: usize, range: (f64, f64)) -> (Vec<f64>, Vec<f64>) {
    let mean = rng.uniform_range(3.0, 4.0);
    init_exu_with_mean(rng, fan, mean, range)
}

pub fn init_exu_with_mean(
    rng: &mut Rng,
    fan: usize,
    mean: f64,
    range: (f64, f64),
) -> (Vec<f64>, Vec<f64>) {
    let w = (0..fan).map(|_| rng.normal(mean, 0.5)).collect();
    let b = (0..fan).map(|_| rng.uniform_range(range.0, range.1)).collect();
    (w, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    Kaiming,
    Xavier,
}

/// Weight matrix of shape `fan_in x fan_out`.
pub fn init_dense(rng: &mut Rng, fan_in: usize, fan_out: usize, scheme: InitScheme) -> Matrix {
    let data = match scheme {
        InitScheme::Kaiming => {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..fan_in * fan_out).map(|_| rng.normal(0.0, std)).collect()
        }
        InitScheme::Xavier => {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..fan_in * fan_out)
                .map(|_| rng.uniform_range(-bound, bound))
                .collect()
        }
    };
    Matrix {
        rows: fan_in,
        cols: fan_out,
        data,
    }
}

/// Uniform access to the trainable parameters (or gradients) of a model as
/// an ordered list of slices. Optimizer state, flattening and
/// finite-difference probing all rely on the order being stable.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    fn set_flat(&mut self, values: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&values[off..off + s.len()]);
            off += s.len();
        });
    }

    fn param(&self, index: usize) -> f64 {
        let mut off = 0;
        let mut out = f64::NAN;
        self.visit(&mut |s| {
            if index >= off && index < off + s.len() {
                out = s[index - off];
            }
            off += s.len();
        });
        out
    }

    fn set_param(&mut self, index: usize, value: f64) {
        let mut off = 0;
        self.visit_mut(&mut |s| {
            if index >= off && index < off + s.len() {
                s[index - off] = value;
            }
            off += s.len();
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple_loop(a: &Matrix, b: &Matrix, bias: &[f64]) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = bias[j];
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn affine_scalar() {
        let x = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let w = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        let out = affine_forward(&x, &w, &[1.0]).unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn affine_identity() {
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.5], vec![0.25, 9.0, -1.0]]).unwrap();
        let out = affine_forward(&x, &Matrix::identity(3), &[0.0; 3]).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn affine_matches_triple_loop() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let a = Matrix::from_vec(4, 3, (0..12).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
            let w = Matrix::from_vec(3, 2, (0..6).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
            let bias = vec![rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)];
            let got = affine_forward(&a, &w, &bias).unwrap();
            let want = triple_loop(&a, &w, &bias);
            for (g, e) in got.data().iter().zip(want.data()) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        let w = Matrix::zeros(2, 2);
        assert!(matches!(
            affine_forward(&a, &w, &[0.0, 0.0]),
            Err(NamError::Dimension(_))
        ));
        let w = Matrix::zeros(3, 2);
        assert!(affine_forward(&a, &w, &[0.0]).is_err());
    }

    #[test]
    fn gemm_transposes() {
        let mut rng = Rng::new(5);
        let a = Matrix::from_vec(5, 3, (0..15).map(|_| rng.uniform()).collect()).unwrap();
        let b = Matrix::from_vec(5, 4, (0..20).map(|_| rng.uniform()).collect()).unwrap();
        let mut c = Matrix::zeros(3, 4);
        gemm(&a, true, &b, false, &mut c, 0.0);
        let want = a.transpose().matmul(&b).unwrap();
        for (g, e) in c.data().iter().zip(want.data()) {
            assert!((g - e).abs() < 1e-12);
        }
        let mut d = Matrix::zeros(5, 5);
        gemm(&a, false, &a, true, &mut d, 0.0);
        let want = a.matmul(&a.transpose()).unwrap();
        for (g, e) in d.data().iter().zip(want.data()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn exu_forward_cases() {
        let (out, _) = exu_forward(&[1.0], &[0.0], &[0.0], Activation::Identity).unwrap();
        assert_eq!(out.data(), &[1.0]);

        let (out, _) =
            exu_forward(&[0.5], &[4f64.ln()], &[0.25], Activation::ReluN(1.0)).unwrap();
        assert!((out.get(0, 0) - 1.0).abs() < 1e-15);

        for w in [-2.0, 0.0, 1.3, 4.0] {
            let (out, _) = exu_forward(&[0.3], &[w], &[0.3], Activation::ReluN(1.0)).unwrap();
            assert_eq!(out.get(0, 0), 0.0);
        }
    }

    #[test]
    fn exu_rejects_non_finite() {
        assert!(matches!(
            exu_forward(&[f64::NAN], &[0.0], &[0.0], Activation::Identity),
            Err(NamError::Numeric(_))
        ));
    }

    #[test]
    fn exu_active_width_is_n_over_scale() {
        // The unsaturated window of a ReLU-n unit spans [b, b + n e^{-w}].
        let n = 1.0;
        for w in [0.0, 1.0, 2.0_f64.ln(), 3.5] {
            let b = 0.1;
            let width = n * (-w as f64).exp();
            let inside = [b + 0.01 * width, b + 0.5 * width, b + 0.99 * width];
            let outside = [b - 0.01 * width, b + 1.01 * width];
            let (o_in, c_in) = exu_forward(&inside, &[w], &[b], Activation::ReluN(n)).unwrap();
            for j in 0..3 {
                assert!(o_in.get(j, 0) > 0.0 && o_in.get(j, 0) < n);
                assert_eq!(c_in.activation.derivative(c_in.pre.get(j, 0)), 1.0);
            }
            let (_, c_out) = exu_forward(&outside, &[w], &[b], Activation::ReluN(n)).unwrap();
            for j in 0..2 {
                assert_eq!(c_out.activation.derivative(c_out.pre.get(j, 0)), 0.0);
            }
        }
        // Doubling exp(w) halves the window.
        let w = 1.0_f64;
        let w2 = w + 2.0_f64.ln();
        let width = (-w).exp();
        let width2 = (-w2).exp();
        assert!((width2 - width / 2.0).abs() < 1e-15);
    }

    #[test]
    fn exu_backward_interior_closed_form() {
        let (x, w, b) = (0.4, 0.7_f64, 0.2);
        let act = Activation::ReluN(2.0);
        let (_, cache) = exu_forward(&[x], &[w], &[b], act).unwrap();
        let z = cache.pre.get(0, 0);
        assert!(z > 0.0 && z < 2.0);
        let g = exu_backward(&cache, &Matrix::filled(1, 1, 1.0)).unwrap();
        assert!((g.w[0] - w.exp() * (x - b)).abs() < 1e-14);
        assert!((g.b[0] + w.exp()).abs() < 1e-14);
        assert!((g.x[0] - w.exp()).abs() < 1e-14);
    }

    #[test]
    fn exu_backward_dead_unit() {
        let (_, cache) = exu_forward(&[0.1], &[0.5], &[0.6], Activation::ReluN(1.0)).unwrap();
        let g = exu_backward(&cache, &Matrix::filled(1, 1, 1.0)).unwrap();
        assert_eq!((g.x[0], g.w[0], g.b[0]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn exu_backward_finite_differences() {
        let mut rng = Rng::new(2024);
        let act = Activation::Sigmoid;
        let h = 1e-5;
        let mut checked = 0;
        while checked < 100 {
            let x = rng.uniform_range(-1.0, 1.0);
            let w = rng.uniform_range(-1.0, 1.0);
            let b = rng.uniform_range(-1.0, 1.0);
            let f = |x: f64, w: f64, b: f64| exu_forward(&[x], &[w], &[b], act).unwrap().0.get(0, 0);
            let (_, cache) = exu_forward(&[x], &[w], &[b], act).unwrap();
            let g = exu_backward(&cache, &Matrix::filled(1, 1, 1.0)).unwrap();
            let fd = [
                (f(x + h, w, b) - f(x - h, w, b)) / (2.0 * h),
                (f(x, w + h, b) - f(x, w - h, b)) / (2.0 * h),
                (f(x, w, b + h) - f(x, w, b - h)) / (2.0 * h),
            ];
            for (a, n) in [g.x[0], g.w[0], g.b[0]].iter().zip(fd) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                assert!(rel < 1e-6, "rel err {rel}");
            }
            checked += 1;
        }
    }

    #[test]
    fn exu_backward_finite_differences_relu_n() {
        let mut rng = Rng::new(99);
        let act = Activation::ReluN(1.0);
        let h = 1e-5;
        let mut checked = 0;
        while checked < 100 {
            let x = rng.uniform_range(-1.0, 1.0);
            let w = rng.uniform_range(-1.0, 1.5);
            let b = rng.uniform_range(-1.0, 1.0);
            let (_, cache) = exu_forward(&[x], &[w], &[b], act).unwrap();
            let z = cache.pre.get(0, 0);
            if act.kink_distance(z) <= 1e-3 || !(z > 0.0 && z < 1.0) {
                continue;
            }
            let f = |x: f64, w: f64, b: f64| exu_forward(&[x], &[w], &[b], act).unwrap().0.get(0, 0);
            let g = exu_backward(&cache, &Matrix::filled(1, 1, 1.0)).unwrap();
            let fd = [
                (f(x + h, w, b) - f(x - h, w, b)) / (2.0 * h),
                (f(x, w + h, b) - f(x, w - h, b)) / (2.0 * h),
                (f(x, w, b + h) - f(x, w, b - h)) / (2.0 * h),
            ];
            for (a, n) in [g.x[0], g.w[0], g.b[0]].iter().zip(fd) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                assert!(rel < 1e-6, "rel err {rel}");
            }
            checked += 1;
        }
    }

    #[test]
    fn exu_init_moments() {
        let mut rng = Rng::new(3);
        let (w, b) = init_exu_with_mean(&mut rng, 100_000, 3.5, (-1.0, 2.0));
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((3.49..=3.51).contains(&mean), "mean {mean}");
        assert!((0.49..=0.51).contains(&std), "std {std}");
        assert!(b.iter().all(|v| (-1.0..2.0).contains(v)));
    }

    #[test]
    fn exu_init_deterministic_and_finite() {
        let a = init_exu(&mut Rng::new(8), 64, (0.0, 1.0));
        let b = init_exu(&mut Rng::new(8), 64, (0.0, 1.0));
        assert_eq!(a, b);
        let (w, bias) = init_exu(&mut Rng::new(1), 1, (0.0, 0.0));
        assert_eq!((w.len(), bias.len()), (1, 1));
        assert!(w[0].is_finite() && bias[0] == 0.0);
    }

    #[test]
    fn dense_init_kaiming_variance() {
        let m = init_dense(&mut Rng::new(4), 2, 50_000, InitScheme::Kaiming);
        let n = m.data().len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((0.98..=1.02).contains(&var), "var {var}");
    }

    #[test]
    fn dense_init_xavier_bound() {
        let m = init_dense(&mut Rng::new(4), 30, 20, InitScheme::Xavier);
        let bound = (6.0_f64 / 50.0).sqrt();
        assert!(m.data().iter().all(|v| v.abs() <= bound));
        assert!(m.is_finite());
    }

    #[test]
    fn dense_init_deterministic() {
        for scheme in [InitScheme::Kaiming, InitScheme::Xavier] {
            let a = init_dense(&mut Rng::new(77), 5, 7, scheme);
            let b = init_dense(&mut Rng::new(77), 5, 7, scheme);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn relu_n_kinks_have_zero_derivative() {
        let a = Activation::ReluN(1.0);
        assert_eq!(a.derivative(0.0), 0.0);
        assert_eq!(a.derivative(1.0), 0.0);
        assert_eq!(a.derivative(0.5), 1.0);
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        assert!(Activation::ReluN(0.0).validate().is_err());
        assert!(Activation::ReluN(-1.0).validate().is_err());
    }

    #[test]
    fn rng_same_seed_same_stream() {
        let mut a = Rng::new(123);
        let mut b = Rng::new(123);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
            assert_eq!(a.normal(0.0, 1.0).to_bits(), b.normal(0.0, 1.0).to_bits());
        }
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
    }
}
