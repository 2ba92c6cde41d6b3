//! Small differentiable building blocks with hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::impl_param_set;
use crate::scalar::{lit, Scalar};
use crate::tensor::{gemm, matmul, Mat};

/// Affine map `y = x·w + b` over row vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub w: Mat<T>,
    pub b: Mat<T>,
}

impl_param_set!(Linear { w: Weight, b: Bias });

impl<T: Scalar> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Mat::zeros(input, output),
            b: Mat::zeros(1, output),
        }
    }

    /// Normal weights with std `1/sqrt(input)`, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = 1.0 / (input as f64).sqrt();
        Self {
            w: normal_mat(input, output, std, rng),
            b: Mat::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let mut y = matmul(x.view(), self.w.view());
        y.add_row_vector(self.b.as_slice());
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dx`.
    pub fn backward(&self, x: &Mat<T>, dy: &Mat<T>, grad: &mut Linear<T>) -> Mat<T> {
        gemm(T::one(), x.view().t(), dy.view(), T::one(), grad.w.view_mut());
        dy.sum_rows_into(grad.b.as_mut_slice());
        matmul(dy.view(), self.w.view().t())
    }
}

pub fn normal_mat<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat<T> {
    Mat::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        lit(z * std)
    })
}

/// Two affine layers with a tanh between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp2<T> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
}

impl_param_set!(Mlp2 {} nested { l1, l2 });

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Mlp2Cache<T> {
    pub hidden: Mat<T>,
}

impl<T: Scalar> Mlp2<T> {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::init(input, hidden, rng),
            l2: Linear::init(hidden, output, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            l1: Linear::zeros(input, hidden),
            l2: Linear::zeros(hidden, output),
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, Mlp2Cache<T>) {
        let mut hidden = self.l1.forward(x);
        hidden.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
        let y = self.l2.forward(&hidden);
        (y, Mlp2Cache { hidden })
    }

    pub fn backward(&self, x: &Mat<T>, cache: &Mlp2Cache<T>, dy: &Mat<T>, grad: &mut Mlp2<T>) -> Mat<T> {
        let mut dh = self.l2.backward(&cache.hidden, dy, &mut grad.l2);
        for (d, &h) in dh.as_mut_slice().iter_mut().zip(cache.hidden.as_slice()) {
            *d *= T::one() - h * h;
        }
        self.l1.backward(x, &dh, &mut grad.l1)
    }
}

/// L2-normalizes every row; returns the normalized rows and the original norms.
pub fn normalize_rows<T: Scalar>(x: &Mat<T>) -> (Mat<T>, Vec<T>) {
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = y.row_mut(r);
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (y, norms)
}

/// Backward of [`normalize_rows`]: `dx = (dy − y·(y·dy)) / |x|`.
pub fn normalize_rows_backward<T: Scalar>(y: &Mat<T>, norms: &[T], dy: &Mat<T>) -> Mat<T> {
    let mut dx = dy.clone();
    for (r, &norm) in norms.iter().enumerate().take(y.rows()) {
        let yr = y.row(r);
        let proj: T = yr.iter().zip(dy.row(r)).map(|(&a, &b)| a * b).sum();
        for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
            *d = (*d - yv * proj) / norm;
        }
    }
    dx
}

pub const LN_EPS: f64 = 1e-5;

/// Layer-norm intermediates per row.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: Mat<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm<T: Scalar>(x: &Mat<T>, gain: &[T], shift: &[T]) -> (Mat<T>, LayerNormCache<T>) {
    let d = x.cols();
    let n = T::from_usize(d).unwrap();
    let eps = lit::<T>(LN_EPS);
    let mut xhat = x.clone();
    let mut y = Mat::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = xhat.row_mut(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv_std.push(is);
        for ((o, &h), (&g, &b)) in y.row_mut(r).iter_mut().zip(xhat.row(r)).zip(gain.iter().zip(shift)) {
            *o = h * g + b;
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `dx`; accumulates into `dgain`/`dshift`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &[T],
    dy: &Mat<T>,
    dgain: &mut [T],
    dshift: &mut [T],
) -> Mat<T> {
    let d = dy.cols();
    let n = T::from_usize(d).unwrap();
    let mut dx = Mat::zeros(dy.rows(), d);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..dy.rows() {
        let xh = cache.xhat.row(r);
        let dyr = dy.row(r);
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dshift[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        let is = cache.inv_std[r];
        for ((o, &g), &h) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
            *o = is * (g - mean_d - h * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `(1 + tanh(z)) / 2` written as a logistic, which needs one `exp` instead
/// of a `tanh`.
fn half_one_plus_tanh<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-(z + z)).exp())
}

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(u: T) -> T {
    let z = lit::<T>(GELU_C) * (u + lit::<T>(GELU_A) * u * u * u);
    u * half_one_plus_tanh(z)
}

pub fn gelu_grad<T: Scalar>(u: T) -> T {
    let a = lit::<T>(GELU_A);
    let c = lit::<T>(GELU_C);
    let s = half_one_plus_tanh(c * (u + a * u * u * u));
    // d tanh = 1 − tanh² = 4 s (1 − s)
    let two = lit::<T>(2.0);
    s + u * two * s * (T::one() - s) * c * (T::one() + lit::<T>(3.0) * a * u * u)
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gelu_matches_the_tanh_formula() {
        for &u in &[-30.0, -3.0, -0.7, 0.0, 1e-9, 0.4, 2.5, 30.0] {
            let t = 0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh());
            assert!((gelu(u) - t).abs() < 1e-15, "u={u}");
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        for &u in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let num = fd(gelu::<f64>, u);
            assert!((num - gelu_grad(u)).abs() < 1e-8, "u={u}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = Mat::from_vec(2, 3, vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4]);
        let gain = [1.1, 0.7, -0.5];
        let shift = [0.1, 0.0, 0.2];
        let w = Mat::from_vec(2, 3, vec![0.5, -0.3, 0.9, 0.2, 1.4, -0.6]);
        let loss = |x: &Mat<f64>| -> f64 {
            let (y, _) = layer_norm(x, &gain, &shift);
            y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = layer_norm(&x, &gain, &shift);
        let (mut dg, mut ds) = ([0.0; 3], [0.0; 3]);
        let dx = layer_norm_backward(&cache, &gain, &w, &mut dg, &mut ds);
        for i in 0..6 {
            let h = 1e-6;
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((num - dx.as_slice()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn normalize_backward_is_orthogonal_to_output() {
        let x = Mat::from_vec(1, 3, vec![3.0, 4.0, 12.0]);
        let (y, norms) = normalize_rows(&x);
        assert_eq!(norms[0], 13.0);
        let dy = Mat::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
        let dx = normalize_rows_backward(&y, &norms, &dy);
        let along: f64 = dx.row(0).iter().zip(y.row(0)).map(|(a, b)| a * b).sum();
        assert!(along.abs() < 1e-15);
    }

    #[test]
    fn log_softmax_handles_large_logits() {
        let ls = log_softmax(&[1000.0f64, 0.0]);
        assert!(ls[0].abs() < 1e-12);
        assert!((ls[1] + 1000.0).abs() < 1e-9);
    }
}
