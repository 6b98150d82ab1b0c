//! Minimal dense neural-network engine with explicit forward/backward passes.
//!
//! Layers cache whatever they need during a training-mode forward pass and
//! consume it in `backward`, accumulating parameter gradients into their
//! [`Param`]s. Everything is generic over [`Float`] so the same code runs in
//! `f32` for training and in `f64` for finite-difference gradient checks.

mod activation;
mod adam;
mod conv;
mod linear;
mod norm;
mod pool;
pub mod resnet;

pub use activation::{LeakyRelu, Relu};
pub use adam::{Adam, AdamConfig, AdamState};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::BatchNorm;
pub use pool::{GlobalAvgPool, MaxPool2d};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Floating-point element type usable by the engine.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Default
    + Send
    + Sync
    + std::fmt::Debug
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` with row-major `c` (m x n).
    ///
    /// `a` is m x k (or k x m when `trans_a`), `b` is k x n (or n x k when `trans_b`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn gemm_strides(m: usize, k: usize, n: usize, trans_a: bool, trans_b: bool) -> [isize; 4] {
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    [rsa as isize, csa as isize, rsb as isize, csb as isize]
}

macro_rules! impl_float {
    ($t:ty, $gemm:path) => {
        impl Float for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let [rsa, csa, rsb, csb] = gemm_strides(m, k, n, trans_a, trans_b);
                // SAFETY: bounds asserted above; strides describe dense buffers of
                // exactly those extents and `c` does not alias `a` or `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    /// Contiguous slice of the `i`-th item along axis 0.
    pub fn item(&self, i: usize) -> &[T] {
        let stride = self.data.len() / self.shape[0].max(1);
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let stride = self.data.len() / self.shape[0].max(1);
        &mut self.data[i * stride..(i + 1) * stride]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Forward-pass mode. Batch normalization uses batch statistics in `Train`
/// and running statistics in `Eval`; only `Train` caches activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named parameter or persistent buffer.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Running statistics are stored as non-trainable params so checkpoints
    /// and hashes cover them; optimizers skip them.
    pub trainable: bool,
}

impl<T: Float> Param<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let len = value.len();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value,
            grad: vec![T::zero(); len],
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: &[usize], value: Vec<T>) -> Self {
        let mut p = Self::new(name, shape, value);
        p.trainable = false;
        p
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: T) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![v; len])
    }

    /// He-normal initialisation, `std = sqrt(2 / fan_in)`.
    pub fn kaiming_normal(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let len = shape.iter().product();
        let value = (0..len)
            .map(|_| T::from_f64_lossy(normal.sample(rng)))
            .collect();
        Self::new(name, shape, value)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let len = shape.iter().product();
        let value = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            (0..len).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
        } else {
            vec![T::zero(); len]
        };
        Self::new(name, shape, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// A differentiable layer.
pub trait Layer<T: Float> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T>;

    /// Back-propagates `dy` through the most recent `Train` forward pass,
    /// accumulating parameter gradients. Returns the gradient w.r.t. the input.
    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T>;

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit_params_ref(&mut |p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }
}

/// Prefix every parameter name visited by `f` with `prefix.`.
pub(crate) fn scoped<T: Float>(layer: &mut impl Layer<T>, prefix: &str) {
    layer.visit_params(&mut |p| p.name = format!("{prefix}.{}", p.name));
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_for_all_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i % 7) as f64 - 3.0).collect();
        let naive = |ta: bool, tb: bool| {
            let mut c = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    for l in 0..k {
                        let av = if ta { a[l * m + i] } else { a[i * k + l] };
                        let bv = if tb { b[j * k + l] } else { b[l * n + j] };
                        c[i * n + j] += av * bv;
                    }
                }
            }
            c
        };
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![0.0; m * n];
                f64::gemm(m, k, n, 1.0, &a, ta, &b, tb, 0.0, &mut c);
                assert_eq!(c, naive(ta, tb), "ta={ta} tb={tb}");
            }
        }
    }
}
