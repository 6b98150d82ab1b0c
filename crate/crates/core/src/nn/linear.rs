use rand::Rng;

use super::{Float, Layer, Mode, Param, Tensor};

/// Fully connected layer `y = x W^T + b` over `[B, in]` input.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_features: usize,
    out_features: usize,
    input: Option<Tensor<T>>,
}

impl<T: Float> Linear<T> {
    /// Default initialisation: weights and bias uniform in `±1/sqrt(in)`.
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Self {
            weight: Param::uniform(
                format!("{name}.weight"),
                &[out_features, in_features],
                bound,
                rng,
            ),
            bias: Param::uniform(format!("{name}.bias"), &[out_features], bound, rng),
            in_features,
            out_features,
            input: None,
        }
    }

    pub fn zeroed(name: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Param::filled(format!("{name}.weight"), &[out_features, in_features], T::zero()),
            bias: Param::filled(format!("{name}.bias"), &[out_features], T::zero()),
            in_features,
            out_features,
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }
}

impl<T: Float> Layer<T> for Linear<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let b = x.dim(0);
        assert_eq!(x.len(), b * self.in_features, "{}: width mismatch", self.weight.name);
        let mut y = Tensor::zeros(&[b, self.out_features]);
        for row in 0..b {
            y.item_mut(row).copy_from_slice(&self.bias.value);
        }
        T::gemm(
            b,
            self.in_features,
            self.out_features,
            T::one(),
            x.data(),
            false,
            &self.weight.value,
            true,
            T::one(),
            y.data_mut(),
        );
        self.input = (mode == Mode::Train).then(|| x.clone());
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self
            .input
            .take()
            .expect("Linear::backward without a training forward pass");
        let b = x.dim(0);
        T::gemm(
            self.out_features,
            b,
            self.in_features,
            T::one(),
            dy.data(),
            true,
            x.data(),
            false,
            T::one(),
            &mut self.weight.grad,
        );
        for row in 0..b {
            for (g, &d) in self.bias.grad.iter_mut().zip(dy.item(row)) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(&[b, self.in_features]);
        T::gemm(
            b,
            self.out_features,
            self.in_features,
            T::one(),
            dy.data(),
            false,
            &self.weight.value,
            false,
            T::zero(),
            dx.data_mut(),
        );
        dx.reshape(x.shape())
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
}
