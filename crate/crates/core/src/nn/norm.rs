use super::{Float, Layer, Mode, Param, Tensor};

/// Batch normalization over axis 1 of `[B, C]` or `[B, C, H, W]` input.
///
/// Running statistics follow the usual convention: momentum 0.1, the running
/// variance tracks the unbiased batch variance, normalization uses the biased one.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    channels: usize,
    momentum: f64,
    eps: f64,
    cache: Option<Cache<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Float> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), &[channels], T::one()),
            beta: Param::filled(format!("{name}.beta"), &[channels], T::zero()),
            running_mean: Param::buffer(
                format!("{name}.running_mean"),
                &[channels],
                vec![T::zero(); channels],
            ),
            running_var: Param::buffer(
                format!("{name}.running_var"),
                &[channels],
                vec![T::one(); channels],
            ),
            channels,
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn spatial(x: &Tensor<T>) -> usize {
        x.shape()[2..].iter().product()
    }
}

impl<T: Float> Layer<T> for BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let b = x.dim(0);
        let c = x.dim(1);
        assert_eq!(c, self.channels, "{}: channel mismatch", self.gamma.name);
        let hw = Self::spatial(x);
        let mut y = Tensor::zeros(x.shape());
        let eps = T::from_f64_lossy(self.eps);

        match mode {
            Mode::Eval => {
                for ch in 0..c {
                    let inv = T::one() / (self.running_var.value[ch] + eps).sqrt();
                    let scale = self.gamma.value[ch] * inv;
                    let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
                    for n in 0..b {
                        let off = (n * c + ch) * hw;
                        for i in off..off + hw {
                            y.data_mut()[i] = x.data()[i] * scale + shift;
                        }
                    }
                }
                self.cache = None;
            }
            Mode::Train => {
                let count = (b * hw) as f64;
                let mut x_hat = Tensor::zeros(x.shape());
                let mut inv_std = vec![T::zero(); c];
                let momentum = T::from_f64_lossy(self.momentum);
                for ch in 0..c {
                    let mut sum = 0.0;
                    for n in 0..b {
                        let off = (n * c + ch) * hw;
                        sum += x.data()[off..off + hw].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mean = sum / count;
                    let mut sq = 0.0;
                    for n in 0..b {
                        let off = (n * c + ch) * hw;
                        sq += x.data()[off..off + hw]
                            .iter()
                            .map(|v| (v.as_f64() - mean).powi(2))
                            .sum::<f64>();
                    }
                    let var = sq / count;
                    let inv = 1.0 / (var + self.eps).sqrt();
                    inv_std[ch] = T::from_f64_lossy(inv);
                    let mean_t = T::from_f64_lossy(mean);
                    for n in 0..b {
                        let off = (n * c + ch) * hw;
                        for i in off..off + hw {
                            let xh = (x.data()[i] - mean_t) * inv_std[ch];
                            x_hat.data_mut()[i] = xh;
                            y.data_mut()[i] = xh * self.gamma.value[ch] + self.beta.value[ch];
                        }
                    }
                    let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                    let rm = &mut self.running_mean.value[ch];
                    *rm = (T::one() - momentum) * *rm + momentum * mean_t;
                    let rv = &mut self.running_var.value[ch];
                    *rv = (T::one() - momentum) * *rv + momentum * T::from_f64_lossy(unbiased);
                }
                self.cache = Some(Cache { x_hat, inv_std });
            }
        }
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let Cache { x_hat, inv_std } = self
            .cache
            .take()
            .expect("BatchNorm::backward without a training forward pass");
        let b = dy.dim(0);
        let c = dy.dim(1);
        let hw = Self::spatial(dy);
        let count = T::from_usize(b * hw).expect("count");
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            for n in 0..b {
                let off = (n * c + ch) * hw;
                for i in off..off + hw {
                    sum_dy += dy.data()[i];
                    sum_dy_xh += dy.data()[i] * x_hat.data()[i];
                }
            }
            self.gamma.grad[ch] += sum_dy_xh;
            self.beta.grad[ch] += sum_dy;
            let k = self.gamma.value[ch] * inv_std[ch] / count;
            for n in 0..b {
                let off = (n * c + ch) * hw;
                for i in off..off + hw {
                    dx.data_mut()[i] =
                        k * (count * dy.data()[i] - sum_dy - x_hat.data()[i] * sum_dy_xh);
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;

    fn input(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect())
    }

    #[test]
    fn train_output_is_standardized_per_channel() {
        let mut bn = BatchNorm::<f64>::new("bn", 3);
        let y = bn.forward(&input(&[4, 3, 2, 2]), Mode::Train);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| y.data()[(n * 3 + ch) * 4..(n * 3 + ch + 1) * 4].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn gradients_match_finite_differences_4d_and_2d() {
        let mut bn = BatchNorm::<f64>::new("bn", 2);
        bn.gamma.value = vec![1.3, -0.7];
        bn.beta.value = vec![0.2, 0.5];
        check_layer(&mut bn, &input(&[3, 2, 2, 2]), 1e-5);
        let mut bn1 = BatchNorm::<f64>::new("bn1", 4);
        check_layer(&mut bn1, &input(&[5, 4]), 1e-5);
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut bn = BatchNorm::<f64>::new("bn", 1);
        bn.running_mean.value = vec![2.0];
        bn.running_var.value = vec![4.0 - 1e-5];
        let y = bn.forward(&Tensor::from_vec(&[1, 1], vec![6.0]), Mode::Eval);
        assert!((y.data()[0] - 2.0).abs() < 1e-12);
    }
}
