use rand::Rng;

use super::{Float, Layer, Mode, Param, Tensor};

/// 2-D convolution without bias over NCHW input, lowered to GEMM via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    input: Option<Tensor<T>>,
}

impl<T: Float> Conv2d<T> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::kaiming_normal(
                format!("{name}.weight"),
                &[out_channels, in_channels, kernel, kernel],
                fan_in,
                rng,
            ),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            input: None,
        }
    }

    pub fn output_side(&self, side: usize) -> usize {
        (side + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, ho: usize, wo: usize, cols: &mut [T]) {
        let k = self.kernel;
        let hw_out = ho * wo;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [T]) {
        let k = self.kernel;
        let hw_out = ho * wo;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Float> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        assert_eq!(c, self.in_channels, "{}: channel mismatch", self.weight.name);
        let (ho, wo) = (self.output_side(h), self.output_side(w));
        let ckk = c * self.kernel * self.kernel;
        let mut y = Tensor::zeros(&[b, self.out_channels, ho, wo]);
        let mut cols = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); ckk * ho * wo]
        };
        for i in 0..b {
            let xi = x.item(i);
            let src: &[T] = if self.is_pointwise() {
                xi
            } else {
                self.im2col(xi, h, w, ho, wo, &mut cols);
                &cols
            };
            T::gemm(
                self.out_channels,
                ckk,
                ho * wo,
                T::one(),
                &self.weight.value,
                false,
                src,
                false,
                T::zero(),
                y.item_mut(i),
            );
        }
        self.input = (mode == Mode::Train).then(|| x.clone());
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self
            .input
            .take()
            .expect("Conv2d::backward without a training forward pass");
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (ho, wo) = (dy.dim(2), dy.dim(3));
        let ckk = c * self.kernel * self.kernel;
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = vec![T::zero(); ckk * ho * wo];
        let mut dcols = vec![T::zero(); ckk * ho * wo];
        for i in 0..b {
            let dyi = dy.item(i);
            let xi = x.item(i);
            let src: &[T] = if self.is_pointwise() {
                xi
            } else {
                self.im2col(xi, h, w, ho, wo, &mut cols);
                &cols
            };
            // dW += dY * cols^T
            T::gemm(
                self.out_channels,
                ho * wo,
                ckk,
                T::one(),
                dyi,
                false,
                src,
                true,
                T::one(),
                &mut self.weight.grad,
            );
            // dcols = W^T * dY
            if self.is_pointwise() {
                T::gemm(
                    ckk,
                    self.out_channels,
                    ho * wo,
                    T::one(),
                    &self.weight.value,
                    true,
                    dyi,
                    false,
                    T::zero(),
                    dx.item_mut(i),
                );
            } else {
                T::gemm(
                    ckk,
                    self.out_channels,
                    ho * wo,
                    T::one(),
                    &self.weight.value,
                    true,
                    dyi,
                    false,
                    T::zero(),
                    &mut dcols,
                );
                self.col2im(&dcols, h, w, ho, wo, dx.item_mut(i));
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight)
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct nested-loop convolution used as an oracle.
    fn direct_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (ho, wo) = (conv.output_side(h), conv.output_side(w));
        let k = conv.kernel;
        let mut y = Tensor::zeros(&[b, conv.out_channels, ho, wo]);
        for n in 0..b {
            for o in 0..conv.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * conv.stride + ki) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kj) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((n * c + ci) * h + iy as usize) * w + ix as usize];
                                    let wv = conv.weight.value[((o * c + ci) * k + ki) * k + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        y.data_mut()[((n * conv.out_channels + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (7, 2, 3)] {
            let mut conv = Conv2d::<f64>::new("c", 2, 3, k, s, p, &mut rng);
            let x = random_input(&[2, 2, 9, 9], 7);
            let y = conv.forward(&x, Mode::Eval);
            let expected = direct_conv(&conv, &x);
            for (a, b) in y.data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0)] {
            let mut conv = Conv2d::<f64>::new("c", 2, 2, k, s, p, &mut rng);
            let x = random_input(&[2, 2, 5, 5], 3);
            check_layer(&mut conv, &x, 1e-6);
        }
    }
}
