use super::{Float, Layer, Mode, Param, Tensor};

/// `[B, C, H, W] -> [B, C]` spatial mean.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Float> Layer<T> for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let (b, c) = (x.dim(0), x.dim(1));
        let hw: usize = x.shape()[2..].iter().product();
        let scale = T::one() / T::from_usize(hw).expect("hw");
        let data = x
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * scale)
            .collect();
        if mode == Mode::Train {
            self.input_shape = Some(x.shape().to_vec());
        }
        Tensor::from_vec(&[b, c], data)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let shape = self.input_shape.take().expect("GlobalAvgPool::backward without forward");
        let hw: usize = shape[2..].iter().product();
        let scale = T::one() / T::from_usize(hw).expect("hw");
        let mut dx = Vec::with_capacity(shape.iter().product());
        for &g in dy.data() {
            dx.extend(std::iter::repeat_n(g * scale, hw));
        }
        Tensor::from_vec(&shape, dx)
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}

    fn visit_params_ref(&self, _f: &mut dyn FnMut(&Param<T>)) {}
}

/// Max pooling with padding treated as `-inf`.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    pad: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn output_side(&self, side: usize) -> usize {
        (side + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

impl<T: Float> Layer<T> for MaxPool2d {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (ho, wo) = (self.output_side(h), self.output_side(w));
        let mut y = Tensor::zeros(&[b, c, ho, wo]);
        let mut argmax = vec![0usize; b * c * ho * wo];
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = base;
                    for ki in 0..self.kernel {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if x.data()[idx] > best {
                                best = x.data()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    y.data_mut()[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        if mode == Mode::Train {
            self.cache = Some((x.shape().to_vec(), argmax));
        }
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (shape, argmax) = self.cache.take().expect("MaxPool2d::backward without forward");
        let mut dx = Tensor::zeros(&shape);
        for (o, &src) in argmax.iter().enumerate() {
            dx.data_mut()[src] += dy.data()[o];
        }
        dx
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}

    fn visit_params_ref(&self, _f: &mut dyn FnMut(&Param<T>)) {}
}
