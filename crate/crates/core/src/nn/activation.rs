use super::{Float, Layer, Mode, Param, Tensor};

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Float> Layer<T> for Relu {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode == Mode::Train {
            self.mask = Some(x.data().iter().map(|&v| v > T::zero()).collect());
        }
        x.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mask = self.mask.take().expect("Relu::backward without forward");
        let data = dy
            .data()
            .iter()
            .zip(&mask)
            .map(|(&d, &m)| if m { d } else { T::zero() })
            .collect();
        Tensor::from_vec(dy.shape(), data)
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}

    fn visit_params_ref(&self, _f: &mut dyn FnMut(&Param<T>)) {}
}

/// Leaky rectifier with negative slope 0.01.
#[derive(Debug, Clone)]
pub struct LeakyRelu {
    slope: f64,
    mask: Option<Vec<bool>>,
}

impl Default for LeakyRelu {
    fn default() -> Self {
        Self {
            slope: 0.01,
            mask: None,
        }
    }
}

impl LeakyRelu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Float> Layer<T> for LeakyRelu {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode == Mode::Train {
            self.mask = Some(x.data().iter().map(|&v| v > T::zero()).collect());
        }
        let slope = T::from_f64_lossy(self.slope);
        x.map(|v| if v > T::zero() { v } else { v * slope })
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mask = self.mask.take().expect("LeakyRelu::backward without forward");
        let slope = T::from_f64_lossy(self.slope);
        let data = dy
            .data()
            .iter()
            .zip(&mask)
            .map(|(&d, &m)| if m { d } else { d * slope })
            .collect();
        Tensor::from_vec(dy.shape(), data)
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}

    fn visit_params_ref(&self, _f: &mut dyn FnMut(&Param<T>)) {}
}
