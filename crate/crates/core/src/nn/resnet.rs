//! Residual encoders: the CIFAR-style ResNet (3 stages, parameter-free
//! shortcuts) and the ImageNet-style ResNet-34 used for 96-pixel inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    scoped, BatchNorm, Conv2d, Float, GlobalAvgPool, Layer, MaxPool2d, Mode, Param, Relu, Tensor,
};

/// Residual network layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ResNetLayout {
    /// 3x3 stem, three stages of `blocks_per_stage` basic blocks with widths
    /// `w, 2w, 4w`, zero-padded subsampling shortcuts, global average pool.
    Cifar {
        blocks_per_stage: usize,
        base_width: usize,
    },
    /// 7x7/2 stem + 3x3/2 max pool, stages `[3, 4, 6, 3]` with widths
    /// 64..512 and 1x1 projection shortcuts.
    ResNet34,
}

impl ResNetLayout {
    pub const RESNET32: ResNetLayout = ResNetLayout::Cifar {
        blocks_per_stage: 5,
        base_width: 16,
    };

    pub fn feature_dim(&self) -> usize {
        match *self {
            ResNetLayout::Cifar { base_width, .. } => 4 * base_width,
            ResNetLayout::ResNet34 => 512,
        }
    }
}

#[derive(Debug, Clone)]
enum Shortcut<T> {
    Identity,
    /// Strided subsampling plus symmetric zero channels.
    PadSubsample {
        stride: usize,
        pad_channels: usize,
        input_shape: Option<Vec<usize>>,
    },
    Projection {
        conv: Conv2d<T>,
        bn: BatchNorm<T>,
    },
}

#[derive(Debug, Clone)]
pub struct BasicBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm<T>,
    relu1: Relu,
    conv2: Conv2d<T>,
    bn2: BatchNorm<T>,
    shortcut: Shortcut<T>,
    relu_out: Relu,
}

impl<T: Float> BasicBlock<T> {
    fn new(
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        projection: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let shortcut = if stride == 1 && cin == cout {
            Shortcut::Identity
        } else if projection {
            Shortcut::Projection {
                conv: Conv2d::new(&format!("{name}.down.conv"), cin, cout, 1, stride, 0, rng),
                bn: BatchNorm::new(&format!("{name}.down.bn"), cout),
            }
        } else {
            assert_eq!((cout - cin) % 2, 0, "channel growth must be even");
            Shortcut::PadSubsample {
                stride,
                pad_channels: (cout - cin) / 2,
                input_shape: None,
            }
        };
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, stride, 1, rng),
            bn1: BatchNorm::new(&format!("{name}.bn1"), cout),
            relu1: Relu::new(),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
            bn2: BatchNorm::new(&format!("{name}.bn2"), cout),
            shortcut,
            relu_out: Relu::new(),
        }
    }

    fn shortcut_forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        match &mut self.shortcut {
            Shortcut::Identity => x.clone(),
            Shortcut::Projection { conv, bn } => {
                let y = conv.forward(x, mode);
                bn.forward(&y, mode)
            }
            Shortcut::PadSubsample {
                stride,
                pad_channels,
                input_shape,
            } => {
                let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
                let (ho, wo) = (h.div_ceil(*stride), w.div_ceil(*stride));
                let cout = c + 2 * *pad_channels;
                let mut y = Tensor::zeros(&[b, cout, ho, wo]);
                for n in 0..b {
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let src = ((n * c + ch) * h + oy * *stride) * w + ox * *stride;
                                let dst = ((n * cout + ch + *pad_channels) * ho + oy) * wo + ox;
                                y.data_mut()[dst] = x.data()[src];
                            }
                        }
                    }
                }
                if mode == Mode::Train {
                    *input_shape = Some(x.shape().to_vec());
                }
                y
            }
        }
    }

    fn shortcut_backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        match &mut self.shortcut {
            Shortcut::Identity => dy.clone(),
            Shortcut::Projection { conv, bn } => {
                let d = bn.backward(dy);
                conv.backward(&d)
            }
            Shortcut::PadSubsample {
                stride,
                pad_channels,
                input_shape,
            } => {
                let shape = input_shape.take().expect("shortcut backward without forward");
                let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let (cout, ho, wo) = (dy.dim(1), dy.dim(2), dy.dim(3));
                let mut dx = Tensor::zeros(&shape);
                for n in 0..b {
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let dst = ((n * c + ch) * h + oy * *stride) * w + ox * *stride;
                                let src = ((n * cout + ch + *pad_channels) * ho + oy) * wo + ox;
                                dx.data_mut()[dst] = dy.data()[src];
                            }
                        }
                    }
                }
                dx
            }
        }
    }
}

impl<T: Float> Layer<T> for BasicBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let h = self.conv1.forward(x, mode);
        let h = self.bn1.forward(&h, mode);
        let h = self.relu1.forward(&h, mode);
        let h = self.conv2.forward(&h, mode);
        let mut h = self.bn2.forward(&h, mode);
        let s = self.shortcut_forward(x, mode);
        for (a, b) in h.data_mut().iter_mut().zip(s.data()) {
            *a += *b;
        }
        self.relu_out.forward(&h, mode)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.relu_out.backward(dy);
        let ds = self.shortcut_backward(&d);
        let g = self.bn2.backward(&d);
        let g = self.conv2.backward(&g);
        let g = self.relu1.backward(&g);
        let g = self.bn1.backward(&g);
        let mut dx = self.conv1.backward(&g);
        for (a, b) in dx.data_mut().iter_mut().zip(ds.data()) {
            *a += *b;
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Shortcut::Projection { conv, bn } = &mut self.shortcut {
            conv.visit_params(f);
            bn.visit_params(f);
        }
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv1.visit_params_ref(f);
        self.bn1.visit_params_ref(f);
        self.conv2.visit_params_ref(f);
        self.bn2.visit_params_ref(f);
        if let Shortcut::Projection { conv, bn } = &self.shortcut {
            conv.visit_params_ref(f);
            bn.visit_params_ref(f);
        }
    }
}

/// Residual backbone mapping `[B, 3, S, S]` images to `[B, D]` features.
#[derive(Debug, Clone)]
pub struct ResNet<T> {
    layout: ResNetLayout,
    stem_conv: Conv2d<T>,
    stem_bn: BatchNorm<T>,
    stem_relu: Relu,
    stem_pool: Option<MaxPool2d>,
    blocks: Vec<BasicBlock<T>>,
    pool: GlobalAvgPool,
}

impl<T: Float> ResNet<T> {
    pub fn new(layout: ResNetLayout, rng: &mut impl Rng) -> Self {
        let mut blocks = Vec::new();
        let (stem_conv, stem_bn, stem_pool) = match layout {
            ResNetLayout::Cifar {
                blocks_per_stage,
                base_width,
            } => {
                let mut cin = base_width;
                for stage in 0..3 {
                    let width = base_width << stage;
                    for i in 0..blocks_per_stage {
                        let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                        blocks.push(BasicBlock::new(
                            &format!("layer{}.{i}", stage + 1),
                            cin,
                            width,
                            stride,
                            false,
                            rng,
                        ));
                        cin = width;
                    }
                }
                (
                    Conv2d::new("stem.conv", 3, base_width, 3, 1, 1, rng),
                    BatchNorm::new("stem.bn", base_width),
                    None,
                )
            }
            ResNetLayout::ResNet34 => {
                let mut cin = 64;
                for (stage, &n) in [3usize, 4, 6, 3].iter().enumerate() {
                    let width = 64 << stage;
                    for i in 0..n {
                        let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                        blocks.push(BasicBlock::new(
                            &format!("layer{}.{i}", stage + 1),
                            cin,
                            width,
                            stride,
                            true,
                            rng,
                        ));
                        cin = width;
                    }
                }
                (
                    Conv2d::new("stem.conv", 3, 64, 7, 2, 3, rng),
                    BatchNorm::new("stem.bn", 64),
                    Some(MaxPool2d::new(3, 2, 1)),
                )
            }
        };
        let mut net = Self {
            layout,
            stem_conv,
            stem_bn,
            stem_relu: Relu::new(),
            stem_pool,
            blocks,
            pool: GlobalAvgPool::new(),
        };
        scoped(&mut net, "encoder");
        net
    }

    pub fn layout(&self) -> ResNetLayout {
        self.layout
    }

    pub fn feature_dim(&self) -> usize {
        self.layout.feature_dim()
    }
}

impl<T: Float> Layer<T> for ResNet<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let h = self.stem_conv.forward(x, mode);
        let h = self.stem_bn.forward(&h, mode);
        let mut h = self.stem_relu.forward(&h, mode);
        if let Some(pool) = &mut self.stem_pool {
            h = pool.forward(&h, mode);
        }
        for block in &mut self.blocks {
            h = block.forward(&h, mode);
        }
        self.pool.forward(&h, mode)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = self.pool.backward(dy);
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g);
        }
        if let Some(pool) = &mut self.stem_pool {
            g = pool.backward(&g);
        }
        let g = self.stem_relu.backward(&g);
        let g = self.stem_bn.backward(&g);
        self.stem_conv.backward(&g)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem_conv.visit_params(f);
        self.stem_bn.visit_params(f);
        for block in &mut self.blocks {
            block.visit_params(f);
        }
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stem_conv.visit_params_ref(f);
        self.stem_bn.visit_params_ref(f);
        for block in &self.blocks {
            block.visit_params_ref(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resnet32_parameter_count() {
        // stem 3*16*9 + BN(16); each 3x3 conv cin*cout*9, each BN 2*c.
        let conv = |cin: usize, cout: usize| cin * cout * 9;
        let block = |cin: usize, cout: usize| conv(cin, cout) + conv(cout, cout) + 4 * cout;
        let stage = |cin: usize, cout: usize| block(cin, cout) + 4 * block(cout, cout);
        let expected = conv(3, 16) + 32 + stage(16, 16) + stage(16, 32) + stage(32, 64);
        assert_eq!(expected, 463_504);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = ResNet::<f32>::new(ResNetLayout::RESNET32, &mut rng);
        assert_eq!(net.num_trainable(), expected);
        assert_eq!(net.feature_dim(), 64);
    }

    #[test]
    fn resnet34_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = ResNet::<f32>::new(ResNetLayout::ResNet34, &mut rng);
        // 21.28M parameters without the classifier.
        assert_eq!(net.num_trainable(), 21_284_672);
        let y = net.forward(&Tensor::zeros(&[1, 3, 96, 96]), Mode::Eval);
        assert_eq!(y.shape(), &[1, 512]);
    }

    #[test]
    fn small_cifar_net_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = ResNet::<f64>::new(
            ResNetLayout::Cifar {
                blocks_per_stage: 1,
                base_width: 2,
            },
            &mut rng,
        );
        let x = Tensor::from_vec(
            &[3, 3, 4, 4],
            (0..144).map(|i| ((i * 31 % 17) as f64 - 8.0) / 5.0).collect(),
        );
        check_layer(&mut net, &x, 1e-4);
    }

    #[test]
    fn projection_block_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut block = BasicBlock::<f64>::new("b", 2, 4, 2, true, &mut rng);
        let x = Tensor::from_vec(
            &[2, 2, 4, 4],
            (0..64).map(|i| ((i * 13 % 11) as f64 - 5.0) / 4.0).collect(),
        );
        check_layer(&mut block, &x, 1e-4);
    }
}
