//! Encoder, relation head and the composite pair loss.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::PairRow;
use crate::nn::resnet::{ResNet, ResNetLayout};
use crate::nn::{scoped, BatchNorm, Float, Layer, LeakyRelu, Linear, Mode, Param, Tensor};
use crate::{Error, Result};

/// Hidden width of the relation head.
pub const HEAD_HIDDEN: usize = 256;

/// Lower/upper clamp applied to class probabilities before the logarithm.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub architecture: ResNetLayout,
    pub input_size: usize,
}

impl EncoderConfig {
    pub fn resnet32(input_size: usize) -> Self {
        Self {
            architecture: ResNetLayout::RESNET32,
            input_size,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.architecture.feature_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.architecture == ResNetLayout::ResNet34 && self.input_size != 96 {
            return Err(Error::Config(format!(
                "ResNet-34 is reserved for 96-pixel inputs, got {}",
                self.input_size
            )));
        }
        if self.input_size < 8 {
            return Err(Error::Config(format!("input size {} too small", self.input_size)));
        }
        Ok(())
    }
}

/// Calls and views seen by [`Encoder::encode`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounter {
    pub forward_calls: u64,
    pub views_encoded: u64,
}

/// Single shared backbone: image views and patch views go through the same weights.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    net: ResNet<f32>,
    counter: PassCounter,
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            net: ResNet::new(config.architecture, rng),
            counter: PassCounter::default(),
        })
    }

    pub fn config(&self) -> EncoderConfig {
        self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn counter(&self) -> PassCounter {
        self.counter
    }

    pub fn reset_counter(&mut self) {
        self.counter = PassCounter::default();
    }

    /// `[P, 3, S, S]` views to `[P, D]` representations.
    pub fn encode(&mut self, views: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
        let s = self.config.input_size;
        if views.shape().len() != 4 || views.shape()[1..] != [3, s, s] {
            return Err(Error::Contract(format!(
                "encoder expects [P, 3, {s}, {s}] input, got {:?}",
                views.shape()
            )));
        }
        self.counter.forward_calls += 1;
        self.counter.views_encoded += views.dim(0) as u64;
        let out = self.net.forward(views, mode);
        if !out.all_finite() {
            let bad = out.data().iter().filter(|v| !v.is_finite()).count();
            return Err(Error::NonFinite {
                stage: "encoder activations".into(),
                step: 0,
                diagnostics: format!("{bad} of {} outputs non-finite for {} views", out.len(), views.dim(0)),
            });
        }
        Ok(out)
    }

    /// Backpropagates `d_reps` (`[P, D]`) into parameter gradients.
    pub fn backward(&mut self, d_reps: &Tensor<f32>) {
        self.net.backward(d_reps);
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
        self.net.visit_params(f);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<f32>)) {
        self.net.visit_params_ref(f);
    }

    pub fn zero_grad(&mut self) {
        self.net.zero_grad();
    }

    /// SHA-256 over every parameter and buffer, in visiting order.
    pub fn parameter_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        self.visit_params_ref(&mut |p| {
            h.update(p.name.as_bytes());
            for v in &p.value {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }
}

/// Two-layer pair classifier/regressor over concatenated representations:
/// `Linear(2D, 256) -> BatchNorm -> LeakyReLU -> Linear(256, 3)`.
#[derive(Debug, Clone)]
pub struct RelationHead<T> {
    fc1: Linear<T>,
    bn: BatchNorm<T>,
    act: LeakyRelu,
    fc2: Linear<T>,
    feature_dim: usize,
    pairs: Vec<(usize, usize)>,
    rows: usize,
}

impl<T: Float> RelationHead<T> {
    pub fn new(feature_dim: usize, rng: &mut impl Rng) -> Self {
        let fc1 = Linear::new("fc1", 2 * feature_dim, HEAD_HIDDEN, rng);
        let fc2 = Linear::new("fc2", HEAD_HIDDEN, 3, rng);
        Self::assemble(feature_dim, fc1, fc2)
    }

    /// All weights and biases zero.
    pub fn zeroed(feature_dim: usize) -> Self {
        Self::assemble(
            feature_dim,
            Linear::zeroed("fc1", 2 * feature_dim, HEAD_HIDDEN),
            Linear::zeroed("fc2", HEAD_HIDDEN, 3),
        )
    }

    fn assemble(feature_dim: usize, fc1: Linear<T>, fc2: Linear<T>) -> Self {
        let mut head = Self {
            fc1,
            bn: BatchNorm::new("bn", HEAD_HIDDEN),
            act: LeakyRelu::new(),
            fc2,
            feature_dim,
            pairs: Vec::new(),
            rows: 0,
        };
        scoped(&mut head, "head");
        head
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Raw outputs `[#pairs, 3]` for `(reps[left] ++ reps[right])`. Column 0 is
    /// the class logit, columns 1 and 2 the predicted distance.
    pub fn relate(&mut self, reps: &Tensor<T>, pairs: &[PairRow], mode: Mode) -> Tensor<T> {
        let d = self.feature_dim;
        assert_eq!(reps.shape(), [reps.dim(0), d], "representation width");
        let mut x = Tensor::zeros(&[pairs.len(), 2 * d]);
        for (i, p) in pairs.iter().enumerate() {
            let row = x.item_mut(i);
            row[..d].copy_from_slice(reps.item(p.left));
            row[d..].copy_from_slice(reps.item(p.right));
        }
        self.pairs = pairs.iter().map(|p| (p.left, p.right)).collect();
        self.rows = reps.dim(0);
        self.forward(&x, mode)
    }

    /// Gradient of the outputs of the last [`relate`](Self::relate) scattered
    /// back onto the `[P, D]` representations.
    pub fn relate_backward(&mut self, d_out: &Tensor<T>) -> Tensor<T> {
        let d = self.feature_dim;
        let dx = self.backward(d_out);
        let mut d_reps = Tensor::zeros(&[self.rows, d]);
        for (i, &(l, r)) in self.pairs.iter().enumerate() {
            let g = dx.item(i);
            for (acc, &v) in d_reps.item_mut(l).iter_mut().zip(&g[..d]) {
                *acc += v;
            }
            for (acc, &v) in d_reps.item_mut(r).iter_mut().zip(&g[d..]) {
                *acc += v;
            }
        }
        d_reps
    }
}

impl<T: Float> Layer<T> for RelationHead<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let h = self.fc1.forward(x, mode);
        let h = self.bn.forward(&h, mode);
        let h = self.act.forward(&h, mode);
        self.fc2.forward(&h, mode)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let g = self.fc2.backward(dy);
        let g = self.act.backward(&g);
        let g = self.bn.backward(&g);
        self.fc1.backward(&g)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fc1.visit_params(f);
        self.bn.visit_params(f);
        self.fc2.visit_params(f);
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.fc1.visit_params_ref(f);
        self.bn.visit_params_ref(f);
        self.fc2.visit_params_ref(f);
    }
}

/// Interpreted head output for one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationOutput {
    pub probability: f64,
    pub dx: f64,
    pub dy: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn interpret<T: Float>(raw: &Tensor<T>) -> Vec<RelationOutput> {
    (0..raw.dim(0))
        .map(|i| {
            let r = raw.item(i);
            RelationOutput {
                probability: sigmoid(r[0].as_f64()),
                dx: r[1].as_f64(),
                dy: r[2].as_f64(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_bce: f64,
    pub l_mse_x: f64,
    pub l_mse_y: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    fn from_parts(l_bce: f64, l_mse_x: f64, l_mse_y: f64) -> Self {
        Self {
            l_bce,
            l_mse_x,
            l_mse_y,
            l_total: l_bce + l_mse_x + l_mse_y,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_bce.is_finite() && self.l_mse_x.is_finite() && self.l_mse_y.is_finite() && self.l_total.is_finite()
    }
}

/// Mean BCE on column 0 (through a sigmoid, clamped to `[eps, 1 - eps]`) plus
/// mean squared error on columns 1 and 2, over every row. Returns the loss and
/// its gradient with respect to `raw`.
pub fn pair_loss<T: Float>(raw: &Tensor<T>, pairs: &[PairRow]) -> Result<(LossBreakdown, Tensor<T>)> {
    let b = raw.dim(0);
    if b != pairs.len() || raw.shape() != [b, 3] {
        return Err(Error::Contract(format!(
            "{} target rows for outputs of shape {:?}",
            pairs.len(),
            raw.shape()
        )));
    }
    if b == 0 {
        return Ok((LossBreakdown::from_parts(0.0, 0.0, 0.0), Tensor::zeros(&[0, 3])));
    }
    let inv = 1.0 / b as f64;
    let (mut bce, mut mx, mut my) = (0.0, 0.0, 0.0);
    let mut grad = Tensor::zeros(&[b, 3]);
    for (i, p) in pairs.iter().enumerate() {
        let r = raw.item(i);
        let t = p.class_target;
        let prob = sigmoid(r[0].as_f64());
        let clamped = prob.clamp(BCE_EPS, 1.0 - BCE_EPS);
        bce -= t * clamped.ln() + (1.0 - t) * (1.0 - clamped).ln();
        let ex = r[1].as_f64() - p.distance_target.0;
        let ey = r[2].as_f64() - p.distance_target.1;
        mx += ex * ex;
        my += ey * ey;
        let g = grad.item_mut(i);
        let g0 = if clamped == prob { (prob - t) * inv } else { 0.0 };
        g[0] = T::from_f64_lossy(g0);
        g[1] = T::from_f64_lossy(2.0 * ex * inv);
        g[2] = T::from_f64_lossy(2.0 * ey * inv);
    }
    let loss = LossBreakdown::from_parts(bce * inv, mx * inv, my * inv);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            stage: "pair loss".into(),
            step: 0,
            diagnostics: format!("{loss:?} over {b} pairs"),
        });
    }
    Ok((loss, grad))
}

/// Backbone plus relation head, trained jointly.
#[derive(Debug, Clone)]
pub struct SpatialModel {
    pub encoder: Encoder,
    pub head: RelationHead<f32>,
}

impl SpatialModel {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let encoder = Encoder::new(config, rng)?;
        let head = RelationHead::new(encoder.feature_dim(), rng);
        Ok(Self { encoder, head })
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
        self.encoder.visit_params(f);
        self.head.visit_params(f);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<f32>)) {
        self.encoder.visit_params_ref(f);
        self.head.visit_params_ref(f);
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.head.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::PairKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(left: usize, right: usize, class: f64, t: (f64, f64), kind: PairKind) -> PairRow {
        PairRow {
            left,
            right,
            class_target: class,
            distance_target: t,
            kind,
        }
    }

    #[test]
    fn zero_head_outputs_half_and_zero() {
        let mut head = RelationHead::<f64>::zeroed(4);
        let reps = Tensor::from_vec(&[2, 4], (0..8).map(f64::from).collect());
        let pairs = [row(0, 1, 1.0, (0.0, 0.0), PairKind::ImagePos), row(1, 0, 0.0, (1.0, 1.0), PairKind::ImageNeg)];
        for mode in [Mode::Train, Mode::Eval] {
            let out = interpret(&head.relate(&reps, &pairs, mode));
            assert_eq!(out.len(), 2);
            for o in out {
                assert_eq!((o.probability, o.dx, o.dy), (0.5, 0.0, 0.0));
            }
        }
    }

    #[test]
    fn relate_is_order_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = RelationHead::<f64>::new(8, &mut rng);
        let reps = Tensor::from_vec(&[2, 8], (0..16).map(|i| (i as f64 * 0.37).sin()).collect());
        let ab = head.relate(&reps, &[row(0, 1, 1.0, (0.0, 0.0), PairKind::ImagePos)], Mode::Eval);
        let ba = head.relate(&reps, &[row(1, 0, 1.0, (0.0, 0.0), PairKind::ImagePos)], Mode::Eval);
        assert_eq!(ab.shape(), [1, 3]);
        assert_ne!(ab.data(), ba.data());
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let raw = Tensor::from_vec(&[1, 3], vec![0.0f64, 0.0, 0.0]);
        let (l, _) = pair_loss(&raw, &[row(0, 1, 1.0, (0.0, 0.0), PairKind::ImagePos)]).unwrap();
        assert!((l.l_bce - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l.l_mse_x + l.l_mse_y, 0.0);
    }

    #[test]
    fn patch_example_mse() {
        // Logit large enough that the clamped BCE is ~1e-7.
        let raw = Tensor::from_vec(&[1, 3], vec![40.0f64, 0.0, 0.0]);
        let (l, _) = pair_loss(&raw, &[row(0, 1, 1.0, (-0.2, 0.5), PairKind::Patch)]).unwrap();
        assert!((l.l_total - 0.29).abs() < 1e-6, "{l:?}");
    }

    #[test]
    fn perfect_predictions_give_near_zero() {
        let raw = Tensor::from_vec(&[2, 3], vec![50.0f64, 0.3, -0.1, -50.0, 1.0, 1.0]);
        let pairs = [row(0, 1, 1.0, (0.3, -0.1), PairKind::Patch), row(0, 1, 0.0, (1.0, 1.0), PairKind::ImageNeg)];
        let (l, _) = pair_loss(&raw, &pairs).unwrap();
        assert_eq!(l.l_mse_x + l.l_mse_y, 0.0);
        assert!(l.l_total < 2e-7);
    }

    #[test]
    fn total_is_the_exact_sum() {
        let raw = Tensor::from_vec(&[2, 3], vec![0.3f64, 0.2, -0.7, -1.1, 0.9, 0.4]);
        let pairs = [row(0, 1, 1.0, (0.0, 0.0), PairKind::ImagePos), row(0, 1, 0.0, (1.0, 1.0), PairKind::ImageNeg)];
        let (l, _) = pair_loss(&raw, &pairs).unwrap();
        assert_eq!(l.l_total.to_bits(), (l.l_bce + l.l_mse_x + l.l_mse_y).to_bits());
    }

    #[test]
    fn row_permutation_invariance() {
        let raw = Tensor::from_vec(&[3, 3], vec![0.3f64, 0.2, -0.7, -1.1, 0.9, 0.4, 0.5, 0.5, 0.1]);
        let pairs = [
            row(0, 1, 1.0, (0.0, 0.0), PairKind::ImagePos),
            row(0, 1, 0.0, (1.0, 1.0), PairKind::ImageNeg),
            row(0, 1, 1.0, (0.1, -0.4), PairKind::Patch),
        ];
        let perm = [2usize, 0, 1];
        let raw_p = Tensor::from_vec(&[3, 3], perm.iter().flat_map(|&i| raw.item(i).to_vec()).collect());
        let pairs_p: Vec<_> = perm.iter().map(|&i| pairs[i]).collect();
        let (a, _) = pair_loss(&raw, &pairs).unwrap();
        let (b, _) = pair_loss(&raw_p, &pairs_p).unwrap();
        assert!((a.l_total - b.l_total).abs() < 1e-15);
    }

    #[test]
    fn distance_outputs_at_targets_leave_pure_bce() {
        let raw = Tensor::from_vec(&[2, 3], vec![0.3f64, 0.0, 0.0, -0.2, 1.0, 1.0]);
        let pairs = [row(0, 1, 1.0, (0.0, 0.0), PairKind::ImagePos), row(0, 1, 0.0, (1.0, 1.0), PairKind::ImageNeg)];
        let (l, _) = pair_loss(&raw, &pairs).unwrap();
        let p0 = sigmoid(0.3);
        let p1 = sigmoid(-0.2);
        let bce = -(p0.ln() + (1.0 - p1).ln()) / 2.0;
        assert!((l.l_total - bce).abs() < 1e-15);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 5;
        let mut head = RelationHead::<f64>::new(d, &mut rng);
        let reps = Tensor::from_vec(&[6, d], (0..30).map(|_| rng.random_range(-1.0..1.0)).collect());
        let pairs: Vec<PairRow> = vec![
            row(0, 3, 1.0, (0.0, 0.0), PairKind::ImagePos),
            row(1, 4, 0.0, (1.0, 1.0), PairKind::ImageNeg),
            row(2, 5, 1.0, (-0.2, 0.5), PairKind::Patch),
            row(5, 2, 1.0, (0.2, -0.5), PairKind::Patch),
        ];
        let total = |head: &mut RelationHead<f64>, reps: &Tensor<f64>| {
            let raw = head.relate(reps, &pairs, Mode::Train);
            pair_loss(&raw, &pairs).unwrap().0.l_total
        };
        let raw = head.relate(&reps, &pairs, Mode::Train);
        let (_, g) = pair_loss(&raw, &pairs).unwrap();
        head.zero_grad();
        let d_reps = head.relate_backward(&g);

        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        let mut analytic = Vec::new();
        head.visit_params_ref(&mut |p| {
            if p.trainable {
                analytic.push(p.grad.clone())
            }
        });
        let mut idx = 0;
        let mut names = Vec::new();
        head.visit_params_ref(&mut |p| {
            if p.trainable {
                names.push(p.name.clone())
            }
        });
        for (pi, name) in names.iter().enumerate() {
            let len = analytic[pi].len();
            for j in (0..len).step_by((len / 40).max(1)) {
                let bump = |head: &mut RelationHead<f64>, delta: f64| {
                    head.visit_params(&mut |p| {
                        if &p.name == name {
                            p.value[j] += delta
                        }
                    })
                };
                bump(&mut head, h);
                let lp = total(&mut head, &reps);
                bump(&mut head, -2.0 * h);
                let lm = total(&mut head, &reps);
                bump(&mut head, h);
                let num = (lp - lm) / (2.0 * h);
                assert!(rel(analytic[pi][j], num) < 1e-4, "{name}[{j}]: {} vs {num}", analytic[pi][j]);
                idx += 1;
            }
        }
        assert!(idx > 100);
        for j in 0..reps.len() {
            let mut rp = reps.clone();
            rp.data_mut()[j] += h;
            let lp = total(&mut head, &rp);
            rp.data_mut()[j] -= 2.0 * h;
            let lm = total(&mut head, &rp);
            let num = (lp - lm) / (2.0 * h);
            assert!(rel(d_reps.data()[j], num) < 1e-4, "rep {j}: {} vs {num}", d_reps.data()[j]);
        }
    }
}
