//! Linear evaluation on frozen representations.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{load_dataset, EvalTaskSpec, ImageSource, IngestOptions, SplitPart, SplitRole, SplitSpec};
use crate::imaging::Image;
use crate::model::Checkpoint;
use crate::nn::{Adam, AdamConfig, Layer, Linear, Mode, Tensor};
use crate::patching::{default_patch_size, AffineConfig};
use crate::representation::Representer;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Grid patches appended to the full-image representation.
    pub n_patches: usize,
    /// Grid patch side; defaults to the pretraining patch size for the geometry.
    pub patch_size_px: Option<usize>,
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Re-extract probe-train features from affine-transformed images every epoch.
    pub affine_augment: bool,
    pub affine: AffineConfig,
    pub seed: u64,
    /// Seeded subsets of the probe splits.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_patches: 9,
            patch_size_px: None,
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            affine_augment: false,
            affine: AffineConfig::default(),
            seed: 0,
            train_limit: None,
            test_limit: None,
        }
    }
}

impl ProbeConfig {
    pub fn patch_size(&self, image_side: usize) -> usize {
        self.patch_size_px.unwrap_or_else(|| default_patch_size(image_side))
    }
}

/// Softmax classifier over standardized features.
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    pub layer: Linear<f32>,
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

impl LinearClassifier {
    fn standardized(&self, rows: &[&[f32]]) -> Tensor<f32> {
        let f = self.mean.len();
        let mut data = Vec::with_capacity(rows.len() * f);
        for r in rows {
            data.extend(r.iter().zip(&self.mean).zip(&self.inv_std).map(|((x, m), s)| (x - m) * s));
        }
        Tensor::from_vec(&[rows.len(), f], data)
    }

    pub fn logits(&mut self, rows: &[&[f32]]) -> Tensor<f32> {
        let x = self.standardized(rows);
        self.layer.forward(&x, Mode::Eval)
    }

    pub fn predict(&mut self, features: &[Vec<f32>]) -> Vec<usize> {
        let mut out = Vec::with_capacity(features.len());
        for chunk in features.chunks(256) {
            let rows: Vec<&[f32]> = chunk.iter().map(Vec::as_slice).collect();
            let logits = self.logits(&rows);
            out.extend((0..chunk.len()).map(|i| argmax(logits.item(i))));
        }
        out
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Percentage of matching predictions; 0 for an empty set.
pub fn accuracy(predictions: &[usize], labels: &[u16]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| **p == **l as usize).count();
    100.0 * hits as f64 / labels.len() as f64
}

fn column_stats(features: &[Vec<f32>]) -> (Vec<f32>, Vec<f32>) {
    let f = features.first().map_or(0, Vec::len);
    let n = features.len().max(1) as f64;
    let mut mean = vec![0f64; f];
    let mut sq = vec![0f64; f];
    for r in features {
        for (j, &x) in r.iter().enumerate() {
            mean[j] += x as f64;
            sq[j] += (x as f64) * (x as f64);
        }
    }
    let mut inv = vec![0f32; f];
    for j in 0..f {
        mean[j] /= n;
        let var = (sq[j] / n - mean[j] * mean[j]).max(0.0);
        inv[j] = if var > 1e-12 { (1.0 / var.sqrt()) as f32 } else { 1.0 };
    }
    (mean.into_iter().map(|m| m as f32).collect(), inv)
}

/// Fits the probe with softmax cross-entropy and Adam. `epoch_features`, when
/// given, supplies fresh probe-train features for every epoch after the first.
pub fn fit_linear(
    features: &[Vec<f32>],
    labels: &[u16],
    num_classes: usize,
    config: &ProbeConfig,
    mut epoch_features: Option<&mut dyn FnMut(u64) -> Result<Vec<Vec<f32>>>>,
) -> Result<LinearClassifier> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Contract(format!("{} feature rows for {} labels", features.len(), labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::Contract(format!("label {l} outside {num_classes} classes")));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("probe batch_size must be positive".into()));
    }
    let width = features[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mean, inv_std) = column_stats(features);
    let mut clf = LinearClassifier {
        layer: Linear::new("probe", width, num_classes, &mut rng),
        mean,
        inv_std,
    };
    let mut adam = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut fresh: Vec<Vec<f32>>;
    for epoch in 0..config.epochs {
        let rows: &[Vec<f32>] = match epoch_features.as_mut() {
            Some(f) if epoch > 0 => {
                fresh = f(epoch)?;
                &fresh
            }
            _ => features,
        };
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let refs: Vec<&[f32]> = batch.iter().map(|&i| rows[i].as_slice()).collect();
            let x = clf.standardized(&refs);
            let logits = clf.layer.forward(&x, Mode::Train);
            let mut grad = Tensor::zeros(&[batch.len(), num_classes]);
            for (r, &i) in batch.iter().enumerate() {
                let z = logits.item(r);
                let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let exp: Vec<f32> = z.iter().map(|v| (v - max).exp()).collect();
                let sum: f32 = exp.iter().sum();
                let g = grad.item_mut(r);
                for c in 0..num_classes {
                    g[c] = (exp[c] / sum - if c == labels[i] as usize { 1.0 } else { 0.0 }) / batch.len() as f32;
                }
            }
            if !grad.all_finite() {
                return Err(Error::NonFinite {
                    stage: "probe".into(),
                    step: adam.state.step,
                    diagnostics: format!("epoch {epoch}"),
                });
            }
            clf.layer.zero_grad();
            clf.layer.backward(&grad);
            adam.begin_step();
            clf.layer.visit_params(&mut |p| adam.apply(p));
        }
    }
    Ok(clf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub feature_width: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub backbone_hash: String,
}

/// Images and labels of `spec` from `source`.
pub fn labelled_images(source: &dyn ImageSource, spec: &SplitSpec) -> Result<(Vec<Image>, Vec<u16>)> {
    let mut images = Vec::with_capacity(spec.len());
    let mut labels = Vec::with_capacity(spec.len());
    for &i in &spec.indices {
        let r = source.record(i)?;
        let label = r
            .label()
            .ok_or_else(|| Error::Contract(format!("{} record {i} has no label", r.dataset())))?;
        images.push(r.to_image());
        labels.push(label);
    }
    Ok((images, labels))
}

/// Trains a linear probe on frozen features of `train`, scores it on `test`.
/// The backbone is only ever run in inference mode; its parameter hash is
/// checked before and after.
pub fn linear_probe_on(
    checkpoint: &Checkpoint,
    train: &dyn ImageSource,
    test: &dyn ImageSource,
    config: &ProbeConfig,
) -> Result<ProbeOutcome> {
    let side = checkpoint.encoder.input_size;
    for src in [train, test] {
        if src.dataset().image_side() != side {
            return Err(Error::Config(format!(
                "checkpoint expects {side}x{side} inputs, {} images are {1}x{1}",
                src.dataset(),
                src.dataset().image_side()
            )));
        }
    }
    let num_classes = test.dataset().num_classes().max(train.dataset().num_classes());
    let train_spec = SplitSpec::subset(SplitRole::ProbeTrain, SplitPart::Train, train.len(), config.train_limit, config.seed);
    let test_spec = SplitSpec::subset(SplitRole::ProbeTest, SplitPart::Test, test.len(), config.test_limit, config.seed);
    let (train_images, train_labels) = labelled_images(train, &train_spec)?;
    let (test_images, test_labels) = labelled_images(test, &test_spec)?;

    let mut rep = Representer::from_checkpoint(checkpoint)?;
    let before = rep.encoder.parameter_hash();
    let s = config.patch_size(side);
    let train_features = rep.features(&train_images, s, config.n_patches, config.seed)?;
    let test_features = rep.features(&test_images, s, config.n_patches, config.seed)?;

    let mut clf = if config.affine_augment {
        let mut rep2 = rep.clone();
        let mut augmented = |epoch: u64| -> Result<Vec<Vec<f32>>> {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ epoch.wrapping_mul(0xA076_1D64_78BD_642F));
            let moved: Vec<Image> = train_images.iter().map(|im| config.affine.apply(im, &mut rng)).collect();
            rep2.features(&moved, s, config.n_patches, config.seed)
        };
        fit_linear(&train_features, &train_labels, num_classes, config, Some(&mut augmented))?
    } else {
        fit_linear(&train_features, &train_labels, num_classes, config, None)?
    };
    let train_accuracy = accuracy(&clf.predict(&train_features), &train_labels);
    let test_accuracy = accuracy(&clf.predict(&test_features), &test_labels);

    let after = rep.encoder.parameter_hash();
    if before != after {
        return Err(Error::Contract("backbone parameters changed during linear evaluation".into()));
    }
    Ok(ProbeOutcome {
        train_accuracy,
        test_accuracy,
        feature_width: train_features[0].len(),
        train_size: train_labels.len(),
        test_size: test_labels.len(),
        backbone_hash: after,
    })
}

/// Loads the probe splits of `task` from `data_root` and runs [`linear_probe_on`].
pub fn linear_probe(checkpoint: &Checkpoint, task: &EvalTaskSpec, data_root: &Path, config: &ProbeConfig) -> Result<ProbeOutcome> {
    let (train_ds, train_part) = task.probe_train;
    let (test_ds, test_part) = task.probe_test;
    let train_data = load_dataset(train_ds, data_root, &IngestOptions::default())?;
    let test_data = if test_ds == train_ds {
        train_data.clone()
    } else {
        load_dataset(test_ds, data_root, &IngestOptions::default())?
    };
    linear_probe_on(
        checkpoint,
        train_data.split(train_part)?.as_ref(),
        test_data.split(test_part)?.as_ref(),
        config,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_seed: Vec<SeedResult>,
    pub test_mean: f64,
    pub test_std: f64,
    pub train_mean: f64,
    pub train_std: f64,
    /// Set when any seed failed; `failures` holds the messages.
    pub incomplete: bool,
    pub failures: Vec<(u64, String)>,
}

impl EvalResult {
    pub fn from_seeds(per_seed: Vec<SeedResult>, failures: Vec<(u64, String)>) -> Self {
        let test: Vec<f64> = per_seed.iter().map(|s| s.test_accuracy).collect();
        let train: Vec<f64> = per_seed.iter().map(|s| s.train_accuracy).collect();
        let (test_mean, test_std) = mean_std(&test);
        let (train_mean, train_std) = mean_std(&train);
        Self {
            per_seed,
            test_mean,
            test_std,
            train_mean,
            train_std,
            incomplete: !failures.is_empty(),
            failures,
        }
    }

    pub const CSV_HEADER: &'static str = "seeds,test_mean,test_std,train_mean,train_std,incomplete";

    pub fn csv_row(&self) -> String {
        let seeds: Vec<String> = self.per_seed.iter().map(|s| s.seed.to_string()).collect();
        format!(
            "{},{:.4},{:.4},{:.4},{:.4},{}",
            seeds.join(";"),
            self.test_mean,
            self.test_std,
            self.train_mean,
            self.train_std,
            self.incomplete
        )
    }
}

/// Mean and sample (n - 1) standard deviation. A single value has spread 0;
/// no values give NaN.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Runs `run` once per seed, keeping going past failures.
pub fn seed_sweep(seeds: &[u64], mut run: impl FnMut(u64) -> Result<ProbeOutcome>) -> Result<EvalResult> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!("a seed sweep needs at least 2 seeds, got {}", seeds.len())));
    }
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for &seed in seeds {
        match run(seed) {
            Ok(o) => ok.push(SeedResult {
                seed,
                test_accuracy: o.test_accuracy,
                train_accuracy: o.train_accuracy,
            }),
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                failures.push((seed, e.to_string()));
            }
        }
    }
    Ok(EvalResult::from_seeds(ok, failures))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{DatasetId, MemorySource, NormalizationStats};
    use crate::model::{EncoderConfig, SpatialModel};
    use crate::nn::resnet::ResNetLayout;
    use crate::patching::PatchMode;

    fn checkpoint(mode: PatchMode) -> Checkpoint {
        let cfg = EncoderConfig {
            architecture: ResNetLayout::Cifar {
                blocks_per_stage: 1,
                base_width: 4,
            },
            input_size: 32,
        };
        let model = SpatialModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        Checkpoint::capture(&model, None, mode, NormalizationStats::IDENTITY, "test", 0, 0)
    }

    fn source(ds: DatasetId, n: usize, seed: u64) -> MemorySource {
        MemorySource::new(ds, crate::datasets::synthetic::records(ds, n, seed).unwrap()).unwrap()
    }

    #[test]
    fn mean_std_matches_reference_rows() {
        let (m, _) = mean_std(&[33.04, 33.16, 33.03]);
        assert!((m - 33.08).abs() < 0.005);
        let (m, _) = mean_std(&[50.32, 49.64, 50.59]);
        assert!((m - 50.18).abs() < 0.005);
        assert_eq!(mean_std(&[7.0, 7.0, 7.0]), (7.0, 0.0));
        let (_, s) = mean_std(&[1.0, 3.0]);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn accuracy_is_an_argmax_match_count() {
        let logits = [[0.1f32, 0.9, 0.0], [2.0, 1.0, 2.0], [0.0, 0.0, 5.0]];
        let preds: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
        assert_eq!(preds, vec![1, 0, 2]);
        assert!((accuracy(&preds, &[1, 2, 2]) - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(accuracy(&[], &[]), 0.0);
    }

    #[test]
    fn sweep_requires_two_seeds_and_flags_failures() {
        let out = |seed: u64| ProbeOutcome {
            train_accuracy: 50.0,
            test_accuracy: 40.0 + seed as f64,
            feature_width: 1,
            train_size: 1,
            test_size: 1,
            backbone_hash: String::new(),
        };
        assert!(seed_sweep(&[1], |s| Ok(out(s))).is_err());
        let r = seed_sweep(&[0, 2], |s| Ok(out(s))).unwrap();
        assert_eq!((r.test_mean, r.incomplete), (41.0, false));
        let r = seed_sweep(&[0, 1, 2], |s| if s == 1 { Err(Error::Config("boom".into())) } else { Ok(out(s)) }).unwrap();
        assert!(r.incomplete);
        assert_eq!(r.per_seed.len(), 2);
        assert_eq!(r.failures[0].0, 1);
    }

    #[test]
    fn memorizes_ten_distinct_images() {
        let src = source(DatasetId::Cifar10, 10, 4);
        let labelled: Vec<_> = src
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| crate::datasets::ImageRecord::new(DatasetId::Cifar10, r.pixels_hwc().to_vec(), Some(i as u16)).unwrap())
            .collect();
        let src = MemorySource::new(DatasetId::Cifar10, labelled).unwrap();
        let cfg = ProbeConfig {
            n_patches: 9,
            ..ProbeConfig::default()
        };
        let out = linear_probe_on(&checkpoint(PatchMode::Rescaled), &src, &src, &cfg).unwrap();
        assert_eq!(out.train_accuracy, 100.0);
        assert_eq!(out.feature_width, 10 * 16);
    }

    #[test]
    fn width_grows_with_patch_count_and_backbone_is_untouched() {
        let ck = checkpoint(PatchMode::Rescaled);
        let train = source(DatasetId::Cifar10, 24, 1);
        let test = source(DatasetId::Cifar10, 12, 2);
        let hash = ck.restore_model().unwrap().encoder.parameter_hash();
        for n in crate::representation::SUPPORTED_PATCH_COUNTS {
            let cfg = ProbeConfig {
                n_patches: n,
                epochs: 2,
                ..ProbeConfig::default()
            };
            let out = linear_probe_on(&ck, &train, &test, &cfg).unwrap();
            assert_eq!(out.feature_width, (1 + n) * 16);
            assert_eq!(out.backbone_hash, hash);
            assert!((0.0..=100.0).contains(&out.test_accuracy));
        }
    }

    #[test]
    fn affine_probe_runs_and_is_deterministic() {
        let ck = checkpoint(PatchMode::Rescaled);
        let train = source(DatasetId::Cifar10, 16, 1);
        let test = source(DatasetId::Cifar10, 8, 2);
        let cfg = ProbeConfig {
            n_patches: 1,
            epochs: 3,
            affine_augment: true,
            ..ProbeConfig::default()
        };
        let a = linear_probe_on(&ck, &train, &test, &cfg).unwrap();
        let b = linear_probe_on(&ck, &train, &test, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cross_domain_and_geometry_checks() {
        let ck = checkpoint(PatchMode::Rescaled);
        let c100 = source(DatasetId::Cifar100, 20, 1);
        let cfg = ProbeConfig {
            n_patches: 0,
            epochs: 1,
            ..ProbeConfig::default()
        };
        linear_probe_on(&ck, &c100, &c100, &cfg).unwrap();
        let tiny = source(DatasetId::TinyImagenet, 4, 1);
        assert!(matches!(linear_probe_on(&ck, &tiny, &tiny, &cfg), Err(Error::Config(_))));
        let additive = checkpoint(PatchMode::Additive);
        assert!(matches!(
            linear_probe_on(&additive, &c100, &c100, &ProbeConfig { epochs: 1, ..ProbeConfig::default() }),
            Err(Error::Config(_))
        ));
    }
}
