//! Benchmark dataset ingestion, splits and evaluation tasks.
//!
//! Readers understand the canonical published binary layouts:
//!
//! | dataset        | directory under the root | files |
//! |----------------|--------------------------|-------|
//! | CIFAR-10       | `cifar-10-batches-bin/`  | `data_batch_{1..5}.bin`, `test_batch.bin` |
//! | CIFAR-100(-20) | `cifar-100-binary/`      | `train.bin`, `test.bin` |
//! | STL-10         | `stl10_binary/`          | `{train,test}_{X,y}.bin`, `unlabeled_X.bin` |
//! | tiny-ImageNet  | `tiny-imagenet-200/`     | `wnids.txt`, `train/*/images/*.JPEG`, `val/` |

mod coarse;
mod formats;
pub mod loader;
mod manifest;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::Image;
use crate::{Error, Result};

pub use coarse::{coarse_label_map, COARSE_CLASSES};
pub use manifest::{IngestOptions, IngestionManifest, NormalizationStats};

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "SPATIAL_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    Cifar10,
    Cifar100,
    #[serde(rename = "cifar100-20")]
    Cifar100_20,
    TinyImagenet,
    Stl10,
}

impl DatasetId {
    pub const ALL: [DatasetId; 5] = [
        DatasetId::Cifar10,
        DatasetId::Cifar100,
        DatasetId::Cifar100_20,
        DatasetId::TinyImagenet,
        DatasetId::Stl10,
    ];

    pub fn num_classes(self) -> usize {
        match self {
            DatasetId::Cifar10 | DatasetId::Stl10 => 10,
            DatasetId::Cifar100 => 100,
            DatasetId::Cifar100_20 => COARSE_CLASSES,
            DatasetId::TinyImagenet => 200,
        }
    }

    /// Square image side in pixels.
    pub fn image_side(self) -> usize {
        match self {
            DatasetId::Cifar10 | DatasetId::Cifar100 | DatasetId::Cifar100_20 => 32,
            DatasetId::TinyImagenet => 64,
            DatasetId::Stl10 => 96,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Cifar100 => "cifar100",
            DatasetId::Cifar100_20 => "cifar100-20",
            DatasetId::TinyImagenet => "tiny-imagenet",
            DatasetId::Stl10 => "stl10",
        }
    }

    /// Split used for self-supervised pretraining.
    pub fn pretrain_part(self) -> SplitPart {
        match self {
            DatasetId::Stl10 => SplitPart::Unlabeled,
            _ => SplitPart::Train,
        }
    }

    /// Split used as the probe test set. tiny-ImageNet test labels are not
    /// public, so its validation split stands in.
    pub fn probe_test_part(self) -> SplitPart {
        match self {
            DatasetId::TinyImagenet => SplitPart::Validation,
            _ => SplitPart::Test,
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetId::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown dataset '{s}'")))
    }
}

/// A published split of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Test,
    Validation,
    Unlabeled,
}

impl SplitPart {
    pub fn name(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Test => "test",
            SplitPart::Validation => "validation",
            SplitPart::Unlabeled => "unlabeled",
        }
    }
}

impl FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SplitPart::Train, SplitPart::Test, SplitPart::Validation, SplitPart::Unlabeled]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split '{s}'")))
    }
}

/// One labeled (or unlabeled) square RGB image, stored as interleaved 8-bit
/// samples; [`ImageRecord::to_image`] yields intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    side: usize,
    pixels: Vec<u8>,
    label: Option<u16>,
    dataset: DatasetId,
}

impl ImageRecord {
    pub fn new(dataset: DatasetId, pixels_hwc: Vec<u8>, label: Option<u16>) -> Result<Self> {
        let side = dataset.image_side();
        if pixels_hwc.len() != side * side * 3 {
            return Err(Error::Contract(format!(
                "{dataset} records must be {side}x{side}x3, got {} bytes",
                pixels_hwc.len()
            )));
        }
        if let Some(l) = label {
            if usize::from(l) >= dataset.num_classes() {
                return Err(Error::Contract(format!(
                    "label {l} out of range for {dataset} ({} classes)",
                    dataset.num_classes()
                )));
            }
        }
        Ok(Self {
            side,
            pixels: pixels_hwc,
            label,
            dataset,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn label(&self) -> Option<u16> {
        self.label
    }

    pub fn dataset(&self) -> DatasetId {
        self.dataset
    }

    pub fn pixels_hwc(&self) -> &[u8] {
        &self.pixels
    }

    pub fn to_image(&self) -> Image {
        Image::from_hwc_u8(self.side, self.side, &self.pixels)
    }
}

/// Random-access collection of records from one split.
pub trait ImageSource: Send + Sync {
    fn dataset(&self) -> DatasetId;
    fn len(&self) -> usize;
    fn record(&self, index: usize) -> Result<ImageRecord>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fully materialized split.
#[derive(Debug, Clone)]
pub struct MemorySource {
    dataset: DatasetId,
    records: Vec<ImageRecord>,
}

impl MemorySource {
    pub fn new(dataset: DatasetId, records: Vec<ImageRecord>) -> Result<Self> {
        if let Some(bad) = records.iter().find(|r| r.dataset != dataset) {
            return Err(Error::Contract(format!(
                "record from {} in a {dataset} source",
                bad.dataset
            )));
        }
        Ok(Self { dataset, records })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }
}

impl ImageSource for MemorySource {
    fn dataset(&self) -> DatasetId {
        self.dataset
    }

    fn len(&self) -> usize {
        self.records.len()
    }

    fn record(&self, index: usize) -> Result<ImageRecord> {
        self.records
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("record {index} out of range ({})", self.records.len())))
    }
}

/// All splits of one dataset plus the ingestion manifest.
#[derive(Clone)]
pub struct LoadedDataset {
    pub id: DatasetId,
    pub splits: BTreeMap<SplitPart, Arc<dyn ImageSource>>,
    pub manifest: IngestionManifest,
}

impl fmt::Debug for LoadedDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sizes: BTreeMap<_, _> = self.splits.iter().map(|(k, v)| (*k, v.len())).collect();
        f.debug_struct("LoadedDataset")
            .field("id", &self.id)
            .field("splits", &sizes)
            .finish()
    }
}

impl LoadedDataset {
    pub fn split(&self, part: SplitPart) -> Result<Arc<dyn ImageSource>> {
        self.splits
            .get(&part)
            .cloned()
            .ok_or_else(|| Error::Config(format!("{} has no {} split", self.id, part.name())))
    }
}

/// Loads every split of `dataset` from `root`, verifying checksums and
/// computing per-channel normalization statistics on the pretraining split.
pub fn load_dataset(dataset: DatasetId, root: &Path, options: &IngestOptions) -> Result<LoadedDataset> {
    formats::load(dataset, root, options)
}

/// Role a split plays in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Pretrain,
    ProbeTrain,
    ProbeTest,
}

/// Explicit index list into one split, with the seed that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub role: SplitRole,
    pub part: SplitPart,
    pub indices: Vec<usize>,
    pub seed: u64,
}

impl SplitSpec {
    /// Every index of a split of length `len`, in order.
    pub fn full(role: SplitRole, part: SplitPart, len: usize) -> Self {
        Self {
            role,
            part,
            indices: (0..len).collect(),
            seed: 0,
        }
    }

    /// The first `limit` indices of a seeded permutation of `0..len`
    /// (all of them when `limit` is `None`), in ascending order.
    pub fn subset(role: SplitRole, part: SplitPart, len: usize, limit: Option<usize>, seed: u64) -> Self {
        let mut indices: Vec<usize> = (0..len).collect();
        if let Some(limit) = limit.filter(|&l| l < len) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            indices.shuffle(&mut rng);
            indices.truncate(limit);
            indices.sort_unstable();
        }
        Self {
            role,
            part,
            indices,
            seed,
        }
    }

    /// Seeded disjoint holdout of one split into probe-train and probe-test lists.
    pub fn holdout(part: SplitPart, len: usize, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test fraction {test_fraction} not in [0, 1)")));
        }
        let mut indices: Vec<usize> = (0..len).collect();
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (len as f64 * test_fraction).round() as usize;
        let mut test = indices.split_off(len - n_test);
        indices.sort_unstable();
        test.sort_unstable();
        Ok((
            Self {
                role: SplitRole::ProbeTrain,
                part,
                indices,
                seed,
            },
            Self {
                role: SplitRole::ProbeTest,
                part,
                indices: test,
                seed,
            },
        ))
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Seeded per-epoch visiting order.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order = self.indices.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        order
    }
}

/// Which dataset splits feed pretraining and the linear probe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTaskSpec {
    pub name: String,
    pub pretrain: (DatasetId, SplitPart),
    pub probe_train: (DatasetId, SplitPart),
    pub probe_test: (DatasetId, SplitPart),
}

impl EvalTaskSpec {
    pub fn same_domain(dataset: DatasetId) -> Self {
        Self {
            name: dataset.name().to_string(),
            pretrain: (dataset, dataset.pretrain_part()),
            probe_train: (dataset, SplitPart::Train),
            probe_test: (dataset, dataset.probe_test_part()),
        }
    }

    /// Named tasks: `cifar10`, `cifar100`, `cifar100-20`, `tiny-imagenet`,
    /// `stl10`, `cifar10-to-cifar100`, `cifar100-to-cifar10`.
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "cifar10-to-cifar100" | "10->100" => cross_domain_task(DatasetId::Cifar10, DatasetId::Cifar100),
            "cifar100-to-cifar10" | "100->10" => cross_domain_task(DatasetId::Cifar100, DatasetId::Cifar10),
            other => Ok(Self::same_domain(other.parse()?)),
        }
    }

    pub fn datasets(&self) -> Vec<DatasetId> {
        let mut ids = vec![self.pretrain.0, self.probe_train.0, self.probe_test.0];
        ids.dedup();
        ids
    }
}

/// Pretrain on `train_ds`, probe on `test_ds`. Both must share image geometry.
pub fn cross_domain_task(train_ds: DatasetId, test_ds: DatasetId) -> Result<EvalTaskSpec> {
    if train_ds.image_side() != test_ds.image_side() {
        return Err(Error::Config(format!(
            "cross-domain task needs equal geometry: {train_ds} is {0}x{0}, {test_ds} is {1}x{1}",
            train_ds.image_side(),
            test_ds.image_side()
        )));
    }
    let name = if train_ds == test_ds {
        train_ds.name().to_string()
    } else {
        format!("{train_ds}-to-{test_ds}")
    };
    Ok(EvalTaskSpec {
        name,
        pretrain: (train_ds, train_ds.pretrain_part()),
        probe_train: (test_ds, SplitPart::Train),
        probe_test: (test_ds, test_ds.probe_test_part()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_geometry_and_classes() {
        let expect = [(DatasetId::Cifar10, 32, 10), (DatasetId::Cifar100, 32, 100), (DatasetId::Cifar100_20, 32, 20), (DatasetId::TinyImagenet, 64, 200), (DatasetId::Stl10, 96, 10)];
        for (id, side, classes) in expect {
            assert_eq!(id.image_side(), side);
            assert_eq!(id.num_classes(), classes);
            assert_eq!(id.name().parse::<DatasetId>().unwrap(), id);
        }
    }

    #[test]
    fn record_invariants_enforced() {
        assert!(ImageRecord::new(DatasetId::Cifar10, vec![0; 32 * 32 * 3], Some(9)).is_ok());
        assert!(ImageRecord::new(DatasetId::Cifar10, vec![0; 32 * 32 * 3], Some(10)).is_err());
        assert!(ImageRecord::new(DatasetId::Stl10, vec![0; 32 * 32 * 3], None).is_err());
        let r = ImageRecord::new(DatasetId::Cifar10, vec![255; 32 * 32 * 3], None).unwrap();
        assert!(r.to_image().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cross_domain_tasks() {
        let t = cross_domain_task(DatasetId::Cifar10, DatasetId::Cifar100).unwrap();
        assert_eq!(t.pretrain, (DatasetId::Cifar10, SplitPart::Train));
        assert_eq!(t.probe_train, (DatasetId::Cifar100, SplitPart::Train));
        assert_eq!(t.probe_test, (DatasetId::Cifar100, SplitPart::Test));
        assert_eq!(t.name, "cifar10-to-cifar100");
        let back = cross_domain_task(DatasetId::Cifar100, DatasetId::Cifar10).unwrap();
        assert_eq!(back.probe_test.0, DatasetId::Cifar10);
        let same = cross_domain_task(DatasetId::Cifar10, DatasetId::Cifar10).unwrap();
        assert_eq!(same, EvalTaskSpec::same_domain(DatasetId::Cifar10));
        assert!(matches!(cross_domain_task(DatasetId::Cifar10, DatasetId::Stl10), Err(Error::Config(_))));
    }

    #[test]
    fn named_tasks_resolve() {
        assert_eq!(EvalTaskSpec::named("10->100").unwrap().name, "cifar10-to-cifar100");
        let tiny = EvalTaskSpec::named("tiny-imagenet").unwrap();
        assert_eq!(tiny.probe_test.1, SplitPart::Validation);
        let stl = EvalTaskSpec::named("stl10").unwrap();
        assert_eq!(stl.pretrain.1, SplitPart::Unlabeled);
        assert!(EvalTaskSpec::named("imagenet").is_err());
    }

    #[test]
    fn split_orders_are_deterministic() {
        let s = SplitSpec::subset(SplitRole::Pretrain, SplitPart::Train, 100, Some(40), 3);
        assert_eq!(s.len(), 40);
        assert_eq!(s, SplitSpec::subset(SplitRole::Pretrain, SplitPart::Train, 100, Some(40), 3));
        assert_eq!(s.epoch_order(1, 2), s.epoch_order(1, 2));
        assert_ne!(s.epoch_order(1, 2), s.epoch_order(1, 3));
    }

    #[test]
    fn holdout_is_disjoint_and_complete() {
        let (tr, te) = SplitSpec::holdout(SplitPart::Train, 1000, 0.2, 11).unwrap();
        assert_eq!(te.len(), 200);
        assert_eq!(tr.len(), 800);
        let mut all: Vec<_> = tr.indices.iter().chain(&te.indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }
}
