use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetId, ImageSource};
use crate::{Error, Result};

/// Knobs for dataset ingestion.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestOptions {
    /// Expected SHA-256 (hex) per file, keyed by path relative to the dataset directory.
    #[serde(default)]
    pub expected_checksums: BTreeMap<String, String>,
    /// Downgrade checksum mismatches to warnings recorded in the manifest.
    #[serde(default)]
    pub continue_on_checksum_mismatch: bool,
}

/// Per-channel mean and standard deviation of `[0, 1]` intensities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl NormalizationStats {
    pub const IDENTITY: NormalizationStats = NormalizationStats {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    /// Exact two-pass statistics over every pixel of `source`.
    pub fn compute(source: &dyn ImageSource) -> Result<Self> {
        let mut sum = [0f64; 3];
        let mut count = 0f64;
        for i in 0..source.len() {
            let rec = source.record(i)?;
            for px in rec.pixels_hwc().chunks_exact(3) {
                for c in 0..3 {
                    sum[c] += f64::from(px[c]) / 255.0;
                }
            }
            count += (rec.side() * rec.side()) as f64;
        }
        if count == 0.0 {
            return Ok(Self::IDENTITY);
        }
        let mean = sum.map(|s| s / count);
        let mut sq = [0f64; 3];
        for i in 0..source.len() {
            let rec = source.record(i)?;
            for px in rec.pixels_hwc().chunks_exact(3) {
                for c in 0..3 {
                    sq[c] += (f64::from(px[c]) / 255.0 - mean[c]).powi(2);
                }
            }
        }
        let std = sq.map(|s| (s / count).sqrt().max(1e-6));
        Ok(Self {
            mean: mean.map(|m| m as f32),
            std: std.map(|s| s as f32),
        })
    }
}

/// JSON-serializable record of what was ingested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestionManifest {
    pub dataset: DatasetId,
    pub root: String,
    pub split_counts: BTreeMap<String, usize>,
    pub checksums: BTreeMap<String, String>,
    pub checksum_warnings: Vec<String>,
    /// Computed on the pretraining split.
    pub normalization: NormalizationStats,
    pub notes: Vec<String>,
}

impl IngestionManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Compares `found` against the expected checksum for `key`, if any.
/// Returns a warning string when mismatches are tolerated.
pub(crate) fn verify_checksum(
    options: &IngestOptions,
    path: &Path,
    key: &str,
    found: &str,
) -> Result<Option<String>> {
    match options.expected_checksums.get(key) {
        Some(expected) if !expected.eq_ignore_ascii_case(found) => {
            if options.continue_on_checksum_mismatch {
                let msg = format!("checksum mismatch for {key}: expected {expected}, found {found}");
                log::warn!("{msg}");
                Ok(Some(msg))
            } else {
                Err(Error::Checksum {
                    path: path.to_path_buf(),
                    expected: expected.clone(),
                    found: found.to_string(),
                })
            }
        }
        _ => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{ImageRecord, MemorySource};

    #[test]
    fn stats_of_two_constant_images() {
        let a = ImageRecord::new(DatasetId::Cifar10, vec![0; 32 * 32 * 3], None).unwrap();
        let b = ImageRecord::new(DatasetId::Cifar10, vec![255; 32 * 32 * 3], None).unwrap();
        let src = MemorySource::new(DatasetId::Cifar10, vec![a, b]).unwrap();
        let stats = NormalizationStats::compute(&src).unwrap();
        for c in 0..3 {
            assert!((stats.mean[c] - 0.5).abs() < 1e-6);
            assert!((stats.std[c] - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn checksum_policy() {
        let mut opts = IngestOptions::default();
        opts.expected_checksums.insert("a.bin".into(), "00".into());
        let p = Path::new("a.bin");
        assert!(matches!(verify_checksum(&opts, p, "a.bin", "ff"), Err(Error::Checksum { .. })));
        opts.continue_on_checksum_mismatch = true;
        assert!(verify_checksum(&opts, p, "a.bin", "ff").unwrap().is_some());
        assert!(verify_checksum(&opts, p, "a.bin", "00").unwrap().is_none());
        assert!(verify_checksum(&opts, p, "other.bin", "ff").unwrap().is_none());
    }
}
