//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header, then every tensor as little-endian `f32` in header order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, SpatialModel};
use crate::datasets::NormalizationStats;
use crate::nn::{Adam, AdamConfig, AdamState};
use crate::patching::PatchMode;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SPRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    feature_dim: usize,
    patch_mode: PatchMode,
    normalization: NormalizationStats,
    run_config_hash: String,
    epoch: u64,
    step: u64,
    adam: Option<(AdamConfig, u64)>,
    #[serde(default)]
    manifest_hash: Option<String>,
    tensors: Vec<TensorEntry>,
}

/// Model weights, optimizer state and the metadata needed to resume or evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub patch_mode: PatchMode,
    pub normalization: NormalizationStats,
    pub run_config_hash: String,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    /// Parameters and buffers keyed by name.
    pub params: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    pub adam: Option<(AdamConfig, AdamState<f32>)>,
    pub manifest_hash: Option<String>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn capture(
        model: &SpatialModel,
        adam: Option<&Adam<f32>>,
        patch_mode: PatchMode,
        normalization: NormalizationStats,
        run_config_hash: &str,
        epoch: u64,
        step: u64,
    ) -> Self {
        let mut params = BTreeMap::new();
        model.visit_params_ref(&mut |p| {
            params.insert(p.name.clone(), (p.shape.clone(), p.value.clone()));
        });
        Self {
            encoder: model.encoder.config(),
            patch_mode,
            normalization,
            run_config_hash: run_config_hash.to_string(),
            epoch,
            step,
            params,
            adam: adam.map(|a| (a.config, a.state.clone())),
            manifest_hash: None,
        }
    }

    /// Rebuilds the model and loads every stored tensor into it.
    pub fn restore_model(&self) -> Result<SpatialModel> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = SpatialModel::new(self.encoder, &mut rng)?;
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        let mut seen = 0;
        model.visit_params(&mut |p| match self.params.get(&p.name) {
            Some((shape, v)) if *shape == p.shape => {
                p.value.copy_from_slice(v);
                seen += 1;
            }
            Some((shape, _)) => mismatched.push(format!("{}: stored {shape:?}, model {:?}", p.name, p.shape)),
            None => missing.push(p.name.clone()),
        });
        if !missing.is_empty() || !mismatched.is_empty() || seen != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter set mismatch: missing {missing:?}, shape {mismatched:?}, {} stored vs {seen} matched",
                self.params.len()
            )));
        }
        Ok(model)
    }

    pub fn restore_adam(&self) -> Option<Adam<f32>> {
        self.adam.as_ref().map(|(config, state)| {
            let mut a = Adam::new(*config);
            a.state = state.clone();
            a
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blobs: Vec<&[f32]> = Vec::new();
        for (name, (shape, v)) in &self.params {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            });
            blobs.push(v);
        }
        if let Some((_, state)) = &self.adam {
            for (name, (m, v)) in &state.moments {
                for (suffix, data) in [("m", m), ("v", v)] {
                    tensors.push(TensorEntry {
                        name: format!("adam.{suffix}.{name}"),
                        shape: vec![data.len()],
                    });
                    blobs.push(data);
                }
            }
        }
        let header = Header {
            encoder: self.encoder,
            feature_dim: self.encoder.feature_dim(),
            patch_mode: self.patch_mode,
            normalization: self.normalization,
            run_config_hash: self.run_config_hash.clone(),
            epoch: self.epoch,
            step: self.step,
            adam: self.adam.as_ref().map(|(c, s)| (*c, s.step)),
            manifest_hash: self.manifest_hash.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * blobs.iter().map(|b| b.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for b in blobs {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.feature_dim != header.encoder.feature_dim() {
            return Err(Error::Checkpoint(format!(
                "header feature width {} disagrees with architecture",
                header.feature_dim
            )));
        }
        let mut cursor = 20 + hlen;
        let mut params = BTreeMap::new();
        let mut moments: BTreeMap<String, (Vec<f32>, Vec<f32>)> = BTreeMap::new();
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated tensor {}", t.name)))?;
            cursor += 4 * n;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if let Some(rest) = t.name.strip_prefix("adam.m.") {
                moments.entry(rest.to_string()).or_default().0 = data;
            } else if let Some(rest) = t.name.strip_prefix("adam.v.") {
                moments.entry(rest.to_string()).or_default().1 = data;
            } else {
                params.insert(t.name, (t.shape, data));
            }
        }
        if cursor != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cursor)));
        }
        Ok(Self {
            encoder: header.encoder,
            patch_mode: header.patch_mode,
            normalization: header.normalization,
            run_config_hash: header.run_config_hash,
            epoch: header.epoch,
            step: header.step,
            params,
            adam: header.adam.map(|(config, step)| (config, AdamState { step, moments })),
            manifest_hash: header.manifest_hash,
        })
    }

    /// Writes through a temporary file and renames it into place, so a failed
    /// write never clobbers an existing checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()
        };
        if let Err(e) = write() {
            let _ = std::fs::remove_file(&tmp);
            return Err(Error::io(&tmp, e));
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::resnet::ResNetLayout;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            architecture: ResNetLayout::Cifar {
                blocks_per_stage: 1,
                base_width: 4,
            },
            input_size: 16,
        }
    }

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = SpatialModel::new(tiny(), &mut rng).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.state.step = 3;
        adam.state
            .moments
            .insert("head.fc2.bias".into(), (vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]));
        let mut ck = Checkpoint::capture(&model, Some(&adam), PatchMode::Additive, NormalizationStats::IDENTITY, "abc", 2, 40);
        ck.manifest_hash = Some("feed".into());
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let model = back.restore_model().unwrap();
        assert_eq!(Checkpoint::capture(&model, None, ck.patch_mode, ck.normalization, "abc", 2, 40).params, ck.params);
        assert_eq!(back.restore_adam().unwrap().state.step, 3);
    }

    #[test]
    fn version_mismatch_is_a_hard_error() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn truncation_and_magic_are_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage-bytes-here-xx").is_err());
    }

    #[test]
    fn save_is_atomic_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt-000001.bin");
        let ck = sample();
        ck.save(&path).unwrap();
        assert!(!path.with_extension("tmp").exists());
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        // Saving into a missing directory fails without touching anything else.
        assert!(ck.save(&dir.path().join("nope/ck.bin")).is_err());
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut ck = sample();
        ck.params.get_mut("head.fc2.bias").unwrap().0 = vec![4];
        ck.params.get_mut("head.fc2.bias").unwrap().1.push(0.0);
        assert!(matches!(ck.restore_model(), Err(Error::Checkpoint(_))));
    }
}
