//! Batch assembly and the pretraining loop.

mod config;

pub use config::{Architecture, Optimizer, RunConfig, Schedule};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, total_pair_count, BatchLayout, PairKind};
use crate::datasets::loader::{batch_seed, OrderedParallelMap};
use crate::datasets::{load_dataset, ImageRecord, ImageSource, IngestOptions, NormalizationStats, SplitRole, SplitSpec};
use crate::imaging::Image;
use crate::model::{pair_loss, Checkpoint, LossBreakdown, SpatialModel};
use crate::nn::{Adam, Mode, Tensor};
use crate::patching::{
    extract_patch_view, full_image_augment, sample_patch_positions, AugmentConfig, ImageGeometry, PatchMode,
    PatchView,
};
use crate::{Error, Result};

/// Encoder inputs for one step: `K*M` augmented views (augmentation-major)
/// followed by `M*N` patch views grouped by image.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub images: Vec<Image>,
    pub patches: Vec<PatchView>,
    pub layout: BatchLayout,
    /// Whether the patch sampler ran at all for this batch.
    pub patch_sampler_used: bool,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.images.len() + self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Normalized `[P, 3, S, S]` encoder input.
    pub fn to_tensor(&self, stats: &NormalizationStats) -> Tensor<f32> {
        let (h, w) = self.images.first().map_or((0, 0), |i| (i.height(), i.width()));
        let mut data = Vec::with_capacity(self.len() * 3 * h * w);
        for img in &self.images {
            data.extend(img.normalized(stats.mean, stats.std));
        }
        for p in &self.patches {
            data.extend(p.encoder_input(stats));
        }
        Tensor::from_vec(&[self.len(), 3, h, w], data)
    }
}

/// Per-batch knobs taken from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct BatchSettings {
    pub k: usize,
    pub n: usize,
    pub patch_size: usize,
    pub patch_mode: PatchMode,
    pub augment: AugmentConfig,
    pub rejection_max_attempts: usize,
}

impl BatchSettings {
    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            k: c.k,
            n: c.n,
            patch_size: c.patch_size(),
            patch_mode: c.patch_mode,
            augment: c.augment_config(),
            rejection_max_attempts: c.rejection_max_attempts,
        }
    }
}

/// Builds the `K*M + M*N` views of one mini-batch.
pub fn build_training_batch(images: &[ImageRecord], settings: &BatchSettings, rng: &mut impl Rng) -> Result<ViewBatch> {
    let m = images.len();
    let sources: Vec<Image> = images.iter().map(ImageRecord::to_image).collect();
    let mut views = Vec::with_capacity(settings.k * m);
    for _ in 0..settings.k {
        for img in &sources {
            views.push(full_image_augment(img, &settings.augment, img.height(), img.width(), rng));
        }
    }
    let mut patch_specs = vec![Vec::new(); m];
    let mut patches = Vec::with_capacity(m * settings.n);
    let used = settings.n > 0;
    if used {
        for (i, img) in sources.iter().enumerate() {
            let geometry = ImageGeometry {
                width: img.width(),
                height: img.height(),
            };
            let specs = sample_patch_positions(
                geometry,
                settings.n,
                settings.patch_size,
                i,
                settings.rejection_max_attempts,
                rng,
            )?;
            for spec in &specs {
                patches.push(extract_patch_view(img, spec, settings.patch_mode, &settings.augment, rng));
            }
            patch_specs[i] = specs;
        }
    }
    let layout = BatchLayout::new(m, settings.k, &patch_specs)?;
    Ok(ViewBatch {
        images: views,
        patches,
        layout,
        patch_sampler_used: used,
    })
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: u64,
    pub step: u64,
    pub l_bce: f64,
    pub l_mse_x: f64,
    pub l_mse_y: f64,
    pub l_total: f64,
    pub pairs_image_pos: usize,
    pub pairs_image_neg: usize,
    pub pairs_patch: usize,
    pub pairs_total: usize,
    pub expected_pairs: usize,
    pub views: usize,
    pub wall_clock_s: f64,
}

/// Loss and pair statistics of a single optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    pub pairs_image_pos: usize,
    pub pairs_image_neg: usize,
    pub pairs_patch: usize,
}

/// encode -> aggregate -> relate -> loss -> backward -> Adam update.
pub fn train_step(
    model: &mut SpatialModel,
    adam: &mut Adam<f32>,
    batch: &ViewBatch,
    stats: &NormalizationStats,
) -> Result<StepOutcome> {
    let input = batch.to_tensor(stats);
    let pairs = aggregate(&batch.layout)?;
    model.zero_grad();
    let reps = model.encoder.encode(&input, Mode::Train)?;
    let raw = model.head.relate(&reps, &pairs.rows, Mode::Train);
    let (loss, g) = pair_loss(&raw, &pairs.rows)?;
    let d_reps = model.head.relate_backward(&g);
    model.encoder.backward(&d_reps);
    let mut grads_finite = true;
    model.visit_params_ref(&mut |p| grads_finite &= p.grad.iter().all(|v| v.is_finite()));
    if !grads_finite {
        return Err(Error::NonFinite {
            stage: "gradients".into(),
            step: 0,
            diagnostics: format!("loss {loss:?}"),
        });
    }
    adam.begin_step();
    model.visit_params(&mut |p| adam.apply(p));
    Ok(StepOutcome {
        loss,
        pairs_image_pos: pairs.count(PairKind::ImagePos),
        pairs_image_neg: pairs.count(PairKind::ImageNeg),
        pairs_patch: pairs.count(PairKind::Patch),
    })
}

/// Patch-pipeline introspection over a whole run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub batches: u64,
    pub patch_sampler_batches: u64,
    pub patch_views: u64,
    pub patch_pairs: u64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log: Vec<TrainLogRecord>,
    pub pipeline: PipelineStats,
}

pub fn checkpoint_path(output_dir: &Path, epoch: u64) -> PathBuf {
    output_dir.join("checkpoints").join(format!("ckpt-{epoch:06}.bin"))
}

/// Pretraining images selected by the config (a seeded subset when
/// `pretrain_limit` is set) and the normalization statistics to use.
pub fn pretrain_data(config: &RunConfig) -> Result<(Arc<dyn ImageSource>, SplitSpec, NormalizationStats)> {
    let root = config.data_root()?;
    let ds = load_dataset(config.dataset, &root, &IngestOptions::default())?;
    let part = config.dataset.pretrain_part();
    let source = ds.split(part)?;
    let split = SplitSpec::subset(SplitRole::Pretrain, part, source.len(), config.pretrain_limit, config.seed);
    Ok((source, split, ds.manifest.normalization))
}

/// Runs pretraining from scratch, or from `resume` when given.
pub fn pretrain(config: &RunConfig, resume: Option<&Path>) -> Result<PretrainOutcome> {
    config.validate()?;
    let (source, split, stats) = pretrain_data(config)?;
    pretrain_on(config, source, split, stats, resume)
}

/// [`pretrain`] over an already-loaded source.
pub fn pretrain_on(
    config: &RunConfig,
    source: Arc<dyn ImageSource>,
    split: SplitSpec,
    stats: NormalizationStats,
    resume: Option<&Path>,
) -> Result<PretrainOutcome> {
    config.validate()?;
    let hash = config.hash();
    let (mut model, mut adam, start_epoch, mut step, stats) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.run_config_hash != hash {
                return Err(Error::Config(format!(
                    "checkpoint {} was written by config {} but this config hashes to {hash}",
                    path.display(),
                    ck.run_config_hash
                )));
            }
            let adam = ck
                .restore_adam()
                .ok_or_else(|| Error::Checkpoint("no optimizer state to resume from".into()))?;
            (ck.restore_model()?, adam, ck.epoch, ck.step, ck.normalization)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            (SpatialModel::new(config.encoder_config(), &mut rng)?, Adam::new(config.adam_config()), 0, 0, stats)
        }
    };

    let steps_per_epoch = split.len() / config.m;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "{} pretraining images cannot fill one mini-batch of {}",
            split.len(),
            config.m
        )));
    }
    std::fs::create_dir_all(config.output_dir.join("checkpoints")).map_err(|e| Error::io(&config.output_dir, e))?;
    let log_path = config.output_dir.join("train_log.jsonl");
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let settings = Arc::new(BatchSettings::from_config(config));
    let expected = total_pair_count(config.m, config.k, config.n);
    let mut log = Vec::new();
    let mut pipeline = PipelineStats::default();
    let mut final_checkpoint = resume.map(Path::to_path_buf).unwrap_or_default();
    let started = Instant::now();

    for epoch in start_epoch..config.epochs {
        let order = split.epoch_order(config.seed, epoch);
        let jobs: Vec<(u64, Vec<usize>)> = order
            .chunks_exact(config.m)
            .enumerate()
            .map(|(b, idx)| (b as u64, idx.to_vec()))
            .collect();
        let (src, set, seed) = (Arc::clone(&source), Arc::clone(&settings), config.seed);
        let batches = OrderedParallelMap::new(jobs, config.workers, 2, move |(b, idx): (u64, Vec<usize>)| {
            let records = idx.iter().map(|&i| src.record(i)).collect::<Result<Vec<_>>>()?;
            let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(seed, epoch, b));
            build_training_batch(&records, &set, &mut rng)
        });
        for batch in batches {
            let batch = batch?;
            let outcome = train_step(&mut model, &mut adam, &batch, &stats).map_err(|e| match e {
                Error::NonFinite { stage, diagnostics, .. } => Error::NonFinite {
                    stage,
                    step,
                    diagnostics: format!("epoch {epoch}: {diagnostics}"),
                },
                other => other,
            })?;
            pipeline.batches += 1;
            pipeline.patch_sampler_batches += u64::from(batch.patch_sampler_used);
            pipeline.patch_views += batch.patches.len() as u64;
            pipeline.patch_pairs += outcome.pairs_patch as u64;
            let total = outcome.pairs_image_pos + outcome.pairs_image_neg + outcome.pairs_patch;
            if total != expected {
                return Err(Error::Contract(format!("step {step}: {total} pairs, expected {expected}")));
            }
            let rec = TrainLogRecord {
                epoch,
                step,
                l_bce: outcome.loss.l_bce,
                l_mse_x: outcome.loss.l_mse_x,
                l_mse_y: outcome.loss.l_mse_y,
                l_total: outcome.loss.l_total,
                pairs_image_pos: outcome.pairs_image_pos,
                pairs_image_neg: outcome.pairs_image_neg,
                pairs_patch: outcome.pairs_patch,
                pairs_total: total,
                expected_pairs: expected,
                views: batch.len(),
                wall_clock_s: started.elapsed().as_secs_f64(),
            };
            writeln!(log_file, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
            log::debug!("epoch {epoch} step {step} loss {:.5}", rec.l_total);
            log.push(rec);
            step += 1;
        }
        let done = epoch + 1;
        if done % config.checkpoint_every == 0 || done == config.epochs {
            let path = checkpoint_path(&config.output_dir, done);
            let mut ck = Checkpoint::capture(&model, Some(&adam), config.patch_mode, stats, &hash, done, step);
            ck.manifest_hash.clone_from(&config.manifest_hash);
            ck.save(&path)?;
            log::info!("epoch {done}/{}: checkpoint {}", config.epochs, path.display());
            final_checkpoint = path;
        }
    }
    Ok(PretrainOutcome {
        final_checkpoint,
        log,
        pipeline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synthetic, DatasetId, MemorySource, SplitPart};

    fn settings(k: usize, n: usize) -> BatchSettings {
        BatchSettings {
            k,
            n,
            patch_size: 13,
            patch_mode: PatchMode::Rescaled,
            augment: AugmentConfig::default(),
            rejection_max_attempts: 100,
        }
    }

    #[test]
    fn view_counts_follow_the_representation_formula() {
        let recs = synthetic::records(DatasetId::Cifar10, 64, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = build_training_batch(&recs, &settings(4, 2), &mut rng).unwrap();
        assert_eq!((b.images.len(), b.patches.len(), b.len()), (256, 128, 384));
        b.layout.validate().unwrap();
        let b3 = build_training_batch(&recs[..7], &settings(4, 3), &mut rng).unwrap();
        assert_eq!(b3.patches.len() * 7, b3.len() * 3);
    }

    #[test]
    fn n_zero_bypasses_the_patch_sampler() {
        let recs = synthetic::records(DatasetId::Cifar10, 4, 0).unwrap();
        let b = build_training_batch(&recs, &settings(2, 0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(!b.patch_sampler_used);
        assert!(b.patches.is_empty());
    }

    fn tiny_config(dir: &Path) -> RunConfig {
        let mut c = RunConfig::new(DatasetId::Cifar10, dir);
        c.m = 4;
        c.k = 2;
        c.n = 2;
        c.epochs = 2;
        c.blocks_per_stage = Some(1);
        c.base_width = Some(4);
        c
    }

    fn tiny_source() -> (Arc<dyn ImageSource>, SplitSpec) {
        let recs = synthetic::records(DatasetId::Cifar10, 12, 3).unwrap();
        let src: Arc<dyn ImageSource> = Arc::new(MemorySource::new(DatasetId::Cifar10, recs).unwrap());
        let split = SplitSpec::full(SplitRole::Pretrain, SplitPart::Train, 12);
        (src, split)
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (src, split) = tiny_source();
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let full = pretrain_on(&cfg, src.clone(), split.clone(), NormalizationStats::IDENTITY, None).unwrap();
        assert_eq!(full.log.len(), 6);
        let end_full = Checkpoint::load(&full.final_checkpoint).unwrap();

        let resumed = pretrain_on(&cfg, src, split, NormalizationStats::IDENTITY, Some(&checkpoint_path(dir.path(), 1)))
            .unwrap();
        assert_eq!(resumed.log[0].step, 3);
        let tail: Vec<f64> = full.log[3..].iter().map(|r| r.l_total).collect();
        assert_eq!(resumed.log.iter().map(|r| r.l_total).collect::<Vec<_>>(), tail);
        let end_resumed = Checkpoint::load(&resumed.final_checkpoint).unwrap();
        assert_eq!(end_full, end_resumed);
    }

    #[test]
    fn resume_rejects_a_different_config() {
        let (src, split) = tiny_source();
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        pretrain_on(&cfg, src.clone(), split.clone(), NormalizationStats::IDENTITY, None).unwrap();
        let mut other = cfg.clone();
        other.seed = 9;
        let err = pretrain_on(&other, src, split, NormalizationStats::IDENTITY, Some(&checkpoint_path(dir.path(), 1)))
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn log_file_has_one_line_per_step() {
        let (src, split) = tiny_source();
        let dir = tempfile::tempdir().unwrap();
        let out = pretrain_on(&tiny_config(dir.path()), src, split, NormalizationStats::IDENTITY, None).unwrap();
        let text = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        let parsed: Vec<TrainLogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed.len(), out.log.len());
        assert!(parsed.iter().all(|r| r.pairs_total == r.expected_pairs && r.expected_pairs == 4 * 2 + 4));
        assert!(checkpoint_path(dir.path(), 1).exists() && checkpoint_path(dir.path(), 2).exists());
    }
}
