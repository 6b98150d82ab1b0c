//! Assemble one training batch from synthetic images and take an optimizer step.
//!
//! cargo run --release --example training_batch

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spatial_reasoning::datasets::{synthetic, DatasetId, NormalizationStats};
use spatial_reasoning::model::{EncoderConfig, SpatialModel};
use spatial_reasoning::nn::{Adam, AdamConfig};
use spatial_reasoning::patching::{AugmentConfig, PatchMode};
use spatial_reasoning::training::{build_training_batch, train_step, BatchSettings};

fn main() -> spatial_reasoning::Result<()> {
    let m: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(16);
    let images = synthetic::records(DatasetId::Cifar10, m, 1)?;
    let settings = BatchSettings {
        k: 4,
        n: 2,
        patch_size: 13,
        patch_mode: PatchMode::Rescaled,
        augment: AugmentConfig::default(),
        rejection_max_attempts: 100,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = build_training_batch(&images, &settings, &mut rng)?;
    println!("{} images -> {} augmented views + {} patch views", m, batch.images.len(), batch.patches.len());

    let mut model = SpatialModel::new(EncoderConfig::resnet32(32), &mut rng)?;
    let mut adam = Adam::new(AdamConfig::default());
    for step in 0..3 {
        let t = Instant::now();
        let out = train_step(&mut model, &mut adam, &batch, &NormalizationStats::IDENTITY)?;
        println!(
            "step {step}: l_total {:.4} (bce {:.4}, mse {:.4}/{:.4}) pairs {}+{}+{}  {:.2}s",
            out.loss.l_total,
            out.loss.l_bce,
            out.loss.l_mse_x,
            out.loss.l_mse_y,
            out.pairs_image_pos,
            out.pairs_image_neg,
            out.pairs_patch,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
