//! Additive patches: zero canvas during training, one encoder pass at inference.
//!
//! cargo run --release --example additive_patch_use

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spatial_reasoning::datasets::{synthetic, DatasetId, NormalizationStats};
use spatial_reasoning::model::{EncoderConfig, SpatialModel};
use spatial_reasoning::patching::{extract_patch_view, AugmentConfig, ImageGeometry, PatchMode, PatchSpec};
use spatial_reasoning::representation::{make_grid, single_pass_representation, compose_representation, Representer};

fn main() -> spatial_reasoning::Result<()> {
    let image = synthetic::records(DatasetId::Cifar10, 1, 3)?[0].to_image();
    let spec = PatchSpec::from_pixels(ImageGeometry::square(32), 4, 10, 13, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let view = extract_patch_view(&image, &spec, PatchMode::Additive, &AugmentConfig::disabled(), &mut rng);
    let input = view.encoder_input(&NormalizationStats::IDENTITY);
    let nonzero = input.iter().filter(|v| **v != 0.0).count();
    println!("additive view: {nonzero} of {} inputs can be non-zero (patch area {})", input.len(), 3 * 13 * 13);

    let model = SpatialModel::new(EncoderConfig::resnet32(32), &mut rng)?;
    let mut rep = Representer {
        encoder: model.encoder,
        normalization: NormalizationStats::IDENTITY,
        patch_mode: PatchMode::Additive,
    };
    let v = single_pass_representation(&image, &mut rep)?;
    println!("single pass: {} features, {} encoder view(s)", v.len(), rep.encoder.counter().views_encoded);
    let grid = make_grid(ImageGeometry::square(32), 13, 9, 0)?;
    match compose_representation(&image, &mut rep, &grid) {
        Err(e) => println!("composite on an additive checkpoint is refused: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
