//! Grid patches for inference and composite vector widths for each patch count.
//!
//! cargo run --release --example dynamic_compute_grid

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spatial_reasoning::datasets::{synthetic, DatasetId, NormalizationStats};
use spatial_reasoning::model::{EncoderConfig, SpatialModel};
use spatial_reasoning::patching::{ImageGeometry, PatchMode};
use spatial_reasoning::representation::{make_grid, Representer, SUPPORTED_PATCH_COUNTS};

fn main() -> spatial_reasoning::Result<()> {
    for (side, s) in [(32, 13), (64, 24), (96, 36)] {
        let grid = make_grid(ImageGeometry::square(side), s, 9, 0)?;
        let cells: Vec<_> = grid.specs.iter().map(|p| (p.pixel_x(), p.pixel_y())).collect();
        println!("{side}x{side}, s={s}: {cells:?}");
    }

    let model = SpatialModel::new(EncoderConfig::resnet32(32), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut rep = Representer {
        encoder: model.encoder,
        normalization: NormalizationStats::IDENTITY,
        patch_mode: PatchMode::Rescaled,
    };
    let images: Vec<_> = synthetic::records(DatasetId::Cifar10, 4, 2)?.iter().map(|r| r.to_image()).collect();
    for n in SUPPORTED_PATCH_COUNTS {
        rep.encoder.reset_counter();
        let v = rep.features(&images, 13, n, 0)?;
        println!(
            "n={n}: width {} = (1+{n})*{}, encoder views per image {}",
            v[0].len(),
            rep.feature_dim(),
            rep.encoder.counter().views_encoded / images.len() as u64
        );
    }
    Ok(())
}
