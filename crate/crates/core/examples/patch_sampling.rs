//! Sample patch positions on a 64x64 image and check the overlap rule.
//!
//! cargo run --example patch_sampling

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spatial_reasoning::patching::{overlaps, relative_distance, sample_patch_positions, ImageGeometry, PatchSpec};

fn main() -> spatial_reasoning::Result<()> {
    let g = ImageGeometry::square(64);
    println!("largest size with two disjoint patches: {}", g.max_non_overlapping_size());

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for image in 0..3 {
        let patches = sample_patch_positions(g, 3, 24, image, 100, &mut rng)?;
        let coords: Vec<_> = patches.iter().map(|p| (p.pixel_x(), p.pixel_y())).collect();
        let (dx, dy) = relative_distance(&patches[0], &patches[1]);
        println!(
            "image {image}: {coords:?}  first two overlap: {}  target ({dx:+.3}, {dy:+.3})",
            overlaps(&patches[0], &patches[1])
        );
    }

    // Worked example: separation along one axis is enough.
    let a = PatchSpec { x: 0.2, y: 0.6, size_px: 24, image_index: 0, geometry: g };
    let b = PatchSpec { x: 0.4, y: 0.1, ..a };
    println!("(0.2,0.6) vs (0.4,0.1): overlap {} distance {:?}", overlaps(&a, &b), relative_distance(&a, &b));
    Ok(())
}
