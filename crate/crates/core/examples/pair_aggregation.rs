//! Build a batch layout, aggregate its pairs and compare with the closed form.
//!
//! cargo run --example pair_aggregation -- 64 4 3

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spatial_reasoning::aggregation::{aggregate, total_pair_count, verify_pairs, BatchLayout, PairKind};
use spatial_reasoning::patching::{sample_patch_positions, ImageGeometry};

fn main() -> spatial_reasoning::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (m, k, n) = match args[..] {
        [m, k, n] => (m, k, n),
        _ => (64, 4, 3),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let patches = (0..m)
        .map(|i| sample_patch_positions(ImageGeometry::square(64), n, 24, i, 100, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let batch = aggregate(&BatchLayout::new(m, k, &patches)?)?;
    println!(
        "M={m} K={k} N={n}: {} positive, {} negative, {} patch pairs; total {} (formula {})",
        batch.count(PairKind::ImagePos),
        batch.count(PairKind::ImageNeg),
        batch.count(PairKind::Patch),
        batch.len(),
        total_pair_count(m, k, n)
    );
    for row in batch.rows.iter().filter(|r| r.kind == PairKind::Patch).take(3) {
        println!("  rows {:>3} -> {:>3}  target ({:+.3}, {:+.3})", row.left, row.right, row.distance_target.0, row.distance_target.1);
    }
    let v = verify_pairs(m, k, n)?;
    println!("brute-force enumeration agrees: {}", v.ok());
    Ok(())
}
