//! Aggregate per-seed accuracies and render a report with min/max whiskers.
//!
//! cargo run --example seed_sweep_report -- <output dir>

use spatial_reasoning::evaluation::mean_std;
use spatial_reasoning::experiment::{write_report, ReferenceValue, ResultRow, Variant};

fn main() -> spatial_reasoning::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "seed_sweep_report".into());
    // Accuracies per seed for each inference patch count, as a sweep would produce.
    let measured = [(1, [31.2, 30.9, 30.7]), (3, [32.3, 30.9, 31.2]), (5, [33.2, 34.2, 32.8]), (9, [33.2, 33.0, 33.0])];
    let mut rows = Vec::new();
    for (n_patches, accs) in measured {
        for (seed, acc) in accs.into_iter().enumerate() {
            rows.push(ResultRow {
                manifest_hash: "example".into(),
                point: format!("p{n_patches}"),
                variant: Variant::Rescaled,
                patch_size: 24,
                n: 2,
                n_patches,
                seed: seed as u64,
                test_accuracy: Some(acc),
                train_accuracy: Some(acc + 12.0),
                error: None,
            });
        }
        let (m, s) = mean_std(&accs);
        println!("n={n_patches}: {m:.2} +- {s:.2}");
    }
    let reference = ReferenceValue { label: "target".into(), x: Some(9.0), values: vec![], mean: Some(33.0), std: None };
    let files = write_report(&rows, &[reference], "Inference patches", std::path::Path::new(&out))?;
    println!("{}", std::fs::read_to_string(&files.markdown).unwrap_or_default());
    println!("plot: {}", files.plot.display());
    Ok(())
}
