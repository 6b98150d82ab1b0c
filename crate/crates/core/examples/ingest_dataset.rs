//! Write a small synthetic CIFAR-10 in the canonical binary layout, ingest it
//! and print the ingestion manifest.
//!
//! cargo run --example ingest_dataset [-- <existing data root>]

use spatial_reasoning::datasets::{load_dataset, synthetic, DatasetId, IngestOptions, SplitPart};

fn main() -> spatial_reasoning::Result<()> {
    let tmp;
    let root = match std::env::args().nth(1) {
        Some(p) => std::path::PathBuf::from(p),
        None => {
            tmp = tempfile::tempdir().expect("temp dir");
            synthetic::write_cifar10(tmp.path(), 20, 30, 0)?;
            tmp.path().to_path_buf()
        }
    };
    let data = load_dataset(DatasetId::Cifar10, &root, &IngestOptions::default())?;
    let train = data.split(SplitPart::Train)?;
    let first = train.record(0)?;
    println!("{} train records, first label {:?}", train.len(), first.label());
    println!("{}", data.manifest.to_json()?);
    Ok(())
}
