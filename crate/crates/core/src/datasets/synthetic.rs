//! Procedural class-structured images written in the canonical on-disk formats.
//!
//! Used by tests and examples so that the real readers are exercised without
//! the published archives. Each class fixes a foreground hue, a shape and the
//! quadrant the shape sits in; background, exact placement, size and noise are
//! random.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{coarse_label_map, DatasetId, ImageRecord};
use crate::imaging::hsv_to_rgb;
use crate::{Error, Result};

/// One procedural image of `class` with side `side`, interleaved HWC bytes.
pub fn render(side: usize, class: u16, num_classes: usize, rng: &mut impl Rng) -> Vec<u8> {
    let c = usize::from(class);
    let fg = hsv_to_rgb(c as f32 / num_classes as f32, 0.85, 0.95);
    let bg = hsv_to_rgb(rng.random::<f32>(), rng.random_range(0.0..0.4), rng.random_range(0.1..0.5));
    let shape = c % 3;
    let quadrant = (c / 3) % 4;
    let half = side as f32 / 2.0;
    let radius = half * rng.random_range(0.35..0.55);
    let cx = (quadrant % 2) as f32 * half + half / 2.0 + rng.random_range(-0.15..0.15) * half;
    let cy = (quadrant / 2) as f32 * half + half / 2.0 + rng.random_range(-0.15..0.15) * half;
    let mut out = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let inside = match shape {
                0 => dx * dx + dy * dy <= radius * radius,
                1 => dx.abs().max(dy.abs()) <= radius * 0.8,
                _ => dx.abs() + dy.abs() <= radius && ((x / 2 + y / 2) % 2 == 0),
            };
            let base = if inside { fg } else { bg };
            for v in base {
                let n: f32 = rng.random_range(-0.06..0.06);
                out.push(((v + n).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// `count` records with labels cycling through the class set.
pub fn records(dataset: DatasetId, count: usize, seed: u64) -> Result<Vec<ImageRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = dataset.num_classes();
    (0..count)
        .map(|i| {
            let label = (i % classes) as u16;
            let px = render(dataset.image_side(), label, classes, &mut rng);
            ImageRecord::new(dataset, px, Some(label))
        })
        .collect()
}

fn hwc_to_planar(hwc: &[u8]) -> Vec<u8> {
    let plane = hwc.len() / 3;
    let mut planar = vec![0u8; hwc.len()];
    for i in 0..plane {
        for c in 0..3 {
            planar[c * plane + i] = hwc[i * 3 + c];
        }
    }
    planar
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `cifar-10-batches-bin/` under `root`: five train batches of
/// `train_per_batch` images and one test batch of `test` images.
pub fn write_cifar10(root: &Path, train_per_batch: usize, test: usize, seed: u64) -> Result<()> {
    let dir = root.join("cifar-10-batches-bin");
    let encode = |recs: &[ImageRecord]| -> Vec<u8> {
        recs.iter()
            .flat_map(|r| std::iter::once(r.label().unwrap_or(0) as u8).chain(hwc_to_planar(r.pixels_hwc())))
            .collect()
    };
    for b in 1..=5u64 {
        let recs = records(DatasetId::Cifar10, train_per_batch, seed.wrapping_add(b))?;
        write(&dir.join(format!("data_batch_{b}.bin")), &encode(&recs))?;
    }
    let recs = records(DatasetId::Cifar10, test, seed.wrapping_add(100))?;
    write(&dir.join("test_batch.bin"), &encode(&recs))
}

/// Writes `cifar-100-binary/{train,test}.bin` with consistent coarse bytes.
pub fn write_cifar100(root: &Path, train: usize, test: usize, seed: u64) -> Result<()> {
    let dir = root.join("cifar-100-binary");
    for (name, count, s) in [("train.bin", train, seed), ("test.bin", test, seed.wrapping_add(1))] {
        let recs = records(DatasetId::Cifar100, count, s)?;
        let mut bytes = Vec::with_capacity(count * 3074);
        for r in &recs {
            let fine = r.label().unwrap_or(0);
            bytes.push(coarse_label_map(fine)? as u8);
            bytes.push(fine as u8);
            bytes.extend(hwc_to_planar(r.pixels_hwc()));
        }
        write(&dir.join(name), &bytes)?;
    }
    Ok(())
}

/// Writes `stl10_binary/` in its column-major layout with 1-based labels.
pub fn write_stl10(root: &Path, train: usize, test: usize, unlabeled: usize, seed: u64) -> Result<()> {
    let dir = root.join("stl10_binary");
    let side = 96;
    let encode = |r: &ImageRecord| -> Vec<u8> {
        let px = r.pixels_hwc();
        let mut raw = vec![0u8; px.len()];
        for c in 0..3 {
            for x in 0..side {
                for y in 0..side {
                    raw[c * side * side + x * side + y] = px[(y * side + x) * 3 + c];
                }
            }
        }
        raw
    };
    for (prefix, count, s, labeled) in [
        ("train", train, seed, true),
        ("test", test, seed.wrapping_add(1), true),
        ("unlabeled", unlabeled, seed.wrapping_add(2), false),
    ] {
        let recs = records(DatasetId::Stl10, count, s)?;
        write(&dir.join(format!("{prefix}_X.bin")), &recs.iter().flat_map(encode).collect::<Vec<_>>())?;
        if labeled {
            let y: Vec<u8> = recs.iter().map(|r| r.label().unwrap_or(0) as u8 + 1).collect();
            write(&dir.join(format!("{prefix}_y.bin")), &y)?;
        }
    }
    Ok(())
}

/// Writes a `tiny-imagenet-200/` tree with `per_class` train JPEGs per class
/// and `val_per_class` validation JPEGs per class.
pub fn write_tiny_imagenet(root: &Path, per_class: usize, val_per_class: usize, seed: u64) -> Result<()> {
    let dir = root.join("tiny-imagenet-200");
    let wnids: Vec<String> = (0..200).map(|i| format!("n{:08}", 1_000_000 + i * 7919)).collect();
    write(&dir.join("wnids.txt"), wnids.join("\n").as_bytes())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let save = |path: &Path, px: Vec<u8>| -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let img = image::RgbImage::from_raw(64, 64, px).expect("64x64x3 buffer");
        img.save_with_format(path, image::ImageFormat::Jpeg)
            .map_err(|e| Error::ingest(path, format!("cannot encode: {e}")))
    };
    let mut annotations = String::new();
    let mut v = 0;
    for (label, wnid) in wnids.iter().enumerate() {
        for k in 0..per_class {
            let px = render(64, label as u16, 200, &mut rng);
            save(&dir.join(format!("train/{wnid}/images/{wnid}_{k}.JPEG")), px)?;
        }
        for _ in 0..val_per_class {
            let px = render(64, label as u16, 200, &mut rng);
            save(&dir.join(format!("val/images/val_{v}.JPEG")), px)?;
            annotations.push_str(&format!("val_{v}.JPEG\t{wnid}\t0\t0\t63\t63\n"));
            v += 1;
        }
    }
    write(&dir.join("val/val_annotations.txt"), annotations.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{load_dataset, IngestOptions, SplitPart};

    #[test]
    fn render_is_seeded() {
        let a = records(DatasetId::Cifar10, 4, 9).unwrap();
        let b = records(DatasetId::Cifar10, 4, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].pixels_hwc(), a[1].pixels_hwc());
    }

    #[test]
    fn cifar10_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_cifar10(dir.path(), 3, 2, 1).unwrap();
        let ds = load_dataset(DatasetId::Cifar10, dir.path(), &IngestOptions::default()).unwrap();
        let train = ds.split(SplitPart::Train).unwrap();
        assert_eq!(train.len(), 15);
        assert_eq!(ds.split(SplitPart::Test).unwrap().len(), 2);
        let expected = records(DatasetId::Cifar10, 3, 2).unwrap();
        assert_eq!(train.record(0).unwrap(), expected[0]);
        assert_eq!(ds.manifest.checksums.len(), 6);
    }

    #[test]
    fn cifar100_fine_and_coarse() {
        let dir = tempfile::tempdir().unwrap();
        write_cifar100(dir.path(), 120, 10, 3).unwrap();
        let fine = load_dataset(DatasetId::Cifar100, dir.path(), &IngestOptions::default()).unwrap();
        let coarse = load_dataset(DatasetId::Cifar100_20, dir.path(), &IngestOptions::default()).unwrap();
        let f = fine.split(SplitPart::Train).unwrap();
        let c = coarse.split(SplitPart::Train).unwrap();
        for i in 0..f.len() {
            let fl = f.record(i).unwrap().label().unwrap();
            assert_eq!(c.record(i).unwrap().label().unwrap(), coarse_label_map(fl).unwrap());
        }
    }

    #[test]
    fn corrupted_coarse_byte_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_cifar100(dir.path(), 2, 1, 3).unwrap();
        let path = dir.path().join("cifar-100-binary/train.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = (bytes[0] + 1) % 20;
        std::fs::write(&path, bytes).unwrap();
        let err = load_dataset(DatasetId::Cifar100, dir.path(), &IngestOptions::default()).unwrap_err();
        assert!(err.to_string().contains("train.bin"), "{err}");
    }

    #[test]
    fn stl10_column_major_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_stl10(dir.path(), 3, 2, 4, 5).unwrap();
        let ds = load_dataset(DatasetId::Stl10, dir.path(), &IngestOptions::default()).unwrap();
        let train = ds.split(SplitPart::Train).unwrap();
        let expected = records(DatasetId::Stl10, 3, 5).unwrap();
        for (i, e) in expected.iter().enumerate() {
            assert_eq!(&train.record(i).unwrap(), e);
        }
        let unl = ds.split(SplitPart::Unlabeled).unwrap();
        assert_eq!(unl.len(), 4);
        assert_eq!(unl.record(0).unwrap().label(), None);
    }

    #[test]
    fn tiny_imagenet_tree_loads() {
        let dir = tempfile::tempdir().unwrap();
        write_tiny_imagenet(dir.path(), 1, 1, 2).unwrap();
        let ds = load_dataset(DatasetId::TinyImagenet, dir.path(), &IngestOptions::default()).unwrap();
        assert_eq!(ds.split(SplitPart::Train).unwrap().len(), 200);
        let val = ds.split(SplitPart::Validation).unwrap();
        assert_eq!(val.len(), 200);
        assert_eq!(val.record(17).unwrap().label(), Some(17));
        assert!(ds.manifest.notes.iter().any(|n| n.contains("validation")));
    }

    #[test]
    fn checksum_mismatch_policy_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        write_cifar10(dir.path(), 1, 1, 1).unwrap();
        let mut opts = IngestOptions::default();
        opts.expected_checksums.insert("test_batch.bin".into(), "00".into());
        assert!(matches!(
            load_dataset(DatasetId::Cifar10, dir.path(), &opts),
            Err(Error::Checksum { .. })
        ));
        opts.continue_on_checksum_mismatch = true;
        let ds = load_dataset(DatasetId::Cifar10, dir.path(), &opts).unwrap();
        assert_eq!(ds.manifest.checksum_warnings.len(), 1);
    }
}
