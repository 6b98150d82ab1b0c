use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use super::manifest::{sha256_hex, verify_checksum};
use super::{
    coarse_label_map, DatasetId, ImageRecord, ImageSource, IngestOptions, IngestionManifest,
    LoadedDataset, MemorySource, NormalizationStats, SplitPart,
};
use crate::{Error, Result};

const CIFAR_PIXELS: usize = 32 * 32 * 3;
const STL_SIDE: usize = 96;
const STL_PIXELS: usize = STL_SIDE * STL_SIDE * 3;

struct Ingest<'a> {
    dataset: DatasetId,
    dir: PathBuf,
    options: &'a IngestOptions,
    checksums: BTreeMap<String, String>,
    warnings: Vec<String>,
    notes: Vec<String>,
}

impl Ingest<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn read(&mut self, rel: &str) -> Result<Vec<u8>> {
        let path = self.path(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::ingest(&path, format!("cannot read: {e}")))?;
        self.record_checksum(rel, &path, sha256_hex(&bytes))?;
        Ok(bytes)
    }

    fn record_checksum(&mut self, rel: &str, path: &Path, digest: String) -> Result<()> {
        if let Some(w) = verify_checksum(self.options, path, rel, &digest)? {
            self.warnings.push(w);
        }
        self.checksums.insert(rel.to_string(), digest);
        Ok(())
    }
}

fn dataset_dir(root: &Path, canonical: &str) -> PathBuf {
    let nested = root.join(canonical);
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

/// CIFAR stores each record as planar R, G, B 32x32 planes.
fn planar_to_hwc(planar: &[u8], side: usize) -> Vec<u8> {
    let plane = side * side;
    let mut hwc = vec![0u8; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            hwc[i * 3 + c] = planar[c * plane + i];
        }
    }
    hwc
}

pub(super) fn load(dataset: DatasetId, root: &Path, options: &IngestOptions) -> Result<LoadedDataset> {
    let canonical = match dataset {
        DatasetId::Cifar10 => "cifar-10-batches-bin",
        DatasetId::Cifar100 | DatasetId::Cifar100_20 => "cifar-100-binary",
        DatasetId::Stl10 => "stl10_binary",
        DatasetId::TinyImagenet => "tiny-imagenet-200",
    };
    if !root.exists() {
        return Err(Error::ingest(root, "dataset root does not exist"));
    }
    let mut ingest = Ingest {
        dataset,
        dir: dataset_dir(root, canonical),
        options,
        checksums: BTreeMap::new(),
        warnings: Vec::new(),
        notes: Vec::new(),
    };
    let splits: BTreeMap<SplitPart, Arc<dyn ImageSource>> = match dataset {
        DatasetId::Cifar10 => load_cifar10(&mut ingest)?,
        DatasetId::Cifar100 | DatasetId::Cifar100_20 => load_cifar100(&mut ingest)?,
        DatasetId::Stl10 => load_stl10(&mut ingest)?,
        DatasetId::TinyImagenet => load_tiny_imagenet(&mut ingest)?,
    };
    let pretrain = splits
        .get(&dataset.pretrain_part())
        .ok_or_else(|| Error::ingest(&ingest.dir, "pretraining split missing"))?;
    let normalization = NormalizationStats::compute(pretrain.as_ref())?;
    let manifest = IngestionManifest {
        dataset,
        root: root.display().to_string(),
        split_counts: splits.iter().map(|(k, v)| (k.name().to_string(), v.len())).collect(),
        checksums: ingest.checksums,
        checksum_warnings: ingest.warnings,
        normalization,
        notes: ingest.notes,
    };
    Ok(LoadedDataset {
        id: dataset,
        splits,
        manifest,
    })
}

fn load_cifar10(ingest: &mut Ingest<'_>) -> Result<BTreeMap<SplitPart, Arc<dyn ImageSource>>> {
    let parse = |ingest: &mut Ingest<'_>, rel: &str, out: &mut Vec<ImageRecord>| -> Result<()> {
        let bytes = ingest.read(rel)?;
        let path = ingest.path(rel);
        if bytes.is_empty() || bytes.len() % (CIFAR_PIXELS + 1) != 0 {
            return Err(Error::ingest(&path, format!("size {} is not a multiple of 3073", bytes.len())));
        }
        for chunk in bytes.chunks_exact(CIFAR_PIXELS + 1) {
            let label = u16::from(chunk[0]);
            let rec = ImageRecord::new(ingest.dataset, planar_to_hwc(&chunk[1..], 32), Some(label))
                .map_err(|e| Error::ingest(&path, e.to_string()))?;
            out.push(rec);
        }
        Ok(())
    };
    let mut train = Vec::with_capacity(50_000);
    for i in 1..=5 {
        parse(ingest, &format!("data_batch_{i}.bin"), &mut train)?;
    }
    let mut test = Vec::with_capacity(10_000);
    parse(ingest, "test_batch.bin", &mut test)?;
    let d = ingest.dataset;
    Ok(BTreeMap::from([
        (SplitPart::Train, Arc::new(MemorySource::new(d, train)?) as Arc<dyn ImageSource>),
        (SplitPart::Test, Arc::new(MemorySource::new(d, test)?) as Arc<dyn ImageSource>),
    ]))
}

fn load_cifar100(ingest: &mut Ingest<'_>) -> Result<BTreeMap<SplitPart, Arc<dyn ImageSource>>> {
    let coarse = ingest.dataset == DatasetId::Cifar100_20;
    let mut splits: BTreeMap<SplitPart, Arc<dyn ImageSource>> = BTreeMap::new();
    for (part, rel) in [(SplitPart::Train, "train.bin"), (SplitPart::Test, "test.bin")] {
        let bytes = ingest.read(rel)?;
        let path = ingest.path(rel);
        if bytes.is_empty() || bytes.len() % (CIFAR_PIXELS + 2) != 0 {
            return Err(Error::ingest(&path, format!("size {} is not a multiple of 3074", bytes.len())));
        }
        let mut records = Vec::with_capacity(bytes.len() / (CIFAR_PIXELS + 2));
        for chunk in bytes.chunks_exact(CIFAR_PIXELS + 2) {
            let (stored_coarse, fine) = (u16::from(chunk[0]), u16::from(chunk[1]));
            let mapped = coarse_label_map(fine).map_err(|e| Error::ingest(&path, e.to_string()))?;
            if mapped != stored_coarse {
                return Err(Error::ingest(
                    &path,
                    format!("fine label {fine} stored with superclass {stored_coarse}, table says {mapped}"),
                ));
            }
            let label = if coarse { mapped } else { fine };
            let rec = ImageRecord::new(ingest.dataset, planar_to_hwc(&chunk[2..], 32), Some(label))
                .map_err(|e| Error::ingest(&path, e.to_string()))?;
            records.push(rec);
        }
        splits.insert(part, Arc::new(MemorySource::new(ingest.dataset, records)?));
    }
    Ok(splits)
}

/// STL-10 split read lazily from its `*_X.bin` file (column-major 3x96x96 images).
struct Stl10FileSource {
    path: PathBuf,
    count: usize,
    labels: Option<Vec<u16>>,
    file: Mutex<File>,
}

impl Stl10FileSource {
    fn open(ingest: &mut Ingest<'_>, x_rel: &str, y_rel: Option<&str>) -> Result<Self> {
        let path = ingest.path(x_rel);
        let mut file = File::open(&path).map_err(|e| Error::ingest(&path, format!("cannot open: {e}")))?;
        let len = file.metadata().map_err(|e| Error::io(&path, e))?.len() as usize;
        if len == 0 || !len.is_multiple_of(STL_PIXELS) {
            return Err(Error::ingest(&path, format!("size {len} is not a multiple of {STL_PIXELS}")));
        }
        let count = len / STL_PIXELS;
        let mut hasher = Sha256::new();
        let mut buf = vec![0u8; 1 << 20];
        loop {
            let n = file.read(&mut buf).map_err(|e| Error::io(&path, e))?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        ingest.record_checksum(x_rel, &path, hex::encode(hasher.finalize()))?;
        let labels = match y_rel {
            Some(rel) => {
                let bytes = ingest.read(rel)?;
                let ypath = ingest.path(rel);
                if bytes.len() != count {
                    return Err(Error::ingest(&ypath, format!("{} labels for {count} images", bytes.len())));
                }
                let labels = bytes
                    .iter()
                    .map(|&b| match b {
                        1..=10 => Ok(u16::from(b - 1)),
                        _ => Err(Error::ingest(&ypath, format!("label {b} not in 1..=10"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(labels)
            }
            None => None,
        };
        Ok(Self {
            path,
            count,
            labels,
            file: Mutex::new(file),
        })
    }
}

impl ImageSource for Stl10FileSource {
    fn dataset(&self) -> DatasetId {
        DatasetId::Stl10
    }

    fn len(&self) -> usize {
        self.count
    }

    fn record(&self, index: usize) -> Result<ImageRecord> {
        if index >= self.count {
            return Err(Error::Contract(format!("STL-10 index {index} >= {}", self.count)));
        }
        let mut raw = vec![0u8; STL_PIXELS];
        {
            let mut file = self.file.lock().expect("poisoned STL-10 file lock");
            file.seek(SeekFrom::Start((index * STL_PIXELS) as u64))
                .and_then(|_| file.read_exact(&mut raw))
                .map_err(|e| Error::io(&self.path, e))?;
        }
        // raw[c][x][y] -> hwc[y][x][c]
        let plane = STL_SIDE * STL_SIDE;
        let mut hwc = vec![0u8; STL_PIXELS];
        for c in 0..3 {
            for x in 0..STL_SIDE {
                for y in 0..STL_SIDE {
                    hwc[(y * STL_SIDE + x) * 3 + c] = raw[c * plane + x * STL_SIDE + y];
                }
            }
        }
        ImageRecord::new(DatasetId::Stl10, hwc, self.labels.as_ref().map(|l| l[index]))
    }
}

fn load_stl10(ingest: &mut Ingest<'_>) -> Result<BTreeMap<SplitPart, Arc<dyn ImageSource>>> {
    let train = Stl10FileSource::open(ingest, "train_X.bin", Some("train_y.bin"))?;
    let test = Stl10FileSource::open(ingest, "test_X.bin", Some("test_y.bin"))?;
    let unlabeled = Stl10FileSource::open(ingest, "unlabeled_X.bin", None)?;
    ingest
        .notes
        .push("pretraining uses the unlabeled split; the probe trains on the labeled train split".into());
    Ok(BTreeMap::from([
        (SplitPart::Train, Arc::new(train) as Arc<dyn ImageSource>),
        (SplitPart::Test, Arc::new(test) as Arc<dyn ImageSource>),
        (SplitPart::Unlabeled, Arc::new(unlabeled) as Arc<dyn ImageSource>),
    ]))
}

fn decode_jpeg(path: &Path) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| Error::ingest(path, format!("cannot decode: {e}")))?;
    let rgb = img.to_rgb8();
    if rgb.width() != 64 || rgb.height() != 64 {
        return Err(Error::ingest(path, format!("expected 64x64, got {}x{}", rgb.width(), rgb.height())));
    }
    Ok(rgb.into_raw())
}

fn load_tiny_imagenet(ingest: &mut Ingest<'_>) -> Result<BTreeMap<SplitPart, Arc<dyn ImageSource>>> {
    let wnids_raw = ingest.read("wnids.txt")?;
    let mut wnids: Vec<String> = String::from_utf8_lossy(&wnids_raw)
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    wnids.sort();
    if wnids.len() != 200 {
        return Err(Error::ingest(ingest.path("wnids.txt"), format!("{} class ids, expected 200", wnids.len())));
    }
    let label_of: BTreeMap<&str, u16> = wnids.iter().enumerate().map(|(i, w)| (w.as_str(), i as u16)).collect();

    let mut train = Vec::with_capacity(100_000);
    for (label, wnid) in wnids.iter().enumerate() {
        let dir = ingest.path(&format!("train/{wnid}/images"));
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::ingest(&dir, format!("cannot list: {e}")))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("jpeg")))
            .collect();
        files.sort();
        for f in files {
            train.push(ImageRecord::new(DatasetId::TinyImagenet, decode_jpeg(&f)?, Some(label as u16))?);
        }
    }

    let ann_raw = ingest.read("val/val_annotations.txt")?;
    let ann_path = ingest.path("val/val_annotations.txt");
    let mut val = Vec::with_capacity(10_000);
    for line in String::from_utf8_lossy(&ann_raw).lines().filter(|l| !l.trim().is_empty()) {
        let mut fields = line.split('\t');
        let (Some(file), Some(wnid)) = (fields.next(), fields.next()) else {
            return Err(Error::ingest(&ann_path, format!("malformed line '{line}'")));
        };
        let label = *label_of
            .get(wnid)
            .ok_or_else(|| Error::ingest(&ann_path, format!("unknown class id {wnid}")))?;
        let img = ingest.path(&format!("val/images/{file}"));
        val.push(ImageRecord::new(DatasetId::TinyImagenet, decode_jpeg(&img)?, Some(label))?);
    }
    ingest
        .notes
        .push("probe test split is the public validation split; test labels are not published".into());
    let d = ingest.dataset;
    Ok(BTreeMap::from([
        (SplitPart::Train, Arc::new(MemorySource::new(d, train)?) as Arc<dyn ImageSource>),
        (SplitPart::Validation, Arc::new(MemorySource::new(d, val)?) as Arc<dyn ImageSource>),
    ]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_to_hwc_interleaves() {
        let side = 2;
        let planar: Vec<u8> = (0..12).collect();
        assert_eq!(planar_to_hwc(&planar, side), vec![0, 4, 8, 1, 5, 9, 2, 6, 10, 3, 7, 11]);
    }

    #[test]
    fn missing_root_is_fatal_with_path() {
        let err = load(DatasetId::Cifar10, Path::new("/definitely/not/here"), &IngestOptions::default())
            .unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here"));
    }

    #[test]
    fn truncated_cifar_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for i in 1..=5 {
            std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), vec![0u8; 3073]).unwrap();
        }
        std::fs::write(dir.path().join("test_batch.bin"), vec![0u8; 3000]).unwrap();
        let err = load(DatasetId::Cifar10, dir.path(), &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Ingest { .. }), "{err}");
        assert!(err.to_string().contains("test_batch.bin"));
    }
}
