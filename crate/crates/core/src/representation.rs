//! Inference-time representations: full image plus grid patches, or a single
//! pass for additive checkpoints.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::NormalizationStats;
use crate::imaging::Image;
use crate::model::{Checkpoint, Encoder};
use crate::nn::{Mode, Tensor};
use crate::patching::{ImageGeometry, PatchMode, PatchSpec};
use crate::{Error, Result};

/// Version of the composite layout (slot order below).
pub const LAYOUT_VERSION: u32 = 1;

/// Grid cells `(column, row)` in slot order: center, left, right, mid-top,
/// mid-bottom, then the corners top-left, top-right, bottom-left, bottom-right.
pub const SLOT_ORDER: [(usize, usize); 9] = [(1, 1), (0, 1), (2, 1), (1, 0), (1, 2), (0, 0), (2, 0), (0, 2), (2, 2)];

pub const SUPPORTED_PATCH_COUNTS: [usize; 6] = [0, 1, 3, 5, 7, 9];

/// Images encoded per forward call during feature extraction.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_patches: usize,
    pub patch_size_px: usize,
    pub specs: Vec<PatchSpec>,
}

/// Per-axis anchors `round(i * (W - s) / 2)` for `i = 0, 1, 2`.
pub fn grid_offsets(side: usize, s: usize) -> [usize; 3] {
    let span = (side - s) as f64;
    [0, (span / 2.0).round() as usize, side - s]
}

/// Selects `n_patches` cells of the 3x3 grid in slot order. With 7 patches the
/// last two are corners drawn with `seed`.
pub fn make_grid(geometry: ImageGeometry, patch_size_px: usize, n_patches: usize, seed: u64) -> Result<GridSpec> {
    if !SUPPORTED_PATCH_COUNTS.contains(&n_patches) {
        return Err(Error::Config(format!("n_patches {n_patches} not in {SUPPORTED_PATCH_COUNTS:?}")));
    }
    if patch_size_px == 0 || patch_size_px > geometry.width || patch_size_px > geometry.height {
        return Err(Error::Config(format!(
            "grid patch {patch_size_px} does not fit a {}x{} image",
            geometry.width, geometry.height
        )));
    }
    let xs = grid_offsets(geometry.width, patch_size_px);
    let ys = grid_offsets(geometry.height, patch_size_px);
    let cells: Vec<(usize, usize)> = if n_patches == 7 {
        let mut corners: Vec<usize> = sample(&mut ChaCha8Rng::seed_from_u64(seed), 4, 2).into_vec();
        corners.sort_unstable();
        SLOT_ORDER[..5].iter().copied().chain(corners.iter().map(|&c| SLOT_ORDER[5 + c])).collect()
    } else {
        SLOT_ORDER[..n_patches].to_vec()
    };
    let specs = cells
        .into_iter()
        .map(|(cx, cy)| PatchSpec::from_pixels(geometry, xs[cx], ys[cy], patch_size_px, 0))
        .collect();
    Ok(GridSpec {
        n_patches,
        patch_size_px,
        specs,
    })
}

/// Frozen encoder plus the statistics and mode it was trained with.
#[derive(Debug, Clone)]
pub struct Representer {
    pub encoder: Encoder,
    pub normalization: NormalizationStats,
    pub patch_mode: PatchMode,
}

impl Representer {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            encoder: ck.restore_model()?.encoder,
            normalization: ck.normalization,
            patch_mode: ck.patch_mode,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim()
    }

    fn encode_images(&mut self, images: &[Image]) -> Result<Tensor<f32>> {
        let s = self.encoder.config().input_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            if img.height() != s || img.width() != s {
                return Err(Error::Contract(format!(
                    "image is {}x{}, encoder expects {s}x{s}",
                    img.height(),
                    img.width()
                )));
            }
            data.extend(img.normalized(self.normalization.mean, self.normalization.std));
        }
        self.encoder
            .encode(&Tensor::from_vec(&[images.len(), 3, s, s], data), Mode::Eval)
    }

    /// `(1 + n) * D` vector per image: full image first, then the grid patches
    /// (each rescaled to full size) in slot order.
    pub fn compose(&mut self, images: &[Image], grid: &GridSpec) -> Result<Vec<Vec<f32>>> {
        if self.patch_mode == PatchMode::Additive {
            return Err(Error::Config(
                "additive-mode checkpoints are evaluated with a single pass; use single_pass_representation".into(),
            ));
        }
        let d = self.feature_dim();
        let per = 1 + grid.n_patches;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let mut views = Vec::with_capacity(chunk.len() * per);
            for img in chunk {
                views.push(img.clone());
                for spec in &grid.specs {
                    let s = spec.size_px;
                    views.push(
                        img.crop(spec.pixel_y(), spec.pixel_x(), s, s)
                            .resize_bilinear(img.height(), img.width()),
                    );
                }
            }
            let reps = self.encode_images(&views)?;
            for i in 0..chunk.len() {
                let mut v = Vec::with_capacity(per * d);
                for j in 0..per {
                    v.extend_from_slice(reps.item(i * per + j));
                }
                out.push(v);
            }
        }
        Ok(out)
    }

    /// One encoder pass per image on the unmodified input.
    pub fn single_pass(&mut self, images: &[Image]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let reps = self.encode_images(chunk)?;
            out.extend((0..chunk.len()).map(|i| reps.item(i).to_vec()));
        }
        Ok(out)
    }

    /// Representation for the probe: single pass for additive checkpoints,
    /// otherwise the composite over `n_patches` grid cells.
    pub fn features(&mut self, images: &[Image], patch_size_px: usize, n_patches: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
        match self.patch_mode {
            PatchMode::Additive if n_patches == 0 => self.single_pass(images),
            PatchMode::Additive => Err(Error::Config(format!(
                "additive-mode checkpoints take no grid patches (asked for {n_patches})"
            ))),
            PatchMode::Rescaled => {
                let Some(first) = images.first() else {
                    return Ok(Vec::new());
                };
                let geometry = ImageGeometry {
                    width: first.width(),
                    height: first.height(),
                };
                let grid = make_grid(geometry, patch_size_px, n_patches, seed)?;
                self.compose(images, &grid)
            }
        }
    }
}

/// See [`Representer::compose`].
pub fn compose_representation(image: &Image, representer: &mut Representer, grid: &GridSpec) -> Result<Vec<f32>> {
    Ok(representer.compose(std::slice::from_ref(image), grid)?.remove(0))
}

/// See [`Representer::single_pass`].
pub fn single_pass_representation(image: &Image, representer: &mut Representer) -> Result<Vec<f32>> {
    Ok(representer.single_pass(std::slice::from_ref(image))?.remove(0))
}

const EMBED_MAGIC: &[u8; 8] = b"SPREMB\0\0";

/// Rows of composite vectors with their layout metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub feature_dim: u32,
    pub n_patches: u32,
    pub rows: Vec<Vec<f32>>,
}

impl EmbeddingFile {
    pub fn width(&self) -> usize {
        (1 + self.n_patches as usize) * self.feature_dim as usize
    }

    /// Magic, `u32` layout version, `u32` D, `u32` n, `u64` row count, then
    /// row-major little-endian `f32`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let w = self.width();
        if let Some(bad) = self.rows.iter().find(|r| r.len() != w) {
            return Err(Error::Contract(format!("row of width {} in a {w}-wide embedding", bad.len())));
        }
        let mut out = Vec::with_capacity(28 + 4 * w * self.rows.len());
        out.extend_from_slice(EMBED_MAGIC);
        out.extend_from_slice(&LAYOUT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.feature_dim.to_le_bytes());
        out.extend_from_slice(&self.n_patches.to_le_bytes());
        out.extend_from_slice(&(self.rows.len() as u64).to_le_bytes());
        for r in &self.rows {
            for v in r {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 28 || &bytes[..8] != EMBED_MAGIC {
            return Err(Error::Contract("not an embedding file".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != LAYOUT_VERSION {
            return Err(Error::Contract(format!("embedding layout version {version}, expected {LAYOUT_VERSION}")));
        }
        let (feature_dim, n_patches) = (u32_at(12), u32_at(16));
        let rows = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
        let w = (1 + n_patches as usize) * feature_dim as usize;
        if bytes.len() != 28 + 4 * w * rows {
            return Err(Error::Contract(format!("embedding body has {} bytes, expected {}", bytes.len() - 28, 4 * w * rows)));
        }
        let data: Vec<f32> = bytes[28..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            feature_dim,
            n_patches,
            rows: if w == 0 { vec![Vec::new(); rows] } else { data.chunks(w).map(<[f32]>::to_vec).collect() },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SpatialModel;
    use crate::nn::resnet::ResNetLayout;

    fn covered(side: usize, s: usize) -> bool {
        let grid = make_grid(ImageGeometry::square(side), s, 9, 0).unwrap();
        let mut mask = vec![false; side * side];
        for p in &grid.specs {
            for y in p.pixel_y()..p.pixel_y() + s {
                for x in p.pixel_x()..p.pixel_x() + s {
                    mask[y * side + x] = true;
                }
            }
        }
        mask.into_iter().all(|m| m)
    }

    #[test]
    fn offsets_and_coverage() {
        assert_eq!(grid_offsets(64, 24), [0, 20, 40]);
        assert_eq!(grid_offsets(32, 13), [0, 10, 19]);
        assert_eq!(grid_offsets(96, 36), [0, 30, 60]);
        for (w, s) in [(64, 24), (32, 13), (96, 36)] {
            assert!(covered(w, s));
        }
    }

    #[test]
    fn slot_order() {
        let g = make_grid(ImageGeometry::square(64), 24, 5, 0).unwrap();
        let px: Vec<_> = g.specs.iter().map(|p| (p.pixel_x(), p.pixel_y())).collect();
        assert_eq!(px, vec![(20, 20), (0, 20), (40, 20), (20, 0), (20, 40)]);
        let one = make_grid(ImageGeometry::square(64), 24, 1, 0).unwrap();
        assert_eq!((one.specs[0].pixel_x(), one.specs[0].pixel_y()), (20, 20));
    }

    #[test]
    fn seven_patches_pick_two_seeded_corners() {
        let a = make_grid(ImageGeometry::square(32), 13, 7, 5).unwrap();
        let b = make_grid(ImageGeometry::square(32), 13, 7, 5).unwrap();
        assert_eq!(a, b);
        let corners: Vec<_> = a.specs[5..].iter().map(|p| (p.pixel_x(), p.pixel_y())).collect();
        assert_eq!(corners.len(), 2);
        assert_ne!(corners[0], corners[1]);
        assert!(corners.iter().all(|&(x, y)| x != 10 && y != 10));
    }

    #[test]
    fn unsupported_counts_and_oversize() {
        assert!(make_grid(ImageGeometry::square(32), 13, 4, 0).is_err());
        assert!(make_grid(ImageGeometry::square(32), 33, 1, 0).is_err());
    }

    fn representer(mode: PatchMode) -> Representer {
        use rand::SeedableRng;
        let cfg = crate::model::EncoderConfig {
            architecture: ResNetLayout::Cifar {
                blocks_per_stage: 1,
                base_width: 4,
            },
            input_size: 32,
        };
        let model = SpatialModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        Representer {
            encoder: model.encoder,
            normalization: NormalizationStats::IDENTITY,
            patch_mode: mode,
        }
    }

    #[test]
    fn composite_width_passes_and_determinism() {
        let mut r = representer(PatchMode::Rescaled);
        let imgs: Vec<Image> = crate::datasets::synthetic::records(crate::datasets::DatasetId::Cifar10, 3, 1)
            .unwrap()
            .iter()
            .map(|r| r.to_image())
            .collect();
        for n in SUPPORTED_PATCH_COUNTS {
            r.encoder.reset_counter();
            let f = r.features(&imgs, 13, n, 0).unwrap();
            assert_eq!(f[0].len(), (1 + n) * 16);
            assert_eq!(r.encoder.counter().views_encoded, (3 * (1 + n)) as u64);
        }
        let a = r.features(&imgs, 13, 9, 0).unwrap();
        let b = r.features(&imgs, 13, 9, 0).unwrap();
        assert_eq!(a, b);
        let single = compose_representation(&imgs[1], &mut r, &make_grid(ImageGeometry::square(32), 13, 9, 0).unwrap()).unwrap();
        for (x, y) in single.iter().zip(&a[1]) {
            assert!((x - y).abs() <= 1e-5 * y.abs().max(1.0));
        }
    }

    #[test]
    fn additive_uses_one_pass_and_refuses_grids() {
        let mut r = representer(PatchMode::Additive);
        let img = Image::filled(32, 32, [0.3, 0.6, 0.9]);
        r.encoder.reset_counter();
        let v = single_pass_representation(&img, &mut r).unwrap();
        assert_eq!(v.len(), 16);
        assert_eq!(r.encoder.counter().views_encoded, 1);
        let grid = make_grid(ImageGeometry::square(32), 13, 9, 0).unwrap();
        assert!(matches!(compose_representation(&img, &mut r, &grid), Err(Error::Config(_))));
    }

    #[test]
    fn embedding_round_trip_is_bit_exact() {
        let f = EmbeddingFile {
            feature_dim: 2,
            n_patches: 1,
            rows: vec![vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25], vec![0.1, 0.2, 0.3, 0.4]],
        };
        let back = EmbeddingFile::from_bytes(&f.to_bytes().unwrap()).unwrap();
        assert_eq!(
            back.rows.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>(),
            f.rows.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!((back.feature_dim, back.n_patches), (2, 1));
        let mut bad = f.to_bytes().unwrap();
        bad[8] = 9;
        assert!(EmbeddingFile::from_bytes(&bad).is_err());
    }
}
