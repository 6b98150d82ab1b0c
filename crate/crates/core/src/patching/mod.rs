//! Patch sampling, the overlap predicate, relative-distance targets and
//! patch view extraction.

mod augment;

pub use augment::{full_image_augment, AffineConfig, AugmentConfig, ColorJitter};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::NormalizationStats;
use crate::imaging::Image;
use crate::{Error, Result};

/// Default number of rejection-sampling attempts for the second patch.
pub const DEFAULT_REJECTION_ATTEMPTS: usize = 100;

/// Default patch side for a square image: 13 at 32 pixels, 24 at 64, 36 at 96.
pub fn default_patch_size(image_side: usize) -> usize {
    match image_side {
        32 => 13,
        s => (s as f64 * 24.0 / 64.0).round() as usize,
    }
}

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub width: usize,
    pub height: usize,
}

impl ImageGeometry {
    pub fn square(side: usize) -> Self {
        Self {
            width: side,
            height: side,
        }
    }

    /// Largest patch side for which two non-overlapping placements exist.
    pub fn max_non_overlapping_size(&self) -> usize {
        (self.width.max(self.height) / 2).min(self.width.min(self.height) - 1)
    }
}

/// Square patch with a normalized top-left corner (x rightward, y downward).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub x: f64,
    pub y: f64,
    pub size_px: usize,
    pub image_index: usize,
    pub geometry: ImageGeometry,
}

impl PatchSpec {
    /// Patch whose top-left pixel is `(px, py)`.
    pub fn from_pixels(geometry: ImageGeometry, px: usize, py: usize, size_px: usize, image_index: usize) -> Self {
        Self {
            x: px as f64 / geometry.width as f64,
            y: py as f64 / geometry.height as f64,
            size_px,
            image_index,
            geometry,
        }
    }

    pub fn pixel_x(&self) -> usize {
        (self.x * self.geometry.width as f64).round() as usize
    }

    pub fn pixel_y(&self) -> usize {
        (self.y * self.geometry.height as f64).round() as usize
    }

    pub fn in_bounds(&self) -> bool {
        let g = self.geometry;
        let s = self.size_px as f64;
        self.size_px < g.width
            && self.size_px < g.height
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x * g.width as f64 + s <= g.width as f64 + EPS
            && self.y * g.height as f64 + s <= g.height as f64 + EPS
    }
}

/// True iff the two `s x s` rectangles share at least one pixel.
/// Touching edges do not overlap.
pub fn overlaps(a: &PatchSpec, b: &PatchSpec) -> bool {
    let s = a.size_px.max(b.size_px) as f64;
    let dx = (a.x - b.x).abs() * a.geometry.width as f64;
    let dy = (a.y - b.y).abs() * a.geometry.height as f64;
    dx < s - EPS && dy < s - EPS
}

/// `(a.x - b.x, a.y - b.y)`.
pub fn relative_distance(a: &PatchSpec, b: &PatchSpec) -> (f64, f64) {
    (a.x - b.x, a.y - b.y)
}

fn check_feasible(geometry: ImageGeometry, size_px: usize) -> Result<()> {
    let max = geometry.max_non_overlapping_size();
    if size_px == 0 || size_px > max {
        return Err(Error::Config(format!(
            "patch size {size_px} admits no two non-overlapping placements in a {}x{} image; maximum feasible size is {max}",
            geometry.width, geometry.height
        )));
    }
    Ok(())
}

/// A first patch at `(px, py)` has a non-overlapping partner iff it leaves a
/// gap of at least `s` on some side.
fn has_partner(geometry: ImageGeometry, px: usize, py: usize, s: usize) -> bool {
    px >= s || px + 2 * s <= geometry.width || py >= s || py + 2 * s <= geometry.height
}

/// Samples `n` patch positions on the integer pixel grid. The first two never
/// overlap; the rest are unconstrained.
pub fn sample_patch_positions(
    geometry: ImageGeometry,
    n: usize,
    size_px: usize,
    image_index: usize,
    max_attempts: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PatchSpec>> {
    check_feasible(geometry, size_px)?;
    let (xmax, ymax) = (geometry.width - size_px, geometry.height - size_px);
    let uniform = |rng: &mut dyn rand::RngCore| {
        PatchSpec::from_pixels(
            geometry,
            rng.random_range(0..=xmax),
            rng.random_range(0..=ymax),
            size_px,
            image_index,
        )
    };
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(out);
    }
    let mut first = None;
    for _ in 0..max_attempts {
        let cand = uniform(rng);
        if has_partner(geometry, cand.pixel_x(), cand.pixel_y(), size_px) {
            first = Some(cand);
            break;
        }
    }
    let first = first.unwrap_or_else(|| PatchSpec::from_pixels(geometry, 0, 0, size_px, image_index));
    out.push(first);
    if n == 1 {
        return Ok(out);
    }
    let mut second = None;
    for _ in 0..max_attempts {
        let cand = uniform(rng);
        if !overlaps(&first, &cand) {
            second = Some(cand);
            break;
        }
    }
    let second = second.unwrap_or_else(|| farthest_placement(&first));
    out.push(second);
    for _ in 2..n {
        out.push(uniform(rng));
    }
    Ok(out)
}

/// In-bounds placement maximizing Chebyshev distance to `first`, scanning
/// row-major so ties resolve deterministically.
fn farthest_placement(first: &PatchSpec) -> PatchSpec {
    let g = first.geometry;
    let s = first.size_px;
    let (fx, fy) = (first.pixel_x() as i64, first.pixel_y() as i64);
    let mut best = (0usize, 0usize, -1i64);
    for py in 0..=g.height - s {
        for px in 0..=g.width - s {
            let d = (px as i64 - fx).abs().max((py as i64 - fy).abs());
            if d > best.2 {
                best = (px, py, d);
            }
        }
    }
    PatchSpec::from_pixels(g, best.0, best.1, s, first.image_index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    #[default]
    Rescaled,
    Additive,
}

/// Encoder-input-sized patch image plus where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchView {
    pub pixels: Image,
    pub spec: PatchSpec,
    pub mode: PatchMode,
}

impl PatchView {
    /// Normalized CHW encoder input. In additive mode only the patch region is
    /// normalized; the padding stays exactly zero.
    pub fn encoder_input(&self, stats: &NormalizationStats) -> Vec<f32> {
        let mut out = self.pixels.normalized(stats.mean, stats.std);
        if self.mode == PatchMode::Additive {
            let (h, w) = (self.pixels.height(), self.pixels.width());
            let (px, py, s) = (self.spec.pixel_x(), self.spec.pixel_y(), self.spec.size_px);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        if !(px..px + s).contains(&x) || !(py..py + s).contains(&y) {
                            out[(c * h + y) * w + x] = 0.0;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Cuts `spec` out of `image`, applies the patch augmentation subset (color
/// jitter and grayscale only) and rescales or zero-pads it to full size.
pub fn extract_patch_view(
    image: &Image,
    spec: &PatchSpec,
    mode: PatchMode,
    augment: &AugmentConfig,
    rng: &mut impl Rng,
) -> PatchView {
    let s = spec.size_px;
    let patch = image.crop(spec.pixel_y(), spec.pixel_x(), s, s);
    let patch = augment.color_only(&patch, rng);
    let pixels = match mode {
        PatchMode::Rescaled => patch.resize_bilinear(image.height(), image.width()),
        PatchMode::Additive => patch.pad_into(image.height(), image.width(), spec.pixel_y(), spec.pixel_x()),
    };
    PatchView {
        pixels,
        spec: *spec,
        mode,
    }
}
