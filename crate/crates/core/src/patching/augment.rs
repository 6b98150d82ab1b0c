use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::Image;

/// Color jitter strengths; factors are drawn from `[max(0, 1 - s), 1 + s]`
/// and the hue shift from `[-hue, hue]` turns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            brightness: 0.8,
            contrast: 0.8,
            saturation: 0.8,
            hue: 0.2,
        }
    }
}

impl ColorJitter {
    /// The four adjustments in a random order, as torchvision does.
    pub fn apply(&self, image: &Image, rng: &mut impl Rng) -> Image {
        let factor = |rng: &mut dyn rand::RngCore, s: f32| {
            if s > 0.0 {
                rng.random_range((1.0 - s).max(0.0)..=1.0 + s)
            } else {
                1.0
            }
        };
        let b = factor(rng, self.brightness);
        let c = factor(rng, self.contrast);
        let s = factor(rng, self.saturation);
        let h = if self.hue > 0.0 {
            rng.random_range(-self.hue..=self.hue)
        } else {
            0.0
        };
        let mut order = [0u8, 1, 2, 3];
        order.shuffle(rng);
        let mut out = image.clone();
        for op in order {
            out = match op {
                0 if self.brightness > 0.0 => out.adjust_brightness(b),
                1 if self.contrast > 0.0 => out.adjust_contrast(c),
                2 if self.saturation > 0.0 => out.adjust_saturation(s),
                3 if self.hue > 0.0 => out.adjust_hue(h),
                _ => out,
            };
        }
        out
    }
}

/// Full-image augmentation: random resized crop, horizontal flip, color
/// jitter, grayscale, applied in that order. Patches get jitter and grayscale
/// only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop_prob: f64,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub jitter: ColorJitter,
    pub grayscale_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_prob: 1.0,
            crop_scale: (0.08, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            jitter: ColorJitter::default(),
            grayscale_prob: 0.2,
        }
    }
}

impl AugmentConfig {
    /// Every transform probability set to zero.
    pub fn disabled() -> Self {
        Self {
            crop_prob: 0.0,
            flip_prob: 0.0,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            ..Self::default()
        }
    }

    pub(crate) fn color_only(&self, image: &Image, rng: &mut impl Rng) -> Image {
        let mut out = if rng.random_bool(self.jitter_prob.clamp(0.0, 1.0)) {
            self.jitter.apply(image, rng)
        } else {
            image.clone()
        };
        if rng.random_bool(self.grayscale_prob.clamp(0.0, 1.0)) {
            out = out.grayscale();
        }
        out
    }

    /// Crop box `(top, left, height, width)` following torchvision's
    /// RandomResizedCrop: ten area/aspect draws, then a ratio-clamped centre crop.
    fn crop_box(&self, h: usize, w: usize, rng: &mut impl Rng) -> (usize, usize, usize, usize) {
        let area = (h * w) as f64;
        let (lr0, lr1) = (self.crop_ratio.0.ln(), self.crop_ratio.1.ln());
        for _ in 0..10 {
            let target = area * rng.random_range(self.crop_scale.0..=self.crop_scale.1);
            let ratio = rng.random_range(lr0..=lr1).exp();
            let cw = (target * ratio).sqrt().round() as usize;
            let ch = (target / ratio).sqrt().round() as usize;
            if cw > 0 && cw <= w && ch > 0 && ch <= h {
                let top = rng.random_range(0..=h - ch);
                let left = rng.random_range(0..=w - cw);
                return (top, left, ch, cw);
            }
        }
        let in_ratio = w as f64 / h as f64;
        let (ch, cw) = if in_ratio < self.crop_ratio.0 {
            ((w as f64 / self.crop_ratio.0).round() as usize, w)
        } else if in_ratio > self.crop_ratio.1 {
            (h, (h as f64 * self.crop_ratio.1).round() as usize)
        } else {
            (h, w)
        };
        ((h - ch) / 2, (w - cw) / 2, ch, cw)
    }
}

/// One augmented full-image view at `out_h x out_w`.
pub fn full_image_augment(image: &Image, config: &AugmentConfig, out_h: usize, out_w: usize, rng: &mut impl Rng) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut out = if rng.random_bool(config.crop_prob.clamp(0.0, 1.0)) {
        let (top, left, ch, cw) = config.crop_box(h, w, rng);
        image.crop(top, left, ch, cw).resize_bilinear(out_h, out_w)
    } else {
        image.resize_bilinear(out_h, out_w)
    };
    if rng.random_bool(config.flip_prob.clamp(0.0, 1.0)) {
        out = out.flip_horizontal();
    }
    config.color_only(&out, rng)
}

/// Probe-time affine augmentation (no flip, no crop). Angles in degrees,
/// translation as a fraction of the side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineConfig {
    pub rotation_deg: f32,
    pub translate: f32,
    pub scale: (f32, f32),
    pub shear_deg: f32,
}

impl Default for AffineConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            translate: 0.1,
            scale: (0.9, 1.1),
            shear_deg: 10.0,
        }
    }
}

impl AffineConfig {
    pub fn apply(&self, image: &Image, rng: &mut impl Rng) -> Image {
        let sym = |rng: &mut dyn rand::RngCore, r: f32| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let rot = sym(rng, self.rotation_deg);
        let tx = (sym(rng, self.translate) * image.width() as f32).round();
        let ty = (sym(rng, self.translate) * image.height() as f32).round();
        let scale = if self.scale.1 > self.scale.0 {
            rng.random_range(self.scale.0..=self.scale.1)
        } else {
            self.scale.0
        };
        let shear = sym(rng, self.shear_deg);
        image.affine(rot, tx, ty, scale, shear)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        Image::from_hwc_u8(32, 32, &crate::datasets::synthetic::render(32, 4, 10, &mut rng))
    }

    #[test]
    fn disabled_pipeline_is_a_resize() {
        let img = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = full_image_augment(&img, &AugmentConfig::disabled(), 32, 32, &mut rng);
        assert_eq!(out, img.resize_bilinear(32, 32));
        let up = full_image_augment(&img, &AugmentConfig::disabled(), 48, 48, &mut rng);
        assert_eq!(up, img.resize_bilinear(48, 48));
    }

    #[test]
    fn distinct_rng_states_give_distinct_views() {
        let img = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AugmentConfig::default();
        let views: Vec<Image> = (0..4).map(|_| full_image_augment(&img, &cfg, 32, 32, &mut rng)).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(views[i], views[j]);
            }
        }
    }

    #[test]
    fn crop_boxes_stay_inside() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let (t, l, h, w) = cfg.crop_box(32, 32, &mut rng);
            assert!(h > 0 && w > 0 && t + h <= 32 && l + w <= 32);
        }
    }

    #[test]
    fn jitter_keeps_range() {
        let img = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let out = ColorJitter::default().apply(&img, &mut rng);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_affine_is_identity() {
        let img = sample();
        let cfg = AffineConfig {
            rotation_deg: 0.0,
            translate: 0.0,
            scale: (1.0, 1.0),
            shear_deg: 0.0,
        };
        let out = cfg.apply(&img, &mut ChaCha8Rng::seed_from_u64(0));
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
