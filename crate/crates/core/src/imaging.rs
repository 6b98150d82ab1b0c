//! Planar RGB float images and the deterministic pixel operations the
//! augmentation pipelines are built from.

/// Three-channel image, channel-major (`[C][H][W]`), intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

/// ITU-R 601 luma weights.
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; CHANNELS * height * width],
        }
    }

    pub fn from_chw(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), CHANNELS * height * width, "CHW buffer size");
        Self {
            height,
            width,
            data,
        }
    }

    /// Builds from interleaved 8-bit RGB (`[H][W][C]`), scaling to `[0, 1]`.
    pub fn from_hwc_u8(height: usize, width: usize, hwc: &[u8]) -> Self {
        assert_eq!(hwc.len(), CHANNELS * height * width, "HWC buffer size");
        let mut img = Self::zeros(height, width);
        let plane = height * width;
        for (i, px) in hwc.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                img.data[c * plane + i] = f32::from(px[c]) / 255.0;
            }
        }
        img
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(CHANNELS * plane);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Self::from_chw(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        assert!(top + height <= self.height && left + width <= self.width, "crop out of bounds");
        let mut out = Image::zeros(height, width);
        for c in 0..CHANNELS {
            for y in 0..height {
                let src = (c * self.height + top + y) * self.width + left;
                let dst = (c * height + y) * width;
                out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
            }
        }
        out
    }

    /// Places `self` on a zero canvas of `height x width` with its top-left at `(top, left)`.
    pub fn pad_into(&self, height: usize, width: usize, top: usize, left: usize) -> Image {
        assert!(top + self.height <= height && left + self.width <= width, "pad out of bounds");
        let mut out = Image::zeros(height, width);
        for c in 0..CHANNELS {
            for y in 0..self.height {
                let src = (c * self.height + y) * self.width;
                let dst = (c * height + top + y) * width + left;
                out.data[dst..dst + self.width].copy_from_slice(&self.data[src..src + self.width]);
            }
        }
        out
    }

    /// Bilinear resize with half-pixel centres and edge clamping (no antialiasing).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let axis = |dst: usize, scale: f32, len: usize| {
            let src = ((dst as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let t = (src - i0 as f32).clamp(0.0, 1.0);
            (i0, i1, t)
        };
        let xs: Vec<_> = (0..width).map(|x| axis(x, sx, self.width)).collect();
        let mut out = Image::zeros(height, width);
        for y in 0..height {
            let (y0, y1, ty) = axis(y, sy, self.height);
            for c in 0..CHANNELS {
                for (x, &(x0, x1, tx)) in xs.iter().enumerate() {
                    let top = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
                    let bot = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
                    out.set(c, y, x, top * (1.0 - ty) + bot * ty);
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        out
    }

    fn luma_plane(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        (0..plane)
            .map(|i| {
                LUMA[0] * self.data[i] + LUMA[1] * self.data[plane + i] + LUMA[2] * self.data[2 * plane + i]
            })
            .collect()
    }

    /// Luma replicated into all three channels.
    pub fn grayscale(&self) -> Image {
        let l = self.luma_plane();
        let mut data = Vec::with_capacity(self.data.len());
        for _ in 0..CHANNELS {
            data.extend_from_slice(&l);
        }
        Image::from_chw(self.height, self.width, data)
    }

    fn blend(&self, other: &[f32], factor: f32) -> Image {
        let data = self
            .data
            .iter()
            .zip(other)
            .map(|(&a, &b)| (factor * a + (1.0 - factor) * b).clamp(0.0, 1.0))
            .collect();
        Image::from_chw(self.height, self.width, data)
    }

    pub fn adjust_brightness(&self, factor: f32) -> Image {
        let zeros = vec![0.0; self.data.len()];
        self.blend(&zeros, factor)
    }

    pub fn adjust_contrast(&self, factor: f32) -> Image {
        let l = self.luma_plane();
        let mean = l.iter().sum::<f32>() / l.len().max(1) as f32;
        self.blend(&vec![mean; self.data.len()], factor)
    }

    pub fn adjust_saturation(&self, factor: f32) -> Image {
        let gray = self.grayscale();
        self.blend(&gray.data, factor)
    }

    /// Rotates hue by `shift` turns (`shift` in `[-0.5, 0.5]`).
    pub fn adjust_hue(&self, shift: f32) -> Image {
        let plane = self.height * self.width;
        let mut out = self.clone();
        for i in 0..plane {
            let rgb = [self.data[i], self.data[plane + i], self.data[2 * plane + i]];
            let (h, s, v) = rgb_to_hsv(rgb);
            let [r, g, b] = hsv_to_rgb(((h + shift) % 1.0 + 1.0) % 1.0, s, v);
            out.data[i] = r;
            out.data[plane + i] = g;
            out.data[2 * plane + i] = b;
        }
        out
    }

    /// Inverse-mapped affine warp about the image centre with bilinear
    /// sampling; samples outside the source read as zero.
    ///
    /// Forward map: scale, shear (x-shear by `shear_deg`), rotate by
    /// `rotation_deg` counter-clockwise, then translate by `(tx, ty)` pixels.
    pub fn affine(&self, rotation_deg: f32, tx: f32, ty: f32, scale: f32, shear_deg: f32) -> Image {
        let (cy, cx) = ((self.height as f32 - 1.0) / 2.0, (self.width as f32 - 1.0) / 2.0);
        let (sin, cos) = (-rotation_deg.to_radians()).sin_cos();
        let shear = shear_deg.to_radians().tan();
        // Forward matrix A = R * Sh * S, acting on (x, y) relative to centre.
        let a = [
            [cos * scale, (cos * shear - sin) * scale],
            [sin * scale, (sin * shear + cos) * scale],
        ];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let inv = [
            [a[1][1] / det, -a[0][1] / det],
            [-a[1][0] / det, a[0][0] / det],
        ];
        let mut out = Image::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let dx = x as f32 - cx - tx;
                let dy = y as f32 - cy - ty;
                let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
                let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
                for c in 0..CHANNELS {
                    out.set(c, y, x, self.sample_zero_padded(c, sy, sx));
                }
            }
        }
        out
    }

    fn sample_zero_padded(&self, c: usize, y: f32, x: f32) -> f32 {
        let (y0, x0) = (y.floor(), x.floor());
        let (ty, tx) = (y - y0, x - x0);
        let mut acc = 0.0;
        for (oy, wy) in [(0.0, 1.0 - ty), (1.0, ty)] {
            for (ox, wx) in [(0.0, 1.0 - tx), (1.0, tx)] {
                let (yy, xx) = (y0 + oy, x0 + ox);
                if yy >= 0.0 && xx >= 0.0 && (yy as usize) < self.height && (xx as usize) < self.width {
                    acc += wy * wx * self.get(c, yy as usize, xx as usize);
                }
            }
        }
        acc
    }

    /// Per-channel `(x - mean) / std`, returned as a flat CHW buffer.
    pub fn normalized(&self, mean: [f32; 3], std: [f32; 3]) -> Vec<f32> {
        let plane = self.height * self.width;
        self.data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / plane;
                (v - mean[c]) / std[c]
            })
            .collect()
    }
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, v)
}

pub(crate) fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..3 * h * w).map(|i| (i % 97) as f32 / 96.0).collect();
        Image::from_chw(h, w, data)
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let img = Image::filled(13, 13, [0.2, 0.5, 0.9]);
        let out = img.resize_bilinear(32, 32);
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    assert!((out.get(c, y, x) - [0.2, 0.5, 0.9][c]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = ramp(8, 8);
        assert_eq!(img.resize_bilinear(8, 8), img);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp(5, 7);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_ne!(img.flip_horizontal(), img);
    }

    #[test]
    fn hsv_round_trip() {
        for rgb in [[0.1, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.8, 0.7, 0.1]] {
            let (h, s, v) = rgb_to_hsv(rgb);
            let back = hsv_to_rgb(h, s, v);
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-5, "{rgb:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn zero_hue_shift_and_unit_factors_are_identity() {
        let img = ramp(4, 4);
        let close = |a: &Image, b: &Image| a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-5);
        assert!(close(&img.adjust_hue(0.0), &img));
        assert!(close(&img.adjust_brightness(1.0), &img));
        assert!(close(&img.adjust_contrast(1.0), &img));
        assert!(close(&img.adjust_saturation(1.0), &img));
    }

    #[test]
    fn identity_affine_preserves_pixels() {
        let img = ramp(6, 6);
        let out = img.affine(0.0, 0.0, 0.0, 1.0, 0.0);
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn integer_translation_shifts_content() {
        let img = ramp(6, 6);
        let out = img.affine(0.0, 2.0, 1.0, 1.0, 0.0);
        assert!((out.get(1, 3, 4) - img.get(1, 2, 2)).abs() < 1e-5);
        assert_eq!(out.get(0, 0, 0), 0.0);
    }

    #[test]
    fn pad_then_crop_recovers_patch() {
        let patch = ramp(3, 3);
        let canvas = patch.pad_into(8, 8, 2, 4);
        assert_eq!(canvas.crop(2, 4, 3, 3), patch);
        let total: f32 = canvas.data().iter().sum();
        let inside: f32 = patch.data().iter().sum();
        assert_eq!(total, inside);
    }
}
