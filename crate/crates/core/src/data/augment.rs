//! Training-time image augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FloatImage;
use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Search,
    Retrain,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    pub flip_prob: f64,
    pub pad: bool,
    pub padding: usize,
    pub random_erasing: bool,
    /// Erased area as a fraction of the image, `[min, max]`.
    pub erase_area: (f64, f64),
    pub normalize: bool,
}

impl AugmentConfig {
    pub fn for_phase(phase: Phase) -> Self {
        let search = phase == Phase::Search;
        AugmentConfig {
            flip: true,
            flip_prob: 0.5,
            pad: search,
            padding: 10,
            random_erasing: search,
            erase_area: (0.02, 0.2),
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("augment flip_prob must be in [0, 1], got {}", self.flip_prob)));
        }
        let (lo, hi) = self.erase_area;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("augment erase_area must satisfy 0 < min <= max <= 1, got ({lo}, {hi})")));
        }
        Ok(())
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Normalization {
    /// Statistics over every pixel of `images`.
    pub fn fit(images: &[FloatImage]) -> Self {
        let mut mean = [0.0; 3];
        let mut std = [1.0; 3];
        for c in 0..3 {
            let n: usize = images.iter().map(|i| i.height * i.width).sum();
            if n == 0 {
                continue;
            }
            let m = images.iter().flat_map(|i| i.plane(c)).sum::<f64>() / n as f64;
            let var = images.iter().flat_map(|i| i.plane(c)).map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
            mean[c] = m;
            std[c] = var.sqrt().max(1e-6);
        }
        Normalization { mean, std }
    }

    pub fn apply(&self, img: &mut FloatImage) {
        let hw = img.height * img.width;
        for c in 0..img.channels {
            let (m, s) = (self.mean[c.min(2)], self.std[c.min(2)]);
            img.data[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
}

/// Mirrors the image left-right, and the boxes with it.
pub fn hflip(img: &mut FloatImage, boxes: &mut [BBox]) {
    let w = img.width;
    for row in img.data.chunks_mut(w) {
        row.reverse();
    }
    for b in boxes {
        b.x = w as f64 - b.x - b.w;
    }
}

/// Zero-pads by `pad` pixels and crops a random window of the original size.
pub fn pad_and_crop(img: &mut FloatImage, boxes: &mut [BBox], pad: usize, rng: &mut SeededRng) {
    let (h, w) = (img.height, img.width);
    let dy = rng.random_range(0..=2 * pad);
    let dx = rng.random_range(0..=2 * pad);
    let mut out = FloatImage::zeros(img.channels, h, w);
    for c in 0..img.channels {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    *out.at_mut(c, y, x) = img.at(c, sy as usize, sx as usize);
                }
            }
        }
    }
    *img = out;
    for b in boxes {
        *b = b.translated(pad as f64 - dx as f64, pad as f64 - dy as f64).clamp_to(w as f64, h as f64);
    }
}

/// Erased rectangle `(x, y, w, h)` in whole pixels.
pub type EraseRect = (usize, usize, usize, usize);

/// Picks a rectangle covering an `area` fraction of the image, fully inside it.
pub fn erase_rect(height: usize, width: usize, area: (f64, f64), rng: &mut SeededRng) -> EraseRect {
    let total = (height * width) as f64;
    for _ in 0..100 {
        let a = rng.random_range(area.0..=area.1) * total;
        let aspect = rng.random_range(0.3f64.ln()..3.3f64.ln()).exp();
        let eh = (a * aspect).sqrt().round() as usize;
        let ew = (a / aspect).sqrt().round() as usize;
        if eh >= 1 && ew >= 1 && eh <= height && ew <= width {
            let y = rng.random_range(0..=height - eh);
            let x = rng.random_range(0..=width - ew);
            return (x, y, ew, eh);
        }
    }
    let side = ((area.0 * total).sqrt().round() as usize).clamp(1, height.min(width));
    let y = rng.random_range(0..=height - side);
    let x = rng.random_range(0..=width - side);
    (x, y, side, side)
}

pub fn random_erase(img: &mut FloatImage, area: (f64, f64), fill: [f64; 3], rng: &mut SeededRng) -> EraseRect {
    let r @ (x, y, w, h) = erase_rect(img.height, img.width, area, rng);
    for c in 0..img.channels {
        for yy in y..y + h {
            for xx in x..x + w {
                *img.at_mut(c, yy, xx) = fill[c.min(2)];
            }
        }
    }
    r
}

/// Applies the enabled transforms in order: flip, pad-and-crop, erasing, normalization.
pub fn augment(img: &mut FloatImage, boxes: &mut [BBox], cfg: &AugmentConfig, norm: &Normalization, rng: &mut SeededRng) {
    if cfg.flip && rng.random_bool(cfg.flip_prob) {
        hflip(img, boxes);
    }
    if cfg.pad && cfg.padding > 0 {
        pad_and_crop(img, boxes, cfg.padding, rng);
    }
    if cfg.random_erasing {
        random_erase(img, cfg.erase_area, norm.mean, rng);
    }
    if cfg.normalize {
        norm.apply(img);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn ramp(h: usize, w: usize) -> FloatImage {
        let data = (0..3 * h * w).map(|i| (i % 97) as f64 / 97.0).collect();
        FloatImage::new(3, h, w, data).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let orig = ramp(5, 7);
        let mut img = orig.clone();
        let b0 = BBox::new(1.0, 2.0, 3.0, 1.0);
        let mut boxes = [b0];
        hflip(&mut img, &mut boxes);
        assert_eq!(boxes[0].x, 3.0);
        assert_ne!(img, orig);
        hflip(&mut img, &mut boxes);
        assert_eq!(img, orig);
        assert_eq!(boxes[0], b0);
    }

    #[test]
    fn phase_flags() {
        let s = AugmentConfig::for_phase(Phase::Search);
        assert!(s.flip && s.pad && s.random_erasing && s.normalize);
        assert_eq!((s.flip_prob, s.padding), (0.5, 10));
        let r = AugmentConfig::for_phase(Phase::Retrain);
        assert!(r.flip && r.normalize && !r.pad && !r.random_erasing);
    }

    #[test]
    fn normalizing_the_fit_set_standardizes_it() {
        let imgs: Vec<FloatImage> = (0..4).map(|k| ramp(6 + k, 6)).collect();
        let norm = Normalization::fit(&imgs);
        let mut out = imgs.clone();
        out.iter_mut().for_each(|i| norm.apply(i));
        let after = Normalization::fit(&out);
        for c in 0..3 {
            assert!(after.mean[c].abs() < 1e-3);
            assert!((after.std[c] - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn erase_rect_stays_inside() {
        let mut rng = SeededRng::seed_from_u64(9);
        for _ in 0..10_000 {
            let (x, y, w, h) = erase_rect(32, 24, (0.02, 0.2), &mut rng);
            assert!(w >= 1 && h >= 1 && x + w <= 24 && y + h <= 32);
        }
    }

    #[test]
    fn pad_and_crop_moves_content_with_boxes() {
        let mut rng = SeededRng::seed_from_u64(4);
        let mut img = ramp(16, 16);
        let mut boxes = [BBox::new(4.0, 4.0, 4.0, 4.0)];
        pad_and_crop(&mut img, &mut boxes, 10, &mut rng);
        assert_eq!((img.height, img.width), (16, 16));
        assert!(boxes[0].x >= 0.0 && boxes[0].x + boxes[0].w <= 16.0);
    }
}
