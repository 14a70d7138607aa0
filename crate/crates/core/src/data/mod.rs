//! Tracking sequences, crop extraction, augmentation and loading.

pub mod augment;
pub mod loader;
pub mod synthetic;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::metrics::BBox;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig, Normalization, Phase};
pub use loader::{load_dataset, load_sequence, parse_groundtruth, save_sequence};
pub use synthetic::{generate_dataset, NuisanceEvent, NuisanceKind, SyntheticConfig};

/// One tracked pedestrian: single-channel frames with a box per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub identity: usize,
    pub frames: Vec<GrayImage>,
    pub boxes: Vec<BBox>,
    pub nuisances: Vec<NuisanceEvent>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(width, height)` of the first frame.
    pub fn frame_size(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), |f| (f.width() as usize, f.height() as usize))
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.boxes.len() {
            return Err(Error::Validation(format!(
                "sequence {}: {} frames but {} boxes",
                self.name,
                self.frames.len(),
                self.boxes.len()
            )));
        }
        if self.frames.len() < 2 {
            return Err(Error::Validation(format!("sequence {} needs at least 2 frames", self.name)));
        }
        let size = self.frames[0].dimensions();
        if self.frames.iter().any(|f| f.dimensions() != size) {
            return Err(Error::Validation(format!("sequence {}: frame sizes differ", self.name)));
        }
        if self.boxes.iter().any(|b| !b.is_finite() || b.w < 0.0 || b.h < 0.0) {
            return Err(Error::Validation(format!("sequence {}: invalid box", self.name)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn frame_count(&self) -> usize {
        self.sequences.iter().map(Sequence::len).sum()
    }

    pub fn identities(&self) -> usize {
        self.sequences.iter().map(|s| s.identity + 1).max().unwrap_or(0)
    }

    /// Every `(sequence, frame)` pair in order.
    pub fn samples(&self) -> Vec<(usize, usize)> {
        self.sequences
            .iter()
            .enumerate()
            .flat_map(|(s, seq)| (0..seq.len()).map(move |f| (s, f)))
            .collect()
    }
}

/// Planar float image, `channels x height x width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloatImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_err!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            ));
        }
        Ok(FloatImage {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FloatImage {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.height * self.width..][..self.height * self.width]
    }
}

fn pixel(frame: &GrayImage, x: i64, y: i64) -> f64 {
    let x = x.clamp(0, frame.width() as i64 - 1) as u32;
    let y = y.clamp(0, frame.height() as i64 - 1) as u32;
    frame.get_pixel(x, y).0[0] as f64 / 255.0
}

/// Bilinear sample at continuous pixel coordinates, clamped at the borders.
pub fn sample_bilinear(frame: &GrayImage, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as i64, y0 as i64);
    let top = pixel(frame, xi, yi) * (1.0 - fx) + pixel(frame, xi + 1, yi) * fx;
    let bottom = pixel(frame, xi, yi + 1) * (1.0 - fx) + pixel(frame, xi + 1, yi + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples the region `b` to `size x size`, replicating intensity to 3 channels.
pub fn crop_resize(frame: &GrayImage, b: &BBox, size: usize) -> FloatImage {
    let mut img = FloatImage::zeros(3, size, size);
    let (sx, sy) = (b.w / size as f64, b.h / size as f64);
    for oy in 0..size {
        let y = b.y + (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..size {
            let x = b.x + (ox as f64 + 0.5) * sx - 0.5;
            let v = sample_bilinear(frame, x, y);
            for c in 0..3 {
                *img.at_mut(c, oy, ox) = v;
            }
        }
    }
    img
}

/// Stacks equally sized images into an `N x C x H x W` tensor.
pub fn stack(images: &[FloatImage]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| shape_err!("cannot stack zero images"))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(shape_err!(
                "cannot stack {}x{}x{} with {c}x{h}x{w}",
                img.channels,
                img.height,
                img.width
            ));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}
