//! Tracking metrics: center-error precision, IoU success and scale-normalized
//! precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box, top-left corner plus extent, in pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        (ax - bx).hypot(ay - by)
    }

    /// Intersection over union; 0 when either box has no area, exactly 1 for
    /// identical boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let (a, b) = (self.area(), other.area());
        if a <= 0.0 || b <= 0.0 {
            return 0.0;
        }
        if self == other {
            return 1.0;
        }
        let iw = ((self.x + self.w).min(other.x + other.w) - self.x.max(other.x)).max(0.0);
        let ih = ((self.y + self.h).min(other.y + other.h) - self.y.max(other.y)).max(0.0);
        let inter = iw * ih;
        (inter / (a + b - inter)).clamp(0.0, 1.0)
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox::new(self.x * s, self.y * s, self.w * s, self.h * s)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    /// Intersection with the `width x height` image rectangle.
    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = (self.x + self.w).clamp(0.0, width);
        let y1 = (self.y + self.h).clamp(0.0, height);
        BBox::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub predicted: Vec<BBox>,
    pub ground_truth: Vec<BBox>,
    /// `(width, height)`.
    pub image_size: (usize, usize),
}

impl TrackRecord {
    pub fn validate(&self) -> Result<()> {
        if self.predicted.is_empty() {
            return Err(Error::Validation("track record has no frames".into()));
        }
        if self.predicted.len() != self.ground_truth.len() {
            return Err(Error::Validation(format!(
                "track record has {} predictions but {} ground-truth boxes",
                self.predicted.len(),
                self.ground_truth.len()
            )));
        }
        let bad = |b: &BBox| !b.is_finite() || b.w < 0.0 || b.h < 0.0;
        if self.predicted.iter().chain(&self.ground_truth).any(bad) {
            return Err(Error::Validation("track record holds a non-finite or negative-size box".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    fn pairs(&self) -> impl Iterator<Item = (&BBox, &BBox)> {
        self.predicted.iter().zip(&self.ground_truth)
    }
}

/// Pixel thresholds of the precision plot.
pub const PRECISION_THRESHOLDS: std::ops::RangeInclusive<usize> = 0..=50;
/// Sampling step of the success plot overlap thresholds.
pub const SUCCESS_STEP: f64 = 0.05;
pub const SUCCESS_POINTS: usize = 21;
pub const NORM_PRECISION_MAX: f64 = 0.5;
pub const NORM_PRECISION_POINTS: usize = 51;

/// Fraction of frames whose center error is at most `t` pixels.
pub fn precision_at(record: &TrackRecord, t: f64) -> Result<f64> {
    record.validate()?;
    let hits = record.pairs().filter(|(p, g)| p.center_distance(g) <= t).count();
    Ok(hits as f64 / record.len() as f64)
}

pub fn precision_at_20(record: &TrackRecord) -> Result<f64> {
    precision_at(record, 20.0)
}

/// `(threshold_px, precision)` for thresholds 0..=50.
pub fn precision_curve(record: &TrackRecord) -> Result<Vec<(f64, f64)>> {
    PRECISION_THRESHOLDS
        .map(|t| Ok((t as f64, precision_at(record, t as f64)?)))
        .collect()
}

/// `(tau, success)` with success the fraction of frames whose IoU reaches `tau`;
/// a frame without any overlap never counts as a success.
pub fn success_curve(record: &TrackRecord) -> Result<Vec<(f64, f64)>> {
    record.validate()?;
    let ious: Vec<f64> = record.pairs().map(|(p, g)| p.iou(g)).collect();
    Ok((0..SUCCESS_POINTS)
        .map(|i| {
            let tau = i as f64 * SUCCESS_STEP;
            let hits = ious.iter().filter(|&&v| v > 0.0 && v >= tau).count();
            (tau, hits as f64 / ious.len() as f64)
        })
        .collect())
}

/// Uniform average of the sampled success curve.
pub fn success_auc(record: &TrackRecord) -> Result<f64> {
    let curve = success_curve(record)?;
    Ok(curve.iter().map(|p| p.1).sum::<f64>() / curve.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedPrecision {
    /// `(normalized threshold, precision)` over `[0, 0.5]`.
    pub curve: Vec<(f64, f64)>,
    /// Uniform average of the curve.
    pub auc: f64,
    /// Frames skipped for a zero-diagonal ground-truth box.
    pub skipped: usize,
}

/// Precision over center errors divided by the ground-truth box diagonal.
pub fn normalized_precision_curve(record: &TrackRecord) -> Result<NormalizedPrecision> {
    record.validate()?;
    let mut errors = Vec::with_capacity(record.len());
    let mut skipped = 0;
    for (p, g) in record.pairs() {
        let d = g.diagonal();
        if d > 0.0 {
            errors.push(p.center_distance(g) / d);
        } else {
            skipped += 1;
        }
    }
    if skipped > 0 {
        log::warn!("normalized precision skipped {skipped} frame(s) with a zero-diagonal ground-truth box");
    }
    if errors.is_empty() {
        return Err(Error::Validation("every ground-truth box has zero diagonal".into()));
    }
    let last = (NORM_PRECISION_POINTS - 1) as f64;
    let curve: Vec<(f64, f64)> = (0..NORM_PRECISION_POINTS)
        .map(|i| {
            let t = NORM_PRECISION_MAX * i as f64 / last;
            let hits = errors.iter().filter(|&&e| e <= t).count();
            (t, hits as f64 / errors.len() as f64)
        })
        .collect();
    let auc = curve.iter().map(|p| p.1).sum::<f64>() / curve.len() as f64;
    Ok(NormalizedPrecision { curve, auc, skipped })
}

pub fn normalized_precision(record: &TrackRecord) -> Result<f64> {
    Ok(normalized_precision_curve(record)?.auc)
}

/// Headline numbers of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub success: f64,
    pub norm_precision: f64,
    pub frames: usize,
}

impl MetricReport {
    pub fn compute(record: &TrackRecord) -> Result<Self> {
        Ok(MetricReport {
            precision: precision_at_20(record)?,
            success: success_auc(record)?,
            norm_precision: normalized_precision(record)?,
            frames: record.len(),
        })
    }

    /// Pools several records frame-wise.
    pub fn compute_all(records: &[TrackRecord]) -> Result<Self> {
        let mut merged = TrackRecord {
            predicted: Vec::new(),
            ground_truth: Vec::new(),
            image_size: records.first().map_or((0, 0), |r| r.image_size),
        };
        for r in records {
            r.validate()?;
            merged.predicted.extend_from_slice(&r.predicted);
            merged.ground_truth.extend_from_slice(&r.ground_truth);
        }
        Self::compute(&merged)
    }
}

/// `threshold,value` rows for a plotting tool.
pub fn curve_csv(header: &str, curve: &[(f64, f64)]) -> String {
    let mut out = format!("{header},value\n");
    for (t, v) in curve {
        out.push_str(&format!("{t},{v}\n"));
    }
    out
}
