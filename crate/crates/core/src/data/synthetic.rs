//! Procedural thermal-like pedestrian sequences.
//!
//! Each identity is a bright figure (head, torso, hips, legs) whose four body
//! bands have their own intensity, proportions and gait, walking over a
//! textured background. Nuisance events (blur, occlusion, a crossing distractor,
//! global intensity shifts) are injected over short frame ranges.

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub identities: usize,
    pub frames_per_identity: usize,
    pub image_size: usize,
    /// Probability that a sequence receives each kind of nuisance event.
    pub nuisance_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            identities: 16,
            frames_per_identity: 32,
            image_size: 64,
            nuisance_rate: 0.25,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.image_size < 16 {
            return Err(Error::Config("synthetic data needs >= 1 identity and image_size >= 16".into()));
        }
        if self.frames_per_identity < 2 {
            return Err(Error::Config("synthetic sequences need at least 2 frames".into()));
        }
        if !(0.0..=1.0).contains(&self.nuisance_rate) {
            return Err(Error::Config(format!("nuisance_rate must be in [0, 1], got {}", self.nuisance_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceKind {
    Blur,
    Occlusion,
    Crossover,
    IntensityShift,
}

impl NuisanceKind {
    pub const ALL: [NuisanceKind; 4] = [
        NuisanceKind::Blur,
        NuisanceKind::Occlusion,
        NuisanceKind::Crossover,
        NuisanceKind::IntensityShift,
    ];
}

/// A nuisance active on frames `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceEvent {
    pub kind: NuisanceKind,
    pub start: usize,
    pub end: usize,
}

impl NuisanceEvent {
    pub fn covers(&self, frame: usize) -> bool {
        (self.start..self.end).contains(&frame)
    }
}

/// Appearance and motion parameters of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Style {
    /// Intensity of head, torso, hips and legs.
    pub bands: [f64; 4],
    /// Width over height.
    pub aspect: f64,
    /// Height as a fraction of the frame.
    pub height: f64,
    pub gait_speed: f64,
    pub leg_width: f64,
}

const MIN_PROFILE_GAP: f64 = 0.25;

fn random_style(rng: &mut SeededRng) -> Style {
    Style {
        bands: std::array::from_fn(|_| rng.random_range(0.45..1.0)),
        aspect: rng.random_range(0.35..0.5),
        height: rng.random_range(0.3..0.45),
        gait_speed: rng.random_range(0.3..0.8),
        leg_width: rng.random_range(0.3..0.45),
    }
}

/// Styles whose band profiles are pairwise at least `MIN_PROFILE_GAP` apart.
pub fn identity_styles(count: usize, rng: &mut SeededRng) -> Vec<Style> {
    let mut styles: Vec<Style> = Vec::with_capacity(count);
    let mut gap = MIN_PROFILE_GAP;
    while styles.len() < count {
        let mut placed = false;
        for _ in 0..2000 {
            let s = random_style(rng);
            let far = styles.iter().all(|o| {
                let d: f64 = o.bands.iter().zip(&s.bands).map(|(a, b)| (a - b).powi(2)).sum();
                d.sqrt() >= gap
            });
            if far {
                styles.push(s);
                placed = true;
                break;
            }
        }
        if !placed {
            // more identities than the profile space holds at this spacing
            gap *= 0.8;
        }
    }
    styles
}

/// Intensity of the figure at a point given in box-relative coordinates, if covered.
fn figure_value(style: &Style, u: f64, v: f64, phase: f64) -> Option<f64> {
    if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
        return None;
    }
    if v < 0.18 {
        let (du, dv) = ((u - 0.5) / 0.22, (v - 0.09) / 0.09);
        return (du * du + dv * dv <= 1.0).then_some(style.bands[0]);
    }
    if v < 0.55 {
        return Some(style.bands[1]);
    }
    if v < 0.65 {
        return (0.08..0.92).contains(&u).then_some(style.bands[2]);
    }
    let swing = 0.12 * phase.sin() * (v - 0.65) / 0.35;
    let lw = style.leg_width;
    let left = (0.5 - lw - 0.02 + swing..0.48 + swing).contains(&u);
    let right = (0.52 - swing..0.52 + lw + 0.02 - swing).contains(&u);
    (left || right).then_some(style.bands[3])
}

struct Background {
    base: f64,
    amp: f64,
    fx: f64,
    fy: f64,
    px: f64,
    py: f64,
}

impl Background {
    fn new(rng: &mut SeededRng) -> Self {
        Background {
            base: rng.random_range(0.15..0.3),
            amp: rng.random_range(0.03..0.08),
            fx: rng.random_range(0.1..0.5),
            fy: rng.random_range(0.1..0.5),
            px: rng.random_range(0.0..std::f64::consts::TAU),
            py: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn value(&self, x: f64, y: f64) -> f64 {
        self.base + self.amp * (x * self.fx + self.px).sin() * (y * self.fy + self.py).cos()
    }
}

fn box_blur(img: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(size) {
                for xx in x.saturating_sub(1)..(x + 2).min(size) {
                    acc += img[yy * size + xx];
                    n += 1.0;
                }
            }
            out[y * size + x] = acc / n;
        }
    }
    out
}

fn quantize(img: &[f64], size: usize) -> GrayImage {
    GrayImage::from_fn(size as u32, size as u32, |x, y| {
        let v = img[y as usize * size + x as usize].clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    })
}

fn draw_figure(img: &mut [f64], size: usize, style: &Style, b: &BBox, phase: f64) {
    let x0 = b.x.floor().max(0.0) as usize;
    let y0 = b.y.floor().max(0.0) as usize;
    let x1 = ((b.x + b.w).ceil() as usize).min(size);
    let y1 = ((b.y + b.h).ceil() as usize).min(size);
    for y in y0..y1 {
        for x in x0..x1 {
            let u = (x as f64 + 0.5 - b.x) / b.w;
            let v = (y as f64 + 0.5 - b.y) / b.h;
            if let Some(val) = figure_value(style, u, v, phase) {
                img[y * size + x] = val;
            }
        }
    }
}

fn sample_events(cfg: &SyntheticConfig, rng: &mut SeededRng) -> Vec<NuisanceEvent> {
    let n = cfg.frames_per_identity;
    let mut events = Vec::new();
    for kind in NuisanceKind::ALL {
        if rng.random_bool(cfg.nuisance_rate) {
            let len = rng.random_range(2..=6.min(n));
            let start = rng.random_range(1..=n.saturating_sub(len).max(1));
            events.push(NuisanceEvent {
                kind,
                start,
                end: (start + len).min(n),
            });
        }
    }
    events
}

fn generate_sequence(identity: usize, style: &Style, distractor: &Style, cfg: &SyntheticConfig, rng: &mut SeededRng) -> Sequence {
    let size = cfg.image_size;
    let s = size as f64;
    let bg = Background::new(rng);
    let events = sample_events(cfg, rng);
    let h0 = style.height * s;
    let w0 = h0 * style.aspect;
    let mut cx = rng.random_range(w0 / 2.0 + 1.0..s - w0 / 2.0 - 1.0);
    let mut cy = rng.random_range(h0 * 0.6..s - h0 * 0.6);
    let mut vx = rng.random_range(-1.5..1.5);
    let mut vy = rng.random_range(-0.6..0.6);
    let phase0 = rng.random_range(0.0..std::f64::consts::TAU);
    let scale_freq = rng.random_range(0.1..0.3);
    let shift = if rng.random_bool(0.5) { 0.06 } else { -0.06 };
    let occlude_left = rng.random_bool(0.5);
    let cross_dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };

    let mut frames = Vec::with_capacity(cfg.frames_per_identity);
    let mut boxes = Vec::with_capacity(cfg.frames_per_identity);
    for t in 0..cfg.frames_per_identity {
        let active = |k: NuisanceKind| events.iter().find(|e| e.kind == k && e.covers(t));
        let scale = 1.0 + 0.08 * (t as f64 * scale_freq).sin();
        let (h, w) = (h0 * scale, w0 * scale);
        let b = BBox::new(cx - w / 2.0, cy - h / 2.0, w, h).clamp_to(s, s);
        let phase = phase0 + t as f64 * style.gait_speed;

        let mut img: Vec<f64> = (0..size * size)
            .map(|i| bg.value((i % size) as f64, (i / size) as f64) + rng.random_range(-0.03..0.03))
            .collect();
        if let Some(e) = active(NuisanceKind::Crossover) {
            let progress = (t - e.start) as f64 / (e.end - e.start).max(1) as f64;
            let dh = distractor.height * s;
            let dw = dh * distractor.aspect;
            let dx = cx + cross_dir * (progress - 0.5) * 2.0 * w;
            let db = BBox::new(dx - dw / 2.0, cy - dh / 2.0 + 2.0, dw, dh);
            draw_figure(&mut img, size, distractor, &db, phase * 1.3);
        }
        draw_figure(&mut img, size, style, &b, phase);
        for v in img.iter_mut() {
            *v += rng.random_range(-0.02..0.02);
        }
        if active(NuisanceKind::Occlusion).is_some() {
            let ow = (0.35 * b.w).round() as usize;
            let x_start = if occlude_left { b.x as usize } else { (b.x + b.w) as usize - ow.min((b.x + b.w) as usize) };
            for y in b.y as usize..((b.y + b.h) as usize).min(size) {
                for x in x_start..(x_start + ow).min(size) {
                    img[y * size + x] = bg.base;
                }
            }
        }
        if active(NuisanceKind::IntensityShift).is_some() {
            img.iter_mut().for_each(|v| *v += shift);
        }
        if active(NuisanceKind::Blur).is_some() {
            img = box_blur(&img, size);
        }
        frames.push(quantize(&img, size));
        boxes.push(b);

        cx += vx;
        cy += vy;
        if cx - w0 / 2.0 < 1.0 || cx + w0 / 2.0 > s - 1.0 {
            vx = -vx;
            cx = cx.clamp(w0 / 2.0 + 1.0, s - w0 / 2.0 - 1.0);
        }
        if cy - h0 * 0.55 < 0.0 || cy + h0 * 0.55 > s {
            vy = -vy;
            cy = cy.clamp(h0 * 0.55, s - h0 * 0.55);
        }
    }
    Sequence {
        name: format!("id{identity:03}"),
        identity,
        frames,
        boxes,
        nuisances: events,
    }
}

/// Deterministic synthetic dataset; one sequence per identity.
pub fn generate_dataset(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = SeededRng::seed_from_u64(seed);
    let styles = identity_styles(cfg.identities, &mut rng);
    let sequences = styles
        .iter()
        .enumerate()
        .map(|(i, style)| {
            let distractor = random_style(&mut rng);
            generate_sequence(i, style, &distractor, cfg, &mut rng)
        })
        .collect();
    Ok(Dataset { sequences })
}

/// Mean intensity of `strips` horizontal strips of the box, a simple
/// appearance descriptor for sanity checks.
pub fn intensity_profile(frame: &GrayImage, b: &BBox, strips: usize) -> Vec<f64> {
    let crop = super::crop_resize(frame, b, strips * 4);
    let side = strips * 4;
    (0..strips)
        .map(|s| {
            let rows = &crop.plane(0)[s * 4 * side..(s + 1) * 4 * side];
            rows.iter().sum::<f64>() / rows.len() as f64
        })
        .collect()
}
