//! Batch assembly and the joint-loss step shared by search and retraining.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Tape;
use crate::config::{BatchConfig, LossConfig};
use crate::data::{augment, crop_resize, stack, AugmentConfig, Dataset, FloatImage, Normalization};
use crate::error::{Error, Result};
use crate::losses::{batch_hard_triplet, center_loss, classification_loss, joint_loss, sample_pk_batch, LossBreakdown};
use crate::metrics::BBox;
use crate::network::Network;
use crate::nn::Mode;
use crate::tensor::Tensor;
use crate::SeededRng;

/// Samples are `(sequence, frame)` pairs; identities are sequence identities.
pub type Sample = (usize, usize);

/// Disjoint halves of the training frames: one for architecture steps, one for
/// weight steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitDataset {
    pub alpha_half: Vec<Sample>,
    pub omega_half: Vec<Sample>,
}

/// Splits every sequence's frames 50/50 at random.
pub fn split_dataset(dataset: &Dataset, rng: &mut SeededRng) -> SplitDataset {
    let mut alpha_half = Vec::new();
    let mut omega_half = Vec::new();
    for (s, seq) in dataset.sequences.iter().enumerate() {
        let mut frames: Vec<usize> = (0..seq.len()).collect();
        frames.shuffle(rng);
        let cut = frames.len().div_ceil(2);
        let (a, w) = frames.split_at(cut);
        let mut a = a.to_vec();
        let mut w = w.to_vec();
        a.sort_unstable();
        w.sort_unstable();
        alpha_half.extend(a.into_iter().map(|f| (s, f)));
        omega_half.extend(w.into_iter().map(|f| (s, f)));
    }
    SplitDataset { alpha_half, omega_half }
}

/// Remaining frames per identity within one epoch; drawn frames are consumed.
#[derive(Clone, Debug)]
pub struct FramePool {
    frames: Vec<Vec<usize>>,
    samples: Vec<Sample>,
}

impl FramePool {
    pub fn new(dataset: &Dataset, samples: &[Sample]) -> Self {
        let mut frames = vec![Vec::new(); dataset.identities()];
        for (i, &(s, _)) in samples.iter().enumerate() {
            frames[dataset.sequences[s].identity].push(i);
        }
        FramePool {
            frames,
            samples: samples.to_vec(),
        }
    }

    /// Identities that still have frames.
    pub fn live_identities(&self) -> usize {
        self.frames.iter().filter(|f| !f.is_empty()).count()
    }

    /// Draws one identity-structured batch, or `None` once fewer than
    /// `identities` identities have frames left.
    pub fn draw(&mut self, batch: &BatchConfig, rng: &mut SeededRng) -> Result<Option<(Vec<Sample>, Vec<usize>)>> {
        if self.live_identities() < batch.identities {
            return Ok(None);
        }
        let pk = sample_pk_batch(&self.frames, batch.identities, batch.frames, rng)?;
        for &(id, idx) in &pk.picks {
            if let Some(pos) = self.frames[id].iter().position(|&f| f == idx) {
                self.frames[id].swap_remove(pos);
            }
        }
        let picks = pk.picks.iter().map(|&(_, idx)| self.samples[idx]).collect();
        Ok(Some((picks, pk.labels)))
    }
}

/// Network input for one step: `B` ground-truth crops, `B` jittered crops and
/// `B` background crops, in that order.
pub struct TrainBatch {
    pub images: Tensor,
    /// Identity of each ground-truth crop.
    pub labels: Vec<usize>,
    /// Foreground target of every crop.
    pub targets: Vec<f64>,
    pub size: usize,
}

/// Uniform translation and scale perturbation of up to `frac` of the box size.
pub fn jitter_box(b: &BBox, frac: f64, width: f64, height: f64, rng: &mut SeededRng) -> BBox {
    if frac <= 0.0 {
        return *b;
    }
    let mut u = || rng.random_range(-frac..=frac);
    let (cx, cy) = b.center();
    let (cx, cy) = (cx + u() * b.w, cy + u() * b.h);
    let s = 1.0 + u();
    let (w, h) = ((b.w * s).max(1.0), (b.h * s).max(1.0));
    let moved = BBox::new(cx - w / 2.0, cy - h / 2.0, w, h).clamp_to(width, height);
    if moved.area() > 0.0 {
        moved
    } else {
        *b
    }
}

/// A box of the same size as `gt` that barely overlaps it, when one can be found.
pub fn background_box(gt: &BBox, width: f64, height: f64, rng: &mut SeededRng) -> BBox {
    let (w, h) = (gt.w.min(width), gt.h.min(height));
    let mut best = *gt;
    let mut best_iou = f64::INFINITY;
    for _ in 0..50 {
        let x = rng.random_range(0.0..=(width - w).max(0.0));
        let y = rng.random_range(0.0..=(height - h).max(0.0));
        let cand = BBox::new(x, y, w, h);
        let iou = cand.iou(gt);
        if iou < best_iou {
            best = cand;
            best_iou = iou;
        }
        if iou < 0.1 {
            break;
        }
    }
    best
}

/// Statistics of the ground-truth crops of every frame.
pub fn fit_normalization(dataset: &Dataset, crop: usize) -> Normalization {
    let crops: Vec<FloatImage> = dataset
        .sequences
        .iter()
        .flat_map(|s| s.frames.iter().zip(&s.boxes).map(|(f, b)| crop_resize(f, b, crop)))
        .collect();
    Normalization::fit(&crops)
}

pub struct BatchSpec<'a> {
    pub dataset: &'a Dataset,
    pub crop: usize,
    pub jitter: f64,
    pub augment: &'a AugmentConfig,
    pub norm: &'a Normalization,
}

impl BatchSpec<'_> {
    /// Crops and augments a batch. The ground-truth and jittered crops of a
    /// sample share the same random transform.
    pub fn build(&self, picks: &[Sample], labels: Vec<usize>, rng: &mut SeededRng) -> Result<TrainBatch> {
        let b = picks.len();
        let mut gt_crops = Vec::with_capacity(b);
        let mut jit_crops = Vec::with_capacity(b);
        let mut bg_crops = Vec::with_capacity(b);
        let mut jit_targets = Vec::with_capacity(b);
        for &(s, f) in picks {
            let seq = &self.dataset.sequences[s];
            let frame = &seq.frames[f];
            let (w, h) = (frame.width() as f64, frame.height() as f64);
            let gt = seq.boxes[f];
            let jit = jitter_box(&gt, self.jitter, w, h, rng);
            let bg = background_box(&gt, w, h, rng);
            jit_targets.push(if jit.iou(&gt) >= 0.5 { 1.0 } else { 0.0 });

            let mut g = crop_resize(frame, &gt, self.crop);
            let mut j = crop_resize(frame, &jit, self.crop);
            let mut k = crop_resize(frame, &bg, self.crop);
            let mut shared = rng.clone();
            augment(&mut g, &mut [], self.augment, self.norm, &mut shared);
            let mut shared = rng.clone();
            augment(&mut j, &mut [], self.augment, self.norm, &mut shared);
            *rng = shared;
            augment(&mut k, &mut [], self.augment, self.norm, rng);
            gt_crops.push(g);
            jit_crops.push(j);
            bg_crops.push(k);
        }
        let mut all = gt_crops;
        all.append(&mut jit_crops);
        all.append(&mut bg_crops);
        let mut targets = vec![1.0; b];
        targets.extend(jit_targets);
        targets.extend(std::iter::repeat_n(0.0, b));
        Ok(TrainBatch {
            images: stack(&all)?,
            labels,
            targets,
            size: b,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    /// Forward multiply-accumulates of the step.
    pub macs: u64,
}

/// Forward pass, joint loss and backward; gradients replace those held in the store.
pub fn joint_loss_step(net: &mut Network, batch: TrainBatch, loss: &LossConfig, mode: Mode, rng: &mut SeededRng) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let b = batch.size;
    let x = tape.constant(batch.images);
    let out = net.forward(&mut tape, x, mode, rng)?;
    let forward_macs = tape.macs();
    let emb = if loss.normalize_embeddings {
        tape.l2_normalize_rows(out.embedding)?
    } else {
        out.embedding
    };
    let gt = tape.slice_rows(emb, 0, b)?;
    let jit = tape.slice_rows(emb, b, b)?;
    let cls = classification_loss(&mut tape, out.prob, &batch.targets)?;
    let tri = batch_hard_triplet(&mut tape, gt, &batch.labels, loss.margin)?;
    let cen = center_loss(&mut tape, jit, gt)?;
    let total = joint_loss(&mut tape, cls, tri, cen, loss.gamma)?;
    let losses = LossBreakdown::new(
        tape.value(cls).item(),
        tape.value(tri).item(),
        tape.value(cen).item(),
        loss.gamma,
    );
    if !losses.total.is_finite() {
        return Err(Error::NonFinite("joint loss".into()));
    }
    let grads = tape.backward_release(total)?;
    net.store.zero_grad();
    net.store.accumulate(&tape, &grads);
    Ok(StepOutcome {
        losses,
        macs: forward_macs,
    })
}
