//! Joint supervision: foreground classification, batch-hard triplet and the
//! predicted-versus-ground-truth feature distance, plus the identity-structured
//! batch sampler.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub margin: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { margin: 0.3, gamma: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("loss.margin must be >= 0, got {}", self.margin)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("loss.gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Summed binary cross-entropy of probabilities `h` against 0/1 targets.
pub fn classification_loss(tape: &mut Tape, h: Var, y: &[f64]) -> Result<Var> {
    tape.binary_cross_entropy(h, y)
}

/// Batch-hard triplet loss over Euclidean distances between embedding rows.
pub fn batch_hard_triplet(tape: &mut Tape, embeddings: Var, labels: &[usize], margin: f64) -> Result<Var> {
    for (i, l) in labels.iter().enumerate() {
        if !labels.iter().enumerate().any(|(j, m)| j != i && m == l) {
            log::debug!("identity {l} has a single sample in the batch; its hardest positive is 0");
        }
    }
    let dist = tape.pairwise_distance(embeddings)?;
    tape.batch_hard_triplet(dist, labels, margin)
}

/// Sum over rows of the Euclidean distance between predicted-box and
/// ground-truth-box features.
pub fn center_loss(tape: &mut Tape, feat_pred: Var, feat_gt: Var) -> Result<Var> {
    let d = tape.row_distance(feat_pred, feat_gt)?;
    tape.sum(d)
}

/// `cls + tri + gamma * cen`.
pub fn joint_loss(tape: &mut Tape, cls: Var, tri: Var, cen: Var, gamma: f64) -> Result<Var> {
    let sum = tape.add(cls, tri)?;
    let weighted = tape.scale(cen, gamma)?;
    tape.add(sum, weighted)
}

/// The three components and their weighted total, as logged per step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub tri: f64,
    pub cen: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(cls: f64, tri: f64, cen: f64, gamma: f64) -> Self {
        LossBreakdown {
            cls,
            tri,
            cen,
            total: cls + tri + gamma * cen,
        }
    }
}

/// Indices into a dataset forming one `M x N` identity-structured batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkBatch {
    /// Identity index of each sample, grouped: N samples of the first identity first.
    pub labels: Vec<usize>,
    /// `(identity, frame)` for each sample.
    pub picks: Vec<(usize, usize)>,
    pub m: usize,
    pub n: usize,
}

/// Draws `m` identities without replacement and `n` frames of each.
///
/// `frames[i]` lists the frame indices available for identity `i`. Frames are
/// drawn without replacement unless an identity has fewer than `n`, in which
/// case they are drawn with replacement.
pub fn sample_pk_batch(frames: &[Vec<usize>], m: usize, n: usize, rng: &mut SeededRng) -> Result<PkBatch> {
    let usable: Vec<usize> = (0..frames.len()).filter(|&i| !frames[i].is_empty()).collect();
    if m == 0 || n == 0 {
        return Err(Error::Config("batch needs m >= 1 identities and n >= 1 frames".into()));
    }
    if usable.len() < m {
        return Err(Error::Config(format!(
            "batch needs {m} identities with frames, dataset has {}",
            usable.len()
        )));
    }
    let mut labels = Vec::with_capacity(m * n);
    let mut picks = Vec::with_capacity(m * n);
    for i in index::sample(rng, usable.len(), m) {
        let id = usable[i];
        let pool = &frames[id];
        if pool.len() >= n {
            for j in index::sample(rng, pool.len(), n) {
                picks.push((id, pool[j]));
            }
        } else {
            log::debug!("identity {id} has {} frames, sampling {n} with replacement", pool.len());
            for _ in 0..n {
                picks.push((id, pool[rng.random_range(0..pool.len())]));
            }
        }
        labels.extend(std::iter::repeat_n(id, n));
    }
    Ok(PkBatch { labels, picks, m, n })
}
