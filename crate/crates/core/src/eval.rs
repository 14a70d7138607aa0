//! Embedding-matching tracking proxy and baselines on held-out sequences.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};

use crate::autodiff::Tape;
use crate::checkpoint::{provenance_line, write_file, Checkpoint};
use crate::config::RunConfig;
use crate::data::{crop_resize, generate_dataset, load_dataset, stack, Dataset, Normalization, Sequence, SyntheticConfig};
use crate::error::{Error, Result};
use crate::metrics::{curve_csv, normalized_precision_curve, precision_curve, success_curve, BBox, MetricReport, TrackRecord};
use crate::network::Network;
use crate::nn::Mode;
use crate::retrain::network_for;
use crate::SeededRng;

/// Offset between the training seed and the held-out synthetic seed.
pub const EVAL_SEED_OFFSET: u64 = 0x5eed_0001;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Template matching in embedding space.
    Embedding,
    /// Ground truth as prediction.
    Oracle,
    /// Uniformly placed boxes of the first-frame size.
    Random,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(Protocol::Embedding),
            "oracle" => Ok(Protocol::Oracle),
            "random" => Ok(Protocol::Random),
            other => Err(Error::Config(format!("unknown protocol {other:?} (embedding, oracle, random)"))),
        }
    }
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Embedding => "embedding",
            Protocol::Oracle => "oracle",
            Protocol::Random => "random",
        }
    }
}

/// Held-out sequences: `data.eval_root` if set, otherwise synthetic
/// identities generated from a seed disjoint from training.
pub fn eval_dataset(config: &RunConfig) -> Result<Dataset> {
    match &config.data.eval_root {
        Some(root) => load_dataset(root),
        None => {
            let cfg = SyntheticConfig {
                identities: config.data.eval_identities,
                ..config.data.synthetic.clone()
            };
            generate_dataset(&cfg, config.seed.wrapping_add(EVAL_SEED_OFFSET))
        }
    }
}

/// A trained discrete network with its input normalization.
pub struct Tracker {
    pub net: Network,
    pub normalization: Normalization,
    pub crop: usize,
    pub radius: usize,
    pub step: usize,
}

impl Tracker {
    pub fn from_checkpoint(config: &RunConfig, ck: &Checkpoint) -> Result<Self> {
        let genotype = ck
            .genotype
            .as_ref()
            .ok_or_else(|| Error::Validation("weights checkpoint carries no genotype".into()))?;
        let mut rng = SeededRng::seed_from_u64(config.seed);
        let mut net = network_for(config, genotype, &mut rng)?;
        net.store.load_from(&ck.store)?;
        Ok(Tracker {
            net,
            normalization: ck.normalization,
            crop: config.data.crop_size,
            radius: config.eval.search_radius,
            step: config.eval.search_step,
        })
    }

    /// Unit-length embeddings of `boxes` cropped from `frame`.
    pub fn embed(&mut self, frame: &image::GrayImage, boxes: &[BBox]) -> Result<Vec<Vec<f64>>> {
        let crops: Vec<_> = boxes
            .iter()
            .map(|b| {
                let mut c = crop_resize(frame, b, self.crop);
                self.normalization.apply(&mut c);
                c
            })
            .collect();
        let mut tape = Tape::new();
        let x = tape.constant(stack(&crops)?);
        let mut rng = SeededRng::seed_from_u64(0);
        let out = self.net.forward(&mut tape, x, Mode::Eval, &mut rng)?;
        let emb = tape.value(out.embedding);
        let (n, d) = emb.dims2()?;
        (0..n)
            .map(|i| {
                let row = &emb.data()[i * d..(i + 1) * d];
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("embedding".into()));
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                Ok(row.iter().map(|v| v / norm).collect())
            })
            .collect()
    }

    /// Follows the first-frame target by picking, in each frame, the grid
    /// candidate around the previous prediction closest to the template.
    pub fn track(&mut self, seq: &Sequence) -> Result<TrackRecord> {
        let (w, h) = seq.frame_size();
        let (fw, fh) = (w as f64, h as f64);
        let first = seq.boxes[0];
        let template = self.embed(&seq.frames[0], &[first])?.remove(0);
        let offsets: Vec<f64> = grid_offsets(self.radius, self.step);
        let mut predicted = vec![first];
        let mut prev = first;
        for frame in &seq.frames[1..] {
            let candidates: Vec<BBox> = offsets
                .iter()
                .flat_map(|&dy| offsets.iter().map(move |&dx| (dx, dy)))
                .map(|(dx, dy)| keep_inside(&prev.translated(dx, dy), fw, fh))
                .collect();
            let embs = self.embed(frame, &candidates)?;
            let mut best = (f64::INFINITY, 0);
            for (i, e) in embs.iter().enumerate() {
                let d: f64 = e.iter().zip(&template).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, i);
                }
            }
            prev = candidates[best.1];
            predicted.push(prev);
        }
        Ok(TrackRecord {
            predicted,
            ground_truth: seq.boxes.clone(),
            image_size: (w, h),
        })
    }
}

fn grid_offsets(radius: usize, step: usize) -> Vec<f64> {
    let r = radius as i64;
    (-r..=r).step_by(step.max(1)).map(|v| v as f64).collect()
}

/// Shifts `b` so it lies in the frame without changing its size.
fn keep_inside(b: &BBox, width: f64, height: f64) -> BBox {
    let x = b.x.min(width - b.w).max(0.0);
    let y = b.y.min(height - b.h).max(0.0);
    BBox::new(x, y, b.w, b.h)
}

pub fn oracle_record(seq: &Sequence) -> TrackRecord {
    TrackRecord {
        predicted: seq.boxes.clone(),
        ground_truth: seq.boxes.clone(),
        image_size: seq.frame_size(),
    }
}

pub fn random_record(seq: &Sequence, rng: &mut SeededRng) -> TrackRecord {
    let (w, h) = seq.frame_size();
    let first = seq.boxes[0];
    let predicted = seq
        .boxes
        .iter()
        .map(|_| {
            let x = rng.random_range(0.0..=(w as f64 - first.w).max(0.0));
            let y = rng.random_range(0.0..=(h as f64 - first.h).max(0.0));
            BBox::new(x, y, first.w, first.h)
        })
        .collect();
    TrackRecord {
        predicted,
        ground_truth: seq.boxes.clone(),
        image_size: (w, h),
    }
}

/// Records for every sequence; `tracker` is required by the embedding protocol.
pub fn track_all(protocol: Protocol, dataset: &Dataset, tracker: Option<&mut Tracker>, seed: u64) -> Result<Vec<TrackRecord>> {
    match protocol {
        Protocol::Oracle => Ok(dataset.sequences.iter().map(oracle_record).collect()),
        Protocol::Random => {
            let mut rng = SeededRng::seed_from_u64(seed);
            Ok(dataset.sequences.iter().map(|s| random_record(s, &mut rng)).collect())
        }
        Protocol::Embedding => {
            let tracker = tracker.ok_or_else(|| Error::Config("the embedding protocol needs trained weights".into()))?;
            dataset.sequences.iter().map(|s| tracker.track(s)).collect()
        }
    }
}

/// Writes `metrics.csv` and the three curve CSVs under `out`.
pub fn write_report(records: &[TrackRecord], out: &Path, config_hash: &str, seed: u64) -> Result<MetricReport> {
    let report = MetricReport::compute_all(records)?;
    let prov = provenance_line(config_hash, seed);
    write_file(
        &out.join("metrics.csv"),
        &format!(
            "{prov}precision,success,norm_precision\n{},{},{}\n",
            report.precision, report.success, report.norm_precision
        ),
    )?;
    let merged = TrackRecord {
        predicted: records.iter().flat_map(|r| r.predicted.clone()).collect(),
        ground_truth: records.iter().flat_map(|r| r.ground_truth.clone()).collect(),
        image_size: records[0].image_size,
    };
    write_file(&out.join("precision_plot.csv"), &(prov.clone() + &curve_csv("threshold_px", &precision_curve(&merged)?)))?;
    write_file(&out.join("success_plot.csv"), &(prov.clone() + &curve_csv("overlap", &success_curve(&merged)?)))?;
    let np = normalized_precision_curve(&merged)?;
    if np.skipped > 0 {
        log::warn!("normalized precision skipped {} frames with a zero-size ground truth box", np.skipped);
    }
    write_file(&out.join("norm_precision_plot.csv"), &(prov + &curve_csv("normalized_distance", &np.curve)))?;
    Ok(report)
}
