//! The eight operation candidates, the softmax-weighted mixed edge and its
//! partial-channel variant.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autodiff::conv::out_extent;
use crate::autodiff::{ConvGeom, PoolKind, Tape, Var};
use crate::cost::CostReport;
use crate::error::{shape_err, Error, Result};
use crate::nn::{BatchNorm, Conv2d, Mode, ParamStore};
use crate::tensor::Tensor;
use crate::SeededRng;

/// Operation candidate kinds, in architecture-matrix column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "skip_connect")]
    SkipConnect,
    #[serde(rename = "dil_conv_3x3")]
    DilConv3x3,
    #[serde(rename = "dil_conv_5x5")]
    DilConv5x5,
}

pub const NUM_CANDIDATES: usize = 8;

impl OpKind {
    pub const ALL: [OpKind; NUM_CANDIDATES] = [
        OpKind::None,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::SkipConnect,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::None => "none",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::SkipConnect => "skip_connect",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown operation kind {s:?}")))
    }
}

/// `ceil(n / stride)`, the spatial extent every candidate produces.
pub fn strided_extent(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Two parallel 1x1 stride-2 convolutions, the second on the input shifted by one
/// pixel, concatenated along channels and batch-normalized.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FactorizedReduce {
    conv_a: Conv2d,
    conv_b: Option<Conv2d>,
    bn: BatchNorm,
}

impl FactorizedReduce {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, c_in: usize, c_out: usize, affine: bool) -> Result<Self> {
        let half = c_out / 2;
        let conv_a = Conv2d::new(store, rng, &format!("{name}.conv_a"), c_in, c_out - half, 1, ConvGeom::simple(2, 0))?;
        let conv_b = if half > 0 {
            Some(Conv2d::new(store, rng, &format!("{name}.conv_b"), c_in, half, 1, ConvGeom::simple(2, 0))?)
        } else {
            None
        };
        let bn = BatchNorm::new(store, &format!("{name}.bn"), c_out, affine);
        Ok(FactorizedReduce { conv_a, conv_b, bn })
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let a = self.conv_a.forward(tape, store, x)?;
        let y = match &self.conv_b {
            Some(conv_b) => {
                let shifted = tape.shift2d(x, 1, 1)?;
                let b = conv_b.forward(tape, store, shifted)?;
                tape.concat_channels(&[a, b])?
            }
            None => a,
        };
        self.bn.forward(tape, store, y, mode)
    }

    pub fn cost(&self, name: &str, h: usize, w: usize, report: &mut CostReport) -> Result<(usize, usize)> {
        let (ho, wo, macs) = self.conv_a.cost(h, w)?;
        report.push(format!("{name}.conv_a"), self.conv_a.params(), macs);
        if let Some(conv_b) = &self.conv_b {
            let (_, _, macs) = conv_b.cost(h, w)?;
            report.push(format!("{name}.conv_b"), conv_b.params(), macs);
        }
        report.push(format!("{name}.bn"), self.bn.params(), 0);
        Ok((ho, wo))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum CandidateOp {
    Zero,
    Pool(PoolKind),
    Identity,
    Reduce(FactorizedReduce),
    /// ReLU, depthwise kxk, BN, pointwise 1x1, BN.
    SepConv {
        depthwise: Conv2d,
        bn_dw: BatchNorm,
        pointwise: Conv2d,
        bn_pw: BatchNorm,
    },
    /// ReLU, dilated depthwise kxk, pointwise 1x1, BN.
    DilConv {
        depthwise: Conv2d,
        pointwise: Conv2d,
        bn: BatchNorm,
    },
}

/// One instantiated operation candidate mapping `(C, H, W)` to `(C, H/stride, W/stride)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Candidate {
    pub kind: OpKind,
    pub stride: usize,
    pub channels: usize,
    op: CandidateOp,
}

impl Candidate {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        kind: OpKind,
        channels: usize,
        stride: usize,
        affine: bool,
    ) -> Result<Self> {
        if !(stride == 1 || stride == 2) {
            return Err(Error::Config(format!("{name}: candidate stride must be 1 or 2, got {stride}")));
        }
        let c = channels;
        let sep = |store: &mut ParamStore, rng: &mut SeededRng, k: usize| -> Result<CandidateOp> {
            Ok(CandidateOp::SepConv {
                depthwise: Conv2d::new(store, rng, &format!("{name}.dw"), c, c, k, ConvGeom::new(stride, k / 2, 1, c))?,
                bn_dw: BatchNorm::new(store, &format!("{name}.bn_dw"), c, affine),
                pointwise: Conv2d::new(store, rng, &format!("{name}.pw"), c, c, 1, ConvGeom::simple(1, 0))?,
                bn_pw: BatchNorm::new(store, &format!("{name}.bn_pw"), c, affine),
            })
        };
        let dil = |store: &mut ParamStore, rng: &mut SeededRng, k: usize| -> Result<CandidateOp> {
            Ok(CandidateOp::DilConv {
                depthwise: Conv2d::new(store, rng, &format!("{name}.dw"), c, c, k, ConvGeom::new(stride, k - 1, 2, c))?,
                pointwise: Conv2d::new(store, rng, &format!("{name}.pw"), c, c, 1, ConvGeom::simple(1, 0))?,
                bn: BatchNorm::new(store, &format!("{name}.bn"), c, affine),
            })
        };
        let op = match kind {
            OpKind::None => CandidateOp::Zero,
            OpKind::MaxPool3x3 => CandidateOp::Pool(PoolKind::Max),
            OpKind::AvgPool3x3 => CandidateOp::Pool(PoolKind::Avg),
            OpKind::SepConv3x3 => sep(store, rng, 3)?,
            OpKind::SepConv5x5 => sep(store, rng, 5)?,
            OpKind::SkipConnect if stride == 1 => CandidateOp::Identity,
            OpKind::SkipConnect => CandidateOp::Reduce(FactorizedReduce::new(store, rng, &format!("{name}.reduce"), c, c, affine)?),
            OpKind::DilConv3x3 => dil(store, rng, 3)?,
            OpKind::DilConv5x5 => dil(store, rng, 5)?,
        };
        Ok(Candidate {
            kind,
            stride,
            channels,
            op,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let (n, c, h, w) = tape.value(x).dims4()?;
        if c != self.channels {
            return Err(shape_err!("{} expects {} channels, got {c}", self.kind, self.channels));
        }
        match &self.op {
            CandidateOp::Zero => {
                let shape = vec![n, c, strided_extent(h, self.stride), strided_extent(w, self.stride)];
                Ok(tape.constant(Tensor::zeros(shape)))
            }
            CandidateOp::Pool(kind) => tape.pool2d(x, *kind, 3, self.stride, 1),
            CandidateOp::Identity => Ok(x),
            CandidateOp::Reduce(r) => r.forward(tape, store, x, mode),
            CandidateOp::SepConv {
                depthwise,
                bn_dw,
                pointwise,
                bn_pw,
            } => {
                let y = tape.relu(x)?;
                let y = depthwise.forward(tape, store, y)?;
                let y = bn_dw.forward(tape, store, y, mode)?;
                let y = pointwise.forward(tape, store, y)?;
                bn_pw.forward(tape, store, y, mode)
            }
            CandidateOp::DilConv { depthwise, pointwise, bn } => {
                let y = tape.relu(x)?;
                let y = depthwise.forward(tape, store, y)?;
                let y = pointwise.forward(tape, store, y)?;
                bn.forward(tape, store, y, mode)
            }
        }
    }

    /// Appends this candidate's layers to `report` and returns the output extent.
    pub fn cost(&self, name: &str, h: usize, w: usize, report: &mut CostReport) -> Result<(usize, usize)> {
        match &self.op {
            CandidateOp::Zero | CandidateOp::Identity => Ok((strided_extent(h, self.stride), strided_extent(w, self.stride))),
            CandidateOp::Pool(_) => {
                let ho = out_extent(h, 3, self.stride, 1, 1).ok_or_else(|| shape_err!("pool does not fit {h}x{w}"))?;
                let wo = out_extent(w, 3, self.stride, 1, 1).ok_or_else(|| shape_err!("pool does not fit {h}x{w}"))?;
                Ok((ho, wo))
            }
            CandidateOp::Reduce(r) => r.cost(name, h, w, report),
            CandidateOp::SepConv {
                depthwise,
                bn_dw,
                pointwise,
                bn_pw,
            } => {
                let (ho, wo, m) = depthwise.cost(h, w)?;
                report.push(format!("{name}.dw"), depthwise.params(), m);
                report.push(format!("{name}.bn_dw"), bn_dw.params(), 0);
                let (_, _, m) = pointwise.cost(ho, wo)?;
                report.push(format!("{name}.pw"), pointwise.params(), m);
                report.push(format!("{name}.bn_pw"), bn_pw.params(), 0);
                Ok((ho, wo))
            }
            CandidateOp::DilConv { depthwise, pointwise, bn } => {
                let (ho, wo, m) = depthwise.cost(h, w)?;
                report.push(format!("{name}.dw"), depthwise.params(), m);
                let (_, _, m) = pointwise.cost(ho, wo)?;
                report.push(format!("{name}.pw"), pointwise.params(), m);
                report.push(format!("{name}.bn"), bn.params(), 0);
                Ok((ho, wo))
            }
        }
    }
}

/// Softmax-weighted sum of all candidate outputs.
///
/// `alpha_row` holds one logit per candidate (any shape with that many elements,
/// softmax is taken along its last axis).
pub fn mixed_op(
    tape: &mut Tape,
    store: &mut ParamStore,
    x: Var,
    alpha_row: Var,
    candidates: &[Candidate],
    mode: Mode,
) -> Result<Var> {
    if tape.value(alpha_row).len() != candidates.len() {
        return Err(shape_err!(
            "alpha row has {} entries for {} candidates",
            tape.value(alpha_row).len(),
            candidates.len()
        ));
    }
    let axis = tape.shape(alpha_row).len() - 1;
    let weights = tape.softmax(alpha_row, axis)?;
    let outputs = candidates
        .iter()
        .map(|c| c.forward(tape, store, x, mode))
        .collect::<Result<Vec<_>>>()?;
    tape.mix(weights, &outputs)
}

/// Parameter-free reducer applied to bypassed channels on stride-2 edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BypassReducer {
    /// 2x2 average pooling with stride 2.
    AvgPool2x2,
}

/// Boolean channel selection for one edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMask {
    pub edge_id: usize,
    pub mask: Vec<bool>,
    pub rate: f64,
}

/// Channels processed per edge: `round(channels * rate)`, at least one.
pub fn selected_count(channels: usize, rate: f64) -> usize {
    ((channels as f64 * rate).round() as usize).clamp(1, channels.max(1))
}

impl ChannelMask {
    pub fn full(edge_id: usize, channels: usize) -> Self {
        ChannelMask {
            edge_id,
            mask: vec![true; channels],
            rate: 1.0,
        }
    }

    pub fn selected(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn unselected(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }

    pub fn popcount(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Uniformly random subset of `round(channels * rate)` channels, without replacement.
pub fn sample_mask(edge_id: usize, channels: usize, rate: f64, rng: &mut SeededRng) -> ChannelMask {
    let k = selected_count(channels, rate);
    let mut mask = vec![false; channels];
    for i in index::sample(rng, channels, k) {
        mask[i] = true;
    }
    ChannelMask { edge_id, mask, rate }
}

/// A searchable edge: all eight candidates sized for the selected channel count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixedEdge {
    pub edge_id: usize,
    pub stride: usize,
    /// Channel count of the edge input and output.
    pub channels: usize,
    pub candidates: Vec<Candidate>,
    pub bypass: Option<BypassReducer>,
}

impl MixedEdge {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        edge_id: usize,
        channels: usize,
        stride: usize,
        rate: f64,
        affine: bool,
    ) -> Result<Self> {
        let k = selected_count(channels, rate);
        let candidates = OpKind::ALL
            .iter()
            .map(|&kind| Candidate::new(store, rng, &format!("{name}.{kind}"), kind, k, stride, affine))
            .collect::<Result<Vec<_>>>()?;
        Ok(MixedEdge {
            edge_id,
            stride,
            channels,
            candidates,
            bypass: Some(BypassReducer::AvgPool2x2),
        })
    }

    pub fn selected_channels(&self) -> usize {
        self.candidates[0].channels
    }

    pub fn cost(&self, name: &str, h: usize, w: usize, report: &mut CostReport) -> Result<(usize, usize)> {
        let mut out = (strided_extent(h, self.stride), strided_extent(w, self.stride));
        for c in &self.candidates {
            out = c.cost(&format!("{name}.{}", c.kind), h, w, report)?;
        }
        Ok(out)
    }
}

/// Mixed edge over the channels selected by `mask`; the remaining channels bypass
/// the candidates (reduced by the edge's bypass reducer on stride-2 edges) and
/// everything is recombined in the original channel order.
pub fn partial_mixed_op(
    tape: &mut Tape,
    store: &mut ParamStore,
    x: Var,
    alpha_row: Var,
    edge: &MixedEdge,
    mask: &ChannelMask,
    mode: Mode,
) -> Result<Var> {
    let (_, c, h, w) = tape.value(x).dims4()?;
    if mask.mask.len() != c {
        return Err(shape_err!("channel mask has length {} but input has {c} channels", mask.mask.len()));
    }
    if mask.popcount() != edge.selected_channels() {
        return Err(shape_err!(
            "mask selects {} channels, edge candidates expect {}",
            mask.popcount(),
            edge.selected_channels()
        ));
    }
    if mask.popcount() == c {
        return mixed_op(tape, store, x, alpha_row, &edge.candidates, mode);
    }
    if edge.stride == 1 {
        let selected = tape.gather_channels(x, &mask.selected())?;
        let mixed = mixed_op(tape, store, selected, alpha_row, &edge.candidates, mode)?;
        return tape.replace_channels(x, mixed, &mask.mask);
    }
    let rest = tape.gather_channels(x, &mask.unselected())?;
    let rest = match edge.bypass {
        Some(BypassReducer::AvgPool2x2) => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(shape_err!("stride-2 bypass needs even spatial extent, got {h}x{w}"));
            }
            tape.pool2d(rest, PoolKind::Avg, 2, 2, 0)?
        }
        None => {
            return Err(Error::Config(format!(
                "edge {} has stride {} but no bypass reducer for unselected channels",
                edge.stride,
                edge.edge_id
            )))
        }
    };
    let selected = tape.gather_channels(x, &mask.selected())?;
    let mixed = mixed_op(tape, store, selected, alpha_row, &edge.candidates, mode)?;
    tape.merge_channels(mixed, rest, &mask.mask)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::nn::fan_in_uniform;

    const TRAIN: Mode = Mode::Train { update_stats: false };

    fn random_input(rng: &mut SeededRng, shape: Vec<usize>) -> Tensor {
        fan_in_uniform(shape, 1, rng)
    }

    fn candidates(store: &mut ParamStore, rng: &mut SeededRng, c: usize, stride: usize) -> Vec<Candidate> {
        OpKind::ALL
            .iter()
            .map(|&k| Candidate::new(store, rng, &format!("e.{k}"), k, c, stride, false).unwrap())
            .collect()
    }

    #[test]
    fn names_round_trip_in_order() {
        let names: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
        assert_eq!(
            names,
            [
                "none",
                "max_pool_3x3",
                "avg_pool_3x3",
                "sep_conv_3x3",
                "sep_conv_5x5",
                "skip_connect",
                "dil_conv_3x3",
                "dil_conv_5x5"
            ]
        );
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
            assert_eq!(OpKind::from_index(k.index()), Some(k));
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!("conv_7x7".parse::<OpKind>().is_err());
    }

    #[test]
    fn every_candidate_honours_shape_contract() {
        let mut rng = SeededRng::seed_from_u64(1);
        for (h, w) in [(8, 8), (7, 9)] {
            for stride in [1, 2] {
                let mut store = ParamStore::new();
                let cands = candidates(&mut store, &mut rng, 4, stride);
                let mut tape = Tape::new();
                let x = tape.constant(random_input(&mut rng, vec![2, 4, h, w]));
                for c in &cands {
                    let y = c.forward(&mut tape, &mut store, x, TRAIN).unwrap();
                    assert_eq!(
                        tape.shape(y),
                        [2, 4, strided_extent(h, stride), strided_extent(w, stride)],
                        "{} stride {stride} on {h}x{w}",
                        c.kind
                    );
                    if c.kind == OpKind::None {
                        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
                    }
                    if c.kind == OpKind::SkipConnect && stride == 1 {
                        assert_eq!(tape.value(y), tape.value(x));
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_alpha_gives_candidate_mean() {
        let mut rng = SeededRng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cands = candidates(&mut store, &mut rng, 3, 1);
        let mut tape = Tape::new();
        let x = tape.constant(random_input(&mut rng, vec![2, 3, 6, 6]));
        let alpha = tape.constant(Tensor::zeros(vec![8]));
        let y = mixed_op(&mut tape, &mut store, x, alpha, &cands, TRAIN).unwrap();
        let outs: Vec<Tensor> = cands
            .iter()
            .map(|c| {
                let v = c.forward(&mut tape, &mut store, x, TRAIN).unwrap();
                tape.value(v).clone()
            })
            .collect();
        let got = tape.value(y).data();
        for i in 0..got.len() {
            let mean = outs.iter().map(|o| o.data()[i]).sum::<f64>() / 8.0;
            assert!((got[i] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn dominant_alpha_selects_candidate() {
        let mut rng = SeededRng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cands = candidates(&mut store, &mut rng, 3, 2);
        for pick in 0..8 {
            let mut tape = Tape::new();
            let x = tape.constant(random_input(&mut rng, vec![2, 3, 6, 6]));
            let mut row = vec![0.0; 8];
            row[pick] = 40.0;
            let alpha = tape.constant(Tensor::from_vec(row));
            let y = mixed_op(&mut tape, &mut store, x, alpha, &cands, TRAIN).unwrap();
            let single = cands[pick].forward(&mut tape, &mut store, x, TRAIN).unwrap();
            assert!(tape.value(y).max_abs_diff(tape.value(single)) < 1e-5);
        }
    }

    #[test]
    fn mixed_op_rejects_shape_disagreement() {
        let mut rng = SeededRng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mut cands = candidates(&mut store, &mut rng, 2, 1);
        cands[3] = Candidate::new(&mut store, &mut rng, "odd", OpKind::SepConv3x3, 2, 2, false).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random_input(&mut rng, vec![1, 2, 4, 4]));
        let alpha = tape.constant(Tensor::zeros(vec![8]));
        assert!(matches!(
            mixed_op(&mut tape, &mut store, x, alpha, &cands, TRAIN),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mask_counts() {
        let mut rng = SeededRng::seed_from_u64(5);
        assert_eq!(sample_mask(0, 4, 0.25, &mut rng).popcount(), 1);
        assert_eq!(sample_mask(0, 8, 0.25, &mut rng).popcount(), 2);
        assert_eq!(sample_mask(0, 32, 0.25, &mut rng).popcount(), 8);
        assert_eq!(sample_mask(0, 2, 0.25, &mut rng).popcount(), 1);
        let a = sample_mask(3, 16, 0.25, &mut SeededRng::seed_from_u64(9));
        let b = sample_mask(3, 16, 0.25, &mut SeededRng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn mask_frequencies_are_uniform() {
        let mut rng = SeededRng::seed_from_u64(6);
        let draws = 10_000;
        let mut hits = [0usize; 8];
        for _ in 0..draws {
            for i in sample_mask(0, 8, 0.25, &mut rng).selected() {
                hits[i] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / draws as f64;
            assert!((f - 0.25).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn full_mask_equals_mixed_op() {
        let mut rng = SeededRng::seed_from_u64(7);
        for stride in [1, 2] {
            let mut store = ParamStore::new();
            let edge = MixedEdge::new(&mut store, &mut rng, "e", 0, 4, stride, 1.0, false).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(random_input(&mut rng, vec![2, 4, 6, 6]));
            let alpha = tape.constant(random_input(&mut rng, vec![8]));
            let a = partial_mixed_op(&mut tape, &mut store, x, alpha, &edge, &ChannelMask::full(0, 4), TRAIN).unwrap();
            let b = mixed_op(&mut tape, &mut store, x, alpha, &edge.candidates, TRAIN).unwrap();
            assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-6);
        }
    }

    #[test]
    fn unselected_channels_pass_through() {
        let mut rng = SeededRng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let edge = MixedEdge::new(&mut store, &mut rng, "e", 0, 8, 1, 0.25, false).unwrap();
        assert_eq!(edge.selected_channels(), 2);
        let mask = sample_mask(0, 8, 0.25, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(random_input(&mut rng, vec![2, 8, 5, 5]));
        let alpha = tape.constant(random_input(&mut rng, vec![8]));
        let y = partial_mixed_op(&mut tape, &mut store, x, alpha, &edge, &mask, TRAIN).unwrap();
        assert_eq!(tape.shape(y), [2, 8, 5, 5]);
        let (xv, yv) = (tape.value(x).data(), tape.value(y).data());
        for n in 0..2 {
            for ch in mask.unselected() {
                let off = (n * 8 + ch) * 25;
                assert_eq!(&xv[off..off + 25], &yv[off..off + 25]);
            }
        }
    }

    #[test]
    fn stride_two_bypass_is_pooled_and_required() {
        let mut rng = SeededRng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let mut edge = MixedEdge::new(&mut store, &mut rng, "e", 0, 8, 2, 0.25, false).unwrap();
        let mask = sample_mask(0, 8, 0.25, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(random_input(&mut rng, vec![1, 8, 6, 6]));
        let alpha = tape.constant(Tensor::zeros(vec![8]));
        let y = partial_mixed_op(&mut tape, &mut store, x, alpha, &edge, &mask, TRAIN).unwrap();
        assert_eq!(tape.shape(y), [1, 8, 3, 3]);
        let ch = mask.unselected()[0];
        let xv = tape.value(x).data();
        let expect = (xv[ch * 36] + xv[ch * 36 + 1] + xv[ch * 36 + 6] + xv[ch * 36 + 7]) / 4.0;
        assert!((tape.value(y).data()[ch * 9] - expect).abs() < 1e-12);

        edge.bypass = None;
        assert!(matches!(
            partial_mixed_op(&mut tape, &mut store, x, alpha, &edge, &mask, TRAIN),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mask_length_must_match() {
        let mut rng = SeededRng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let edge = MixedEdge::new(&mut store, &mut rng, "e", 0, 8, 1, 0.25, false).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random_input(&mut rng, vec![1, 8, 4, 4]));
        let alpha = tape.constant(Tensor::zeros(vec![8]));
        let mask = sample_mask(0, 12, 0.25, &mut rng);
        assert!(partial_mixed_op(&mut tape, &mut store, x, alpha, &edge, &mask, TRAIN).is_err());
    }
}
