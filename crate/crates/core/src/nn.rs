//! Parameter storage and the small set of layers the cells are built from.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Gradients, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StatsId(usize);

/// Operation weights (omega) versus architecture parameters (alpha).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Weight,
    Arch,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    #[serde(skip)]
    pub grad: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Forward-pass behaviour of batch norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated only when `update_stats` is set.
    Train { update_stats: bool },
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    stats: Vec<RunningStats>,
    #[serde(skip, default = "all_trainable")]
    trainable: [bool; 2],
}

fn all_trainable() -> [bool; 2] {
    [true, true]
}

fn group_slot(group: ParamGroup) -> usize {
    match group {
        ParamGroup::Weight => 0,
        ParamGroup::Arch => 1,
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            stats: Vec::new(),
            trainable: all_trainable(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, channels: usize) -> StatsId {
        self.stats.push(RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        StatsId(self.stats.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn group_ids(&self, group: ParamGroup) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(move |&id| self.params[id.0].group == group)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count of a parameter group.
    pub fn numel(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, group: ParamGroup, trainable: bool) {
        self.trainable[group_slot(group)] = trainable;
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable[group_slot(group)]
    }

    /// Places a parameter on the tape (once per tape).
    pub fn var(&self, tape: &mut Tape, id: ParamId) -> Var {
        let p = &self.params[id.0];
        let requires_grad = self.is_trainable(p.group);
        tape.tagged_leaf(id.0, requires_grad, || p.value.clone())
    }

    /// Adds the gradients of every parameter leaf on `tape` into the stored grads.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for &(var, tag) in tape.tagged_leaves() {
            let Some(g) = grads.get_slice(var) else { continue };
            let p = &mut self.params[tag];
            match &mut p.grad {
                Some(existing) => existing.data_mut().iter_mut().zip(g).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(Tensor::new(p.value.shape().to_vec(), g.to_vec()).expect("grad shape")),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update_stats(&mut self, id: StatsId, mean: &[f64], var: &[f64], count: usize) {
        let s = &mut self.stats[id.0];
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for c in 0..s.mean.len() {
            s.mean[c] = (1.0 - BN_MOMENTUM) * s.mean[c] + BN_MOMENTUM * mean[c];
            s.var[c] = (1.0 - BN_MOMENTUM) * s.var[c] + BN_MOMENTUM * var[c] * unbias;
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn all_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    /// Replaces values and running statistics with those of `other`, which must
    /// have an identical layout (names and shapes).
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() || other.stats.len() != self.stats.len() {
            return Err(Error::Validation(format!(
                "parameter layout mismatch: expected {} tensors / {} norms, got {} / {}",
                self.params.len(),
                self.stats.len(),
                other.params.len(),
                other.stats.len()
            )));
        }
        for (mine, theirs) in self.params.iter().zip(&other.params) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Validation(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
        }
        for (mine, theirs) in self.stats.iter().zip(&other.stats) {
            if mine.mean.len() != theirs.mean.len() || theirs.var.len() != theirs.mean.len() {
                return Err(Error::Validation("running statistics layout mismatch".into()));
            }
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            mine.value = theirs.value.clone();
        }
        self.stats = other.stats.clone();
        Ok(())
    }
}

/// Uniform init with variance `1 / fan_in`.
pub fn fan_in_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut SeededRng) -> Tensor {
    let bound = (3.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init shape")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geom: ConvGeom,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeom,
    ) -> Result<Self> {
        if !in_channels.is_multiple_of(geom.groups) || !out_channels.is_multiple_of(geom.groups) {
            return Err(Error::Config(format!(
                "{name}: channels {in_channels}->{out_channels} not divisible by groups {}",
                geom.groups
            )));
        }
        let cpg = in_channels / geom.groups;
        let shape = vec![out_channels, cpg, kernel, kernel];
        let weight = store.add(
            format!("{name}.weight"),
            ParamGroup::Weight,
            fan_in_uniform(shape, cpg * kernel * kernel, rng),
        );
        Ok(Conv2d {
            weight,
            in_channels,
            out_channels,
            kernel,
            geom,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.var(tape, self.weight);
        tape.conv2d(x, w, self.geom)
    }

    pub fn params(&self) -> usize {
        self.out_channels * (self.in_channels / self.geom.groups) * self.kernel * self.kernel
    }

    /// Output spatial size and MACs for an `h x w` input, per sample.
    pub fn cost(&self, h: usize, w: usize) -> Result<(usize, usize, u64)> {
        let g = self.geom;
        let ho = crate::autodiff::conv::out_extent(h, self.kernel, g.stride, g.padding, g.dilation)
            .ok_or_else(|| shape_err!("kernel does not fit {h}x{w}"))?;
        let wo = crate::autodiff::conv::out_extent(w, self.kernel, g.stride, g.padding, g.dilation)
            .ok_or_else(|| shape_err!("kernel does not fit {h}x{w}"))?;
        Ok((ho, wo, (self.params() * ho * wo) as u64))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub stats: StatsId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, affine: bool) -> Self {
        let (gamma, beta) = if affine {
            (
                Some(store.add(format!("{name}.gamma"), ParamGroup::Weight, Tensor::full(vec![channels], 1.0))),
                Some(store.add(format!("{name}.beta"), ParamGroup::Weight, Tensor::zeros(vec![channels]))),
            )
        } else {
            (None, None)
        };
        let stats = store.add_stats(channels);
        BatchNorm {
            channels,
            gamma,
            beta,
            stats,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = self.gamma.map(|g| store.var(tape, g));
        let beta = self.beta.map(|b| store.var(tape, b));
        match mode {
            Mode::Train { update_stats } => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta)?;
                if update_stats {
                    store.update_stats(self.stats, &stats.mean, &stats.var, stats.count);
                }
                Ok(y)
            }
            Mode::Eval => {
                let s = store.stats(self.stats).clone();
                tape.batch_norm_eval(x, gamma, beta, &s.mean, &s.var)
            }
        }
    }

    pub fn params(&self) -> usize {
        if self.gamma.is_some() {
            2 * self.channels
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, in_features: usize, out_features: usize) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamGroup::Weight,
            fan_in_uniform(vec![out_features, in_features], in_features, rng),
        );
        let bias = store.add(format!("{name}.bias"), ParamGroup::Weight, Tensor::zeros(vec![out_features]));
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.var(tape, self.weight);
        let b = store.var(tape, self.bias);
        tape.linear(x, w, Some(b))
    }

    pub fn params(&self) -> usize {
        self.out_features * (self.in_features + 1)
    }

    pub fn macs(&self) -> u64 {
        (self.in_features * self.out_features) as u64
    }
}
