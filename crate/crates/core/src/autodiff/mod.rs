//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs are strictly earlier nodes, so
//! the tape order is a topological order and [`Tape::backward`] is a single
//! reverse sweep visiting each node once.

pub mod conv;
pub mod pool;

use std::collections::HashMap;

pub use conv::ConvGeom;
pub use pool::PoolKind;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements reduced per channel.
    pub count: usize,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        dims: conv::ConvDims,
    },
    Pool {
        input: Var,
        kind: PoolKind,
        dims: pool::PoolDims,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        /// Empty without affine parameters, where it equals the output.
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Batch statistics were used (gradient flows through mean and variance).
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        input: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Concat {
        inputs: Vec<Var>,
        channels: Vec<usize>,
    },
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    Merge {
        selected: Var,
        rest: Var,
        mask: Vec<bool>,
    },
    Replace {
        base: Var,
        selected: Var,
        mask: Vec<bool>,
    },
    Shift {
        input: Var,
        dy: usize,
        dx: usize,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Mix {
        weights: Var,
        inputs: Vec<Var>,
    },
    RowSlice {
        input: Var,
        start: usize,
    },
    PairwiseDistance(Var),
    RowDistance(Var, Var),
    BatchHardTriplet {
        dist: Var,
        /// `(anchor, hardest positive, hardest negative)` for every active hinge.
        active: Vec<(usize, usize, usize)>,
    },
    BinaryCrossEntropy {
        input: Var,
        target: Vec<f64>,
    },
    L2NormalizeRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "Leaf",
            Op::Conv2d { .. } => "Conv2d",
            Op::Pool { .. } => "Pool",
            Op::BatchNorm { .. } => "BatchNorm",
            Op::Relu(..) => "Relu",
            Op::Sigmoid(..) => "Sigmoid",
            Op::Softmax { .. } => "Softmax",
            Op::Add(..) => "Add",
            Op::Mul(..) => "Mul",
            Op::Scale(..) => "Scale",
            Op::Sum(..) => "Sum",
            Op::Concat { .. } => "Concat",
            Op::Gather { .. } => "Gather",
            Op::Merge { .. } => "Merge",
            Op::Replace { .. } => "Replace",
            Op::Shift { .. } => "Shift",
            Op::GlobalAvgPool(..) => "GlobalAvgPool",
            Op::Linear { .. } => "Linear",
            Op::Mix { .. } => "Mix",
            Op::RowSlice { .. } => "RowSlice",
            Op::PairwiseDistance(..) => "PairwiseDistance",
            Op::RowDistance(..) => "RowDistance",
            Op::BatchHardTriplet { .. } => "BatchHardTriplet",
            Op::BinaryCrossEntropy { .. } => "BinaryCrossEntropy",
            Op::L2NormalizeRows(..) => "L2NormalizeRows",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn get_slice(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0)?.as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    tagged: HashMap<usize, Var>,
    tags: Vec<(Var, usize)>,
    macs: u64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BCE_CLAMP: f64 = 1e-7;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations executed by convolution and linear nodes so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Values held by the tape, for memory diagnostics: `(nodes, f64 elements)`
    /// per operation kind.
    pub fn footprint(&self) -> Vec<(&'static str, usize, usize)> {
        let mut by_kind: Vec<(&'static str, usize, usize)> = Vec::new();
        for n in &self.nodes {
            let kind = n.op.name();
            let extra = match &n.op {
                Op::BatchNorm { xhat, .. } => xhat.len(),
                Op::Pool { argmax, .. } => argmax.len(),
                _ => 0,
            };
            match by_kind.iter_mut().find(|e| e.0 == kind) {
                Some(e) => {
                    e.1 += 1;
                    e.2 += n.value.len() + extra;
                }
                None => by_kind.push((kind, 1, n.value.len() + extra)),
            }
        }
        by_kind
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf keyed by an external tag; repeated requests for the same tag return the same node.
    pub fn tagged_leaf(&mut self, tag: usize, requires_grad: bool, value: impl FnOnce() -> Tensor) -> Var {
        if let Some(&v) = self.tagged.get(&tag) {
            return v;
        }
        let v = self.leaf(value(), requires_grad);
        self.tagged.insert(tag, v);
        self.tags.push((v, tag));
        v
    }

    /// Tagged leaves in creation order.
    pub fn tagged_leaves(&self) -> &[(Var, usize)] {
        &self.tags
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{op}: operand shapes differ, {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, geom: ConvGeom) -> Result<Var> {
        let dims = conv::ConvDims::resolve(self.shape(input), self.shape(weight), geom)?;
        let out = conv::forward(&dims, self.value(input).data(), self.value(weight).data());
        self.macs += dims.macs();
        let value = Tensor::new(vec![dims.n, dims.o, dims.ho, dims.wo], out)?;
        self.push(value, Op::Conv2d { input, weight, dims }, &[input, weight], "conv2d")
    }

    pub fn pool2d(&mut self, input: Var, kind: PoolKind, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let dims = pool::PoolDims::resolve(self.shape(input), k, stride, padding)?;
        let (out, argmax) = pool::forward(&dims, kind, self.value(input).data());
        let value = Tensor::new(vec![dims.n, dims.c, dims.ho, dims.wo], out)?;
        self.push(
            value,
            Op::Pool {
                input,
                kind,
                dims,
                argmax,
            },
            &[input],
            "pool2d",
        )
    }

    fn channel_layout(&self, input: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(input);
        if s.len() < 2 {
            return Err(shape_err!("batch norm needs a channel axis, got {s:?}"));
        }
        Ok((s[0], s[1], s[2..].iter().product()))
    }

    fn affine_check(&self, c: usize, p: Option<Var>, what: &str) -> Result<()> {
        if let Some(p) = p {
            if self.shape(p) != [c] {
                return Err(shape_err!("batch norm {what} must have shape [{c}], got {:?}", self.shape(p)));
            }
        }
        Ok(())
    }

    /// Batch norm over axis 1 using the statistics of this batch.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<(Var, BatchStats)> {
        let (n, c, inner) = self.channel_layout(input)?;
        self.affine_check(c, gamma, "scale")?;
        self.affine_check(c, beta, "shift")?;
        let x = self.value(input).data();
        let count = n * inner;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += x[(b * c + ch) * inner..][..inner].iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut sq = 0.0;
            for b in 0..n {
                sq += x[(b * c + ch) * inner..][..inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = sq / count as f64;
        }
        let stats = BatchStats { mean, var, count };
        let v = self.normalize(input, gamma, beta, &stats.mean, &stats.var, true)?;
        Ok((v, stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Option<Var>, beta: Option<Var>, mean: &[f64], var: &[f64]) -> Result<Var> {
        let (_, c, _) = self.channel_layout(input)?;
        self.affine_check(c, gamma, "scale")?;
        self.affine_check(c, beta, "shift")?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err!("batch norm running stats have {} entries, input has {c} channels", mean.len()));
        }
        self.normalize(input, gamma, beta, mean, var, false)
    }

    fn normalize(&mut self, input: Var, gamma: Option<Var>, beta: Option<Var>, mean: &[f64], var: &[f64], train: bool) -> Result<Var> {
        let (n, c, inner) = self.channel_layout(input)?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let x = self.value(input).data();
        let mut xhat = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let affine = gamma.is_some() || beta.is_some();
        let mut out = if affine { xhat.clone() } else { std::mem::take(&mut xhat) };
        if affine {
            let g = gamma.map(|g| self.value(g).data().to_vec());
            let bt = beta.map(|b| self.value(b).data().to_vec());
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    let scale = g.as_ref().map_or(1.0, |g| g[ch]);
                    let shift = bt.as_ref().map_or(0.0, |s| s[ch]);
                    for v in &mut out[off..off + inner] {
                        *v = *v * scale + shift;
                    }
                }
            }
        }
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        let mut inputs = vec![input];
        inputs.extend(gamma);
        inputs.extend(beta);
        self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &inputs,
            "batch_norm",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x], "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push(value, Op::Sigmoid(x), &[x], "sigmoid")
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("softmax axis {axis} out of range for shape {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * axis_len + k) * inner + i;
                let m = (0..axis_len).map(|k| data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..axis_len {
                    let e = (data[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..axis_len {
                    out[at(k)] /= z;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Softmax {
                input: x,
                outer,
                axis_len,
                inner,
            },
            &[x],
            "softmax",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x], "scale")
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x], "sum")
    }

    /// Concatenation along axis 1 (channels).
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if base.len() < 2 {
            return Err(shape_err!("concat needs a channel axis, got {base:?}"));
        }
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(shape_err!("concat: shape {s:?} incompatible with {base:?}"));
            }
            channels.push(s[1]);
        }
        let n = base[0];
        let inner: usize = base[2..].iter().product();
        let total: usize = channels.iter().sum();
        let mut out = Vec::with_capacity(n * total * inner);
        for b in 0..n {
            for (&v, &c) in inputs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(v).data()[b * c * inner..][..c * inner]);
            }
        }
        let mut shape = base;
        shape[1] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                channels,
            },
            inputs,
            "concat",
        )
    }

    /// Selects channels (axis 1) in the given order.
    pub fn gather_channels(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || index.is_empty() {
            return Err(shape_err!("gather_channels on {shape:?} with {} indices", index.len()));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(shape_err!("channel index {bad} out of range for {c} channels"));
        }
        let inner: usize = shape[2..].iter().product();
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n * index.len() * inner);
        for b in 0..n {
            for &ch in index {
                out.extend_from_slice(&data[(b * c + ch) * inner..][..inner]);
            }
        }
        let mut oshape = shape;
        oshape[1] = index.len();
        let value = Tensor::new(oshape, out)?;
        self.push(
            value,
            Op::Gather {
                input: x,
                index: index.to_vec(),
            },
            &[x],
            "gather_channels",
        )
    }

    /// Interleaves `selected` and `rest` back into channel positions given by `mask`
    /// (`true` positions take channels of `selected` in order).
    pub fn merge_channels(&mut self, selected: Var, rest: Var, mask: &[bool]) -> Result<Var> {
        let ss = self.shape(selected).to_vec();
        let rs = self.shape(rest).to_vec();
        let k = mask.iter().filter(|&&m| m).count();
        if ss.len() < 2 || ss.len() != rs.len() || ss[0] != rs[0] || ss[2..] != rs[2..] {
            return Err(shape_err!("merge_channels: incompatible shapes {ss:?} and {rs:?}"));
        }
        if ss[1] != k || rs[1] != mask.len() - k {
            return Err(shape_err!(
                "merge_channels: mask selects {k} of {} channels but operands have {} and {}",
                mask.len(),
                ss[1],
                rs[1]
            ));
        }
        let n = ss[0];
        let inner: usize = ss[2..].iter().product();
        let sd = self.value(selected).data();
        let rd = self.value(rest).data();
        let c = mask.len();
        let mut out = Vec::with_capacity(n * c * inner);
        for b in 0..n {
            let (mut si, mut ri) = (0, 0);
            for &m in mask {
                if m {
                    out.extend_from_slice(&sd[(b * k + si) * inner..][..inner]);
                    si += 1;
                } else {
                    out.extend_from_slice(&rd[(b * (c - k) + ri) * inner..][..inner]);
                    ri += 1;
                }
            }
        }
        let mut shape = ss;
        shape[1] = c;
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Merge {
                selected,
                rest,
                mask: mask.to_vec(),
            },
            &[selected, rest],
            "merge_channels",
        )
    }

    /// `base` with the channels flagged in `mask` taken, in order, from `selected`.
    pub fn replace_channels(&mut self, base: Var, selected: Var, mask: &[bool]) -> Result<Var> {
        let bs = self.shape(base).to_vec();
        let ss = self.shape(selected).to_vec();
        let k = mask.iter().filter(|&&m| m).count();
        if bs.len() < 2 || ss.len() != bs.len() || ss[0] != bs[0] || ss[2..] != bs[2..] {
            return Err(shape_err!("replace_channels: incompatible shapes {bs:?} and {ss:?}"));
        }
        if bs[1] != mask.len() || ss[1] != k {
            return Err(shape_err!(
                "replace_channels: mask selects {k} of {} channels but operands have {} and {}",
                mask.len(),
                bs[1],
                ss[1]
            ));
        }
        let n = bs[0];
        let inner: usize = bs[2..].iter().product();
        let c = mask.len();
        let mut out = self.value(base).data().to_vec();
        let sd = self.value(selected).data();
        for b in 0..n {
            let mut si = 0;
            for (ch, &m) in mask.iter().enumerate() {
                if m {
                    out[(b * c + ch) * inner..][..inner].copy_from_slice(&sd[(b * k + si) * inner..][..inner]);
                    si += 1;
                }
            }
        }
        let value = Tensor::new(bs, out)?;
        self.push(
            value,
            Op::Replace {
                base,
                selected,
                mask: mask.to_vec(),
            },
            &[base, selected],
            "replace_channels",
        )
    }

    /// `out[.., h, w] = x[.., h + dy, w + dx]`, zero outside the input.
    pub fn shift2d(&mut self, x: Var, dy: usize, dx: usize) -> Result<Var> {
        let value = {
            let t = self.value(x);
            let (n, c, h, w) = t.dims4()?;
            let src = t.data();
            let mut out = vec![0.0; src.len()];
            for p in 0..n * c {
                for oh in 0..h.saturating_sub(dy) {
                    let s = p * h * w + (oh + dy) * w;
                    let d = p * h * w + oh * w;
                    let len = w.saturating_sub(dx);
                    out[d..d + len].copy_from_slice(&src[s + dx..s + dx + len]);
                }
            }
            Tensor::new(t.shape().to_vec(), out)?
        };
        self.push(value, Op::Shift { input: x, dy, dx }, &[x], "shift2d")
    }

    /// NCHW -> NC mean over spatial positions.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = {
            let t = self.value(x);
            let (n, c, h, w) = t.dims4()?;
            let hw = h * w;
            let data = t.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
            Tensor::new(vec![n, c], data)?
        };
        self.push(value, Op::GlobalAvgPool(x), &[x], "global_avg_pool")
    }

    /// `x (N x In) @ weight^T (Out x In) + bias`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, fin) = self.value(x).dims2()?;
        let (fout, win) = self.value(weight).dims2()?;
        if fin != win {
            return Err(shape_err!("linear: input has {fin} features, weight expects {win}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [fout] {
                return Err(shape_err!("linear: bias shape {:?}, expected [{fout}]", self.shape(b)));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let bd = bias.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * fout];
        for r in 0..n {
            let xr = &xd[r * fin..][..fin];
            for o in 0..fout {
                let wr = &wd[o * fin..][..fin];
                let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                out[r * fout + o] = dot + bd.map_or(0.0, |b| b[o]);
            }
        }
        self.macs += (n * fin * fout) as u64;
        let value = Tensor::new(vec![n, fout], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(value, Op::Linear { input: x, weight, bias }, &inputs, "linear")
    }

    /// `sum_k weights[k] * inputs[k]`; `weights` holds exactly `inputs.len()` elements.
    pub fn mix(&mut self, weights: Var, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| shape_err!("mix of zero tensors"))?;
        if self.value(weights).len() != inputs.len() {
            return Err(shape_err!(
                "mix: {} inputs but weight tensor has shape {:?}",
                inputs.len(),
                self.shape(weights)
            ));
        }
        for &v in inputs {
            self.same_shape(first, v, "mix")?;
        }
        let w = self.value(weights).data().to_vec();
        let mut out = vec![0.0; self.value(first).len()];
        for (&v, &wk) in inputs.iter().zip(&w) {
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += wk * x;
            }
        }
        let value = Tensor::new(self.shape(first).to_vec(), out)?;
        let mut all = vec![weights];
        all.extend_from_slice(inputs);
        self.push(
            value,
            Op::Mix {
                weights,
                inputs: inputs.to_vec(),
            },
            &all,
            "mix",
        )
    }

    /// Rows `[start, start + len)` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(shape_err!("slice_rows [{start}, {}) out of range for {shape:?}", start + len));
        }
        let row: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut oshape = shape;
        oshape[0] = len;
        let value = Tensor::new(oshape, data)?;
        self.push(value, Op::RowSlice { input: x, start }, &[x], "slice_rows")
    }

    /// `B x D -> B x B` Euclidean distances between rows.
    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        let (b, d) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in i + 1..b {
                let s: f64 = (0..d).map(|k| (xd[i * d + k] - xd[j * d + k]).powi(2)).sum();
                let dist = s.sqrt();
                out[i * b + j] = dist;
                out[j * b + i] = dist;
            }
        }
        let value = Tensor::new(vec![b, b], out)?;
        self.push(value, Op::PairwiseDistance(x), &[x], "pairwise_distance")
    }

    /// Per-row Euclidean distance between two `B x D` tensors.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_distance")?;
        let (rows, d) = self.value(a).dims2()?;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let out = (0..rows)
            .map(|r| (0..d).map(|k| (ad[r * d + k] - bd[r * d + k]).powi(2)).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::new(vec![rows], out)?;
        self.push(value, Op::RowDistance(a, b), &[a, b], "row_distance")
    }

    /// Batch-hard triplet hinge summed over anchors, given a `B x B` distance matrix.
    ///
    /// For each anchor the hardest positive is the farthest sample sharing its label
    /// (the anchor itself counts, so a singleton identity yields 0) and the hardest
    /// negative is the nearest sample with a different label. Ties go to the lowest index.
    pub fn batch_hard_triplet(&mut self, dist: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let (b, b2) = self.value(dist).dims2()?;
        if b != b2 || labels.len() != b {
            return Err(shape_err!(
                "batch_hard_triplet: distance matrix {b}x{b2} with {} labels",
                labels.len()
            ));
        }
        let d = self.value(dist).data();
        let mut hinges = Vec::with_capacity(b);
        let mut active = Vec::new();
        for a in 0..b {
            let mut pos = a;
            let mut neg = None::<usize>;
            for j in 0..b {
                let dj = d[a * b + j];
                if labels[j] == labels[a] {
                    if dj > d[a * b + pos] {
                        pos = j;
                    }
                } else if neg.is_none_or(|n| dj < d[a * b + n]) {
                    neg = Some(j);
                }
            }
            let neg = neg.ok_or_else(|| Error::Config("batch_hard_triplet needs at least two identities".into()))?;
            let hinge = margin + d[a * b + pos] - d[a * b + neg];
            if hinge > 0.0 {
                hinges.push(hinge);
                active.push((a, pos, neg));
            }
        }
        self.push(Tensor::scalar(compensated_sum(&hinges)), Op::BatchHardTriplet { dist, active }, &[dist], "batch_hard_triplet")
    }

    /// `-sum(y ln h + (1 - y) ln(1 - h))` with `h` clamped to `[1e-7, 1 - 1e-7]`.
    pub fn binary_cross_entropy(&mut self, h: Var, target: &[f64]) -> Result<Var> {
        let hd = self.value(h).data();
        if hd.len() != target.len() {
            return Err(shape_err!("bce: {} predictions vs {} targets", hd.len(), target.len()));
        }
        let total: f64 = hd
            .iter()
            .zip(target)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        self.push(
            Tensor::scalar(total),
            Op::BinaryCrossEntropy {
                input: h,
                target: target.to_vec(),
            },
            &[h],
            "binary_cross_entropy",
        )
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let value = {
            let t = self.value(x);
            let (_, d) = t.dims2()?;
            let data = t
                .data()
                .chunks(d)
                .flat_map(|r| {
                    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    r.iter().map(move |v| v / norm)
                })
                .collect();
            Tensor::new(t.shape().to_vec(), data)?
        };
        self.push(value, Op::L2NormalizeRows(x), &[x], "l2_normalize_rows")
    }

    /// Reverse sweep from a one-element `loss`, seeded with 1.
    ///
    /// Each call returns fresh gradients; accumulation across calls is the
    /// caller's concern (see `ParamStore::accumulate`).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        let shapes = self.nodes[..=loss.0].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Like [`Tape::backward`], but frees every node value once its gradient
    /// has been propagated, keeping peak memory near the forward tape size.
    /// Only leaf gradients are available afterwards and node values are dropped.
    pub fn backward_release(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let shapes = self.nodes[..=loss.0].iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = std::mem::replace(
                &mut self.nodes[idx],
                Node {
                    value: Tensor::zeros(vec![1]),
                    requires_grad: false,
                    op: Op::Leaf,
                },
            );
            let Some(g) = grads[idx].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, dims } => {
                if self.wants(*input) {
                    acc(*input, conv::backward_input(dims, g, self.value(*weight).data()));
                }
                if self.wants(*weight) {
                    acc(*weight, conv::backward_weight(dims, g, self.value(*input).data()));
                }
            }
            Op::Pool {
                input,
                kind,
                dims,
                argmax,
            } => {
                if self.wants(*input) {
                    acc(*input, pool::backward(dims, *kind, argmax, g));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.shape(*input);
                let (n, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
                let count = (n * inner) as f64;
                let xhat: &[f64] = if xhat.is_empty() { node.value.data() } else { xhat };
                let gvals = gamma.map(|v| self.value(v).data());
                if let Some(beta) = beta.filter(|b| self.wants(*b)) {
                    let mut gb = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            gb[ch] += g[(b * c + ch) * inner..][..inner].iter().sum::<f64>();
                        }
                    }
                    acc(beta, gb);
                }
                if let Some(gamma) = gamma.filter(|v| self.wants(*v)) {
                    let mut gg = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * inner;
                            gg[ch] += (off..off + inner).map(|i| g[i] * xhat[i]).sum::<f64>();
                        }
                    }
                    acc(gamma, gg);
                }
                if self.wants(*input) {
                    let scale = |ch: usize| gvals.map_or(1.0, |gv| gv[ch]);
                    let mut gx = vec![0.0; g.len()];
                    if *train {
                        let mut sum_dy = vec![0.0; c];
                        let mut sum_dy_xhat = vec![0.0; c];
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * inner;
                                for i in off..off + inner {
                                    sum_dy[ch] += g[i];
                                    sum_dy_xhat[ch] += g[i] * xhat[i];
                                }
                            }
                        }
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * inner;
                                let k = scale(ch) * inv_std[ch] / count;
                                for i in off..off + inner {
                                    gx[i] = k * (count * g[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch]);
                                }
                            }
                        }
                    } else {
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * inner;
                                let k = scale(ch) * inv_std[ch];
                                for i in off..off + inner {
                                    gx[i] = k * g[i];
                                }
                            }
                        }
                    }
                    acc(*input, gx);
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                acc(*x, g.iter().zip(xd).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Softmax {
                input,
                outer,
                axis_len,
                inner,
            } => {
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |k: usize| (o * axis_len + k) * inner + i;
                        let dot: f64 = (0..*axis_len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..*axis_len {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                acc(*input, gx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.iter().zip(self.value(*b).data()).map(|(g, v)| g * v).collect());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().zip(self.value(*a).data()).map(|(g, v)| g * v).collect());
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::Concat { inputs, channels } => {
                let s = node.value.shape();
                let n = s[0];
                let inner: usize = s[2..].iter().product();
                let total: usize = channels.iter().sum();
                let mut offset = 0;
                for (&v, &c) in inputs.iter().zip(channels) {
                    if self.wants(v) {
                        let mut part = Vec::with_capacity(n * c * inner);
                        for b in 0..n {
                            part.extend_from_slice(&g[(b * total + offset) * inner..][..c * inner]);
                        }
                        acc(v, part);
                    }
                    offset += c;
                }
            }
            Op::Gather { input, index } => {
                let s = self.shape(*input);
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let k = index.len();
                let mut gx = vec![0.0; n * c * inner];
                for b in 0..n {
                    for (j, &ch) in index.iter().enumerate() {
                        let src = &g[(b * k + j) * inner..][..inner];
                        let dst = &mut gx[(b * c + ch) * inner..][..inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                acc(*input, gx);
            }
            Op::Merge { selected, rest, mask } => {
                let s = node.value.shape();
                let n = s[0];
                let inner: usize = s[2..].iter().product();
                let c = mask.len();
                let k = mask.iter().filter(|&&m| m).count();
                let mut gs = Vec::with_capacity(n * k * inner);
                let mut gr = Vec::with_capacity(n * (c - k) * inner);
                for b in 0..n {
                    for (ch, &m) in mask.iter().enumerate() {
                        let src = &g[(b * c + ch) * inner..][..inner];
                        if m {
                            gs.extend_from_slice(src);
                        } else {
                            gr.extend_from_slice(src);
                        }
                    }
                }
                if self.wants(*selected) {
                    acc(*selected, gs);
                }
                if self.wants(*rest) {
                    acc(*rest, gr);
                }
            }
            Op::Replace { base, selected, mask } => {
                let s = node.value.shape();
                let n = s[0];
                let inner: usize = s[2..].iter().product();
                let c = mask.len();
                let k = mask.iter().filter(|&&m| m).count();
                let mut gs = Vec::with_capacity(n * k * inner);
                let mut gb = g.to_vec();
                for b in 0..n {
                    for (ch, &m) in mask.iter().enumerate() {
                        if m {
                            let range = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                            gs.extend_from_slice(&g[range.clone()]);
                            gb[range].fill(0.0);
                        }
                    }
                }
                if self.wants(*selected) {
                    acc(*selected, gs);
                }
                if self.wants(*base) {
                    acc(*base, gb);
                }
            }
            Op::Shift { input, dy, dx } => {
                let s = node.value.shape();
                let (h, w) = (s[2], s[3]);
                let mut gx = vec![0.0; g.len()];
                for p in 0..s[0] * s[1] {
                    for oh in 0..h.saturating_sub(*dy) {
                        let src = p * h * w + oh * w;
                        let dst = p * h * w + (oh + dy) * w + dx;
                        let len = w.saturating_sub(*dx);
                        gx[dst..dst + len].copy_from_slice(&g[src..src + len]);
                    }
                }
                acc(*input, gx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let mut gx = Vec::with_capacity(s.iter().product());
                for &gv in g {
                    gx.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                acc(*x, gx);
            }
            Op::Linear { input, weight, bias } => {
                let (n, fin) = (self.shape(*input)[0], self.shape(*input)[1]);
                let fout = self.shape(*weight)[0];
                if self.wants(*input) {
                    let wd = self.value(*weight).data();
                    let mut gx = vec![0.0; n * fin];
                    for r in 0..n {
                        for o in 0..fout {
                            let go = g[r * fout + o];
                            let wr = &wd[o * fin..][..fin];
                            gx[r * fin..][..fin].iter_mut().zip(wr).for_each(|(d, w)| *d += go * w);
                        }
                    }
                    acc(*input, gx);
                }
                if self.wants(*weight) {
                    let xd = self.value(*input).data();
                    let mut gw = vec![0.0; fout * fin];
                    for r in 0..n {
                        let xr = &xd[r * fin..][..fin];
                        for o in 0..fout {
                            let go = g[r * fout + o];
                            gw[o * fin..][..fin].iter_mut().zip(xr).for_each(|(d, x)| *d += go * x);
                        }
                    }
                    acc(*weight, gw);
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let mut gb = vec![0.0; fout];
                    for r in 0..n {
                        gb.iter_mut().zip(&g[r * fout..][..fout]).for_each(|(d, v)| *d += v);
                    }
                    acc(b, gb);
                }
            }
            Op::Mix { weights, inputs } => {
                let w = self.value(*weights).data();
                if self.wants(*weights) {
                    let gw = inputs
                        .iter()
                        .map(|&v| self.value(v).data().iter().zip(g).map(|(x, g)| x * g).sum())
                        .collect();
                    acc(*weights, gw);
                }
                for (&v, &wk) in inputs.iter().zip(w) {
                    if self.wants(v) {
                        acc(v, g.iter().map(|g| g * wk).collect());
                    }
                }
            }
            Op::RowSlice { input, start } => {
                let total = self.value(*input).len();
                let row = total / self.shape(*input)[0];
                let mut gx = vec![0.0; total];
                gx[start * row..start * row + g.len()].copy_from_slice(g);
                acc(*input, gx);
            }
            Op::PairwiseDistance(x) => {
                let (b, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xd = self.value(*x).data();
                let dist = node.value.data();
                let mut gx = vec![0.0; b * d];
                for i in 0..b {
                    for j in 0..b {
                        let dij = dist[i * b + j];
                        if i == j || dij == 0.0 {
                            continue;
                        }
                        // d(dist_ij)/dx_i = (x_i - x_j) / dist_ij, and symmetrically for x_j
                        let coef = (g[i * b + j] + g[j * b + i]) / dij;
                        if j < i {
                            continue;
                        }
                        for k in 0..d {
                            let diff = xd[i * d + k] - xd[j * d + k];
                            gx[i * d + k] += coef * diff;
                            gx[j * d + k] -= coef * diff;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::RowDistance(a, b) => {
                let d = self.shape(*a)[1];
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let dist = node.value.data();
                let mut ga = vec![0.0; ad.len()];
                for (r, (&dr, &gr)) in dist.iter().zip(g).enumerate() {
                    if dr == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        ga[r * d + k] = gr * (ad[r * d + k] - bd[r * d + k]) / dr;
                    }
                }
                if self.wants(*b) {
                    acc(*b, ga.iter().map(|v| -v).collect());
                }
                if self.wants(*a) {
                    acc(*a, ga);
                }
            }
            Op::BatchHardTriplet { dist, active } => {
                let b = self.shape(*dist)[0];
                let mut gd = vec![0.0; b * b];
                for &(a, p, n) in active {
                    gd[a * b + p] += g[0];
                    gd[a * b + n] -= g[0];
                }
                acc(*dist, gd);
            }
            Op::BinaryCrossEntropy { input, target } => {
                let hd = self.value(*input).data();
                let gx = hd
                    .iter()
                    .zip(target)
                    .map(|(&p, &y)| {
                        if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                            0.0
                        } else {
                            g[0] * (-(y / p) + (1.0 - y) / (1.0 - p))
                        }
                    })
                    .collect();
                acc(*input, gx);
            }
            Op::L2NormalizeRows(x) => {
                let d = self.shape(*x)[1];
                let xd = self.value(*x).data();
                let y = node.value.data();
                let mut gx = vec![0.0; xd.len()];
                for r in 0..xd.len() / d {
                    let xr = &xd[r * d..][..d];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let yr = &y[r * d..][..d];
                    let gr = &g[r * d..][..d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        gx[r * d + k] = (gr[k] - yr[k] * dot) / norm;
                    }
                }
                acc(*x, gx);
            }
        }
    }
}


/// Neumaier summation: the correctly rounded sum in all but pathological cases.
fn compensated_sum(values: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}
