//! Full networks: a stem, a stack of cells and an embedding/classifier head.
//!
//! The same skeleton hosts the searchable supernet (every edge a partial-channel
//! mixed op over shared architecture matrices) and the discrete network built
//! from a genotype.

use serde::{Deserialize, Serialize};

use crate::autodiff::conv::ConvGeom;
use crate::autodiff::{Tape, Var};
use crate::cell::{Bottom, CellTemplate, CellType, INTERMEDIATE_NODES};
use crate::cost::CostReport;
use crate::error::{shape_err, Error, Result};
use crate::genotype::{Genotype, GenotypeEdge, GenotypeShape};
use crate::nn::{BatchNorm, Conv2d, Linear, Mode, ParamGroup, ParamId, ParamStore};
use crate::search_space::{partial_mixed_op, sample_mask, strided_extent, Candidate, FactorizedReduce, MixedEdge, NUM_CANDIDATES};
use crate::tensor::Tensor;
use crate::SeededRng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub bottom: Bottom,
    pub in_channels: usize,
    /// Stem width and per-node width of the first cell.
    pub per_node_channels: usize,
    pub cells_total: usize,
    /// 1-based depths of the reduction cells.
    pub reduction_positions: Vec<usize>,
    pub embedding_dim: usize,
}

/// Shapes seen by one cell of a plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellLayout {
    pub cell_type: CellType,
    /// Per-node channel width inside the cell.
    pub channels: usize,
    /// Widths of the two most recent feature maps `[k-2, k-1]`.
    pub input_channels: [usize; 2],
    /// The `k-2` input has twice the spatial extent of the `k-1` input.
    pub reduce_skip_input: bool,
}

/// `count` reduction depths spread evenly over `cells` cells, the last at the final cell.
pub fn evenly_spaced_reductions(cells: usize, count: usize) -> Vec<usize> {
    (1..=count).map(|i| (i * cells + count / 2) / count).collect()
}

impl NetworkPlan {
    pub fn new(bottom: Bottom, per_node_channels: usize, cells_total: usize, reductions: usize, embedding_dim: usize) -> Result<Self> {
        let plan = NetworkPlan {
            bottom,
            in_channels: 3,
            per_node_channels,
            cells_total,
            reduction_positions: evenly_spaced_reductions(cells_total, reductions),
            embedding_dim,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.per_node_channels == 0 || self.embedding_dim == 0 {
            return fail("network widths must be positive".into());
        }
        if self.cells_total == 0 {
            return fail("cells_total must be positive".into());
        }
        if self.reduction_positions.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("reduction positions {:?} must be strictly increasing", self.reduction_positions));
        }
        if self.reduction_positions.iter().any(|&p| p == 0 || p > self.cells_total) {
            return fail(format!(
                "reduction positions {:?} must lie in 1..={}",
                self.reduction_positions, self.cells_total
            ));
        }
        Ok(())
    }

    pub fn cell_type(&self, index: usize) -> CellType {
        if self.reduction_positions.contains(&(index + 1)) {
            CellType::Reduction
        } else {
            CellType::Normal
        }
    }

    pub fn layouts(&self) -> Vec<CellLayout> {
        let mut out = Vec::with_capacity(self.cells_total);
        let mut channels = self.per_node_channels;
        let mut inputs = [self.per_node_channels; 2];
        let mut prev_reduction = false;
        for k in 0..self.cells_total {
            let cell_type = self.cell_type(k);
            if cell_type == CellType::Reduction {
                channels *= 2;
            }
            out.push(CellLayout {
                cell_type,
                channels,
                input_channels: inputs,
                reduce_skip_input: prev_reduction,
            });
            inputs = [inputs[1], INTERMEDIATE_NODES * channels];
            prev_reduction = cell_type == CellType::Reduction;
        }
        out
    }

    /// Width of the final cell output.
    pub fn final_channels(&self) -> usize {
        self.layouts().last().map_or(self.per_node_channels, |l| INTERMEDIATE_NODES * l.channels)
    }

    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        self.reduction_positions
            .iter()
            .fold((h, w), |(h, w), _| (strided_extent(h, 2), strided_extent(w, 2)))
    }

    pub fn genotype_shape(&self) -> GenotypeShape {
        GenotypeShape {
            bottom: self.bottom,
            per_node_channels: self.per_node_channels,
            cells_total: self.cells_total,
            reduction_positions: self.reduction_positions.clone(),
        }
    }

    pub fn from_genotype(genotype: &Genotype, in_channels: usize, embedding_dim: usize) -> Result<Self> {
        let plan = NetworkPlan {
            bottom: genotype.bottom,
            in_channels,
            per_node_channels: genotype.per_node_channels,
            cells_total: genotype.cells_total,
            reduction_positions: genotype.reduction_positions.clone(),
            embedding_dim,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Fails when the genotype was derived for a different network shape.
    pub fn check_genotype(&self, genotype: &Genotype) -> Result<()> {
        let mut conflicts = Vec::new();
        if genotype.bottom != self.bottom {
            conflicts.push(format!("bottom {} vs {}", genotype.bottom, self.bottom));
        }
        if genotype.per_node_channels != self.per_node_channels {
            conflicts.push(format!(
                "per_node_channels {} vs {}",
                genotype.per_node_channels, self.per_node_channels
            ));
        }
        if genotype.cells_total != self.cells_total {
            conflicts.push(format!("cells_total {} vs {}", genotype.cells_total, self.cells_total));
        }
        if genotype.reduction_positions != self.reduction_positions {
            conflicts.push(format!(
                "reduction_positions {:?} vs {:?}",
                genotype.reduction_positions, self.reduction_positions
            ));
        }
        if conflicts.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!("genotype conflicts with network config: {}", conflicts.join(", "))))
        }
    }
}

#[derive(Clone, Debug)]
enum Preprocess {
    /// ReLU, 1x1 convolution, BN.
    ReluConvBn { conv: Conv2d, bn: BatchNorm },
    Reduce(FactorizedReduce),
}

impl Preprocess {
    fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, c_in: usize, c_out: usize, reduce: bool, affine: bool) -> Result<Self> {
        if reduce {
            return Ok(Preprocess::Reduce(FactorizedReduce::new(store, rng, name, c_in, c_out, affine)?));
        }
        Ok(Preprocess::ReluConvBn {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), c_in, c_out, 1, ConvGeom::simple(1, 0))?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out, affine),
        })
    }

    fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        match self {
            Preprocess::ReluConvBn { conv, bn } => {
                let y = tape.relu(x)?;
                let y = conv.forward(tape, store, y)?;
                bn.forward(tape, store, y, mode)
            }
            Preprocess::Reduce(r) => r.forward(tape, store, x, mode),
        }
    }

    fn cost(&self, name: &str, h: usize, w: usize, report: &mut CostReport) -> Result<(usize, usize)> {
        match self {
            Preprocess::ReluConvBn { conv, bn } => {
                let (ho, wo, macs) = conv.cost(h, w)?;
                report.push(format!("{name}.conv"), conv.params(), macs);
                report.push(format!("{name}.bn"), bn.params(), 0);
                Ok((ho, wo))
            }
            Preprocess::Reduce(r) => r.cost(name, h, w, report),
        }
    }
}

#[derive(Clone, Debug)]
struct DiscreteEdge {
    edge: GenotypeEdge,
    op: Candidate,
}

#[derive(Clone, Debug)]
enum CellOps {
    Mixed(Vec<MixedEdge>),
    Discrete(Vec<DiscreteEdge>),
}

#[derive(Clone, Debug)]
struct Cell {
    template: CellTemplate,
    channels: usize,
    pre: Vec<Preprocess>,
    ops: CellOps,
}

impl Cell {
    fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        bottom: Bottom,
        layout: CellLayout,
        genotype: Option<&Genotype>,
        rate: f64,
    ) -> Result<Self> {
        let template = CellTemplate::new(bottom, layout.cell_type);
        let affine = genotype.is_some();
        let c = layout.channels;
        let pre = match bottom {
            Bottom::Single => vec![Preprocess::new(store, rng, &format!("{name}.pre"), layout.input_channels[1], c, false, affine)?],
            Bottom::Dual => vec![
                Preprocess::new(
                    store,
                    rng,
                    &format!("{name}.pre0"),
                    layout.input_channels[0],
                    c,
                    layout.reduce_skip_input,
                    affine,
                )?,
                Preprocess::new(store, rng, &format!("{name}.pre1"), layout.input_channels[1], c, false, affine)?,
            ],
        };
        let ops = match genotype {
            None => CellOps::Mixed(
                template
                    .edges
                    .iter()
                    .map(|e| {
                        let ename = format!("{name}.e{}", e.id);
                        MixedEdge::new(store, rng, &ename, e.id, c, template.edge_stride(e), rate, false)
                    })
                    .collect::<Result<_>>()?,
            ),
            Some(g) => CellOps::Discrete(
                g.edges(layout.cell_type)
                    .iter()
                    .map(|&edge| {
                        let te = template
                            .edge_between(edge.from, edge.to)
                            .ok_or_else(|| Error::Validation(format!("edge {}->{} not in template", edge.from, edge.to)))?;
                        let ename = format!("{name}.e{}.{}", te.id, edge.op);
                        let op = Candidate::new(store, rng, &ename, edge.op, c, template.edge_stride(te), true)?;
                        Ok(DiscreteEdge { edge, op })
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Cell {
            template,
            channels: c,
            pre,
            ops,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        inputs: [Var; 2],
        alpha: Option<(Var, f64)>,
        rng: &mut SeededRng,
        mode: Mode,
    ) -> Result<Var> {
        let mut states = Vec::with_capacity(self.template.num_nodes());
        match self.pre.as_slice() {
            [p] => states.push(p.forward(tape, store, inputs[1], mode)?),
            [p0, p1] => {
                states.push(p0.forward(tape, store, inputs[0], mode)?);
                states.push(p1.forward(tape, store, inputs[1], mode)?);
            }
            _ => unreachable!("cells have one or two inputs"),
        }
        for to in self.template.intermediate_nodes() {
            let mut parts = Vec::new();
            match &self.ops {
                CellOps::Mixed(edges) => {
                    let (alpha, rate) = alpha.ok_or_else(|| Error::Contract("supernet cell needs architecture weights".into()))?;
                    for e in self.template.incoming(to) {
                        let row = tape.slice_rows(alpha, e.id, 1)?;
                        let mask = sample_mask(e.id, self.channels, rate, rng);
                        parts.push(partial_mixed_op(tape, store, states[e.from], row, &edges[e.id], &mask, mode)?);
                    }
                }
                CellOps::Discrete(edges) => {
                    for d in edges.iter().filter(|d| d.edge.to == to) {
                        parts.push(d.op.forward(tape, store, states[d.edge.from], mode)?);
                    }
                }
            }
            let mut node = parts[0];
            for &p in &parts[1..] {
                node = tape.add(node, p)?;
            }
            states.push(node);
        }
        tape.concat_channels(&states[self.template.num_inputs()..])
    }

    fn op_count(&self) -> usize {
        match &self.ops {
            CellOps::Mixed(edges) => edges.len() * NUM_CANDIDATES,
            CellOps::Discrete(edges) => edges.len(),
        }
    }

    fn cost(&self, name: &str, extents: [(usize, usize); 2], report: &mut CostReport) -> Result<(usize, usize)> {
        let mut node_hw = Vec::new();
        match self.pre.as_slice() {
            [p] => node_hw.push(p.cost(&format!("{name}.pre"), extents[1].0, extents[1].1, report)?),
            [p0, p1] => {
                node_hw.push(p0.cost(&format!("{name}.pre0"), extents[0].0, extents[0].1, report)?);
                node_hw.push(p1.cost(&format!("{name}.pre1"), extents[1].0, extents[1].1, report)?);
            }
            _ => unreachable!("cells have one or two inputs"),
        }
        for to in self.template.intermediate_nodes() {
            let mut out = None;
            match &self.ops {
                CellOps::Mixed(edges) => {
                    for e in self.template.incoming(to) {
                        let (h, w) = node_hw[e.from];
                        out = Some(edges[e.id].cost(&format!("{name}.e{}", e.id), h, w, report)?);
                    }
                }
                CellOps::Discrete(edges) => {
                    for d in edges.iter().filter(|d| d.edge.to == to) {
                        let (h, w) = node_hw[d.edge.from];
                        let id = self.template.edge_between(d.edge.from, to).map_or(0, |e| e.id);
                        out = Some(d.op.cost(&format!("{name}.e{id}.{}", d.op.kind), h, w, report)?);
                    }
                }
            }
            node_hw.push(out.ok_or_else(|| shape_err!("{name}: node {to} has no incoming edge"))?);
        }
        Ok(node_hw[self.template.num_inputs()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchParams {
    pub normal: ParamId,
    pub reduction: ParamId,
}

pub struct NetOutput {
    /// `N x D` embedding.
    pub embedding: Var,
    /// `N x 1` foreground probability.
    pub prob: Var,
}

/// A stem, stacked cells and the head, together with their parameters.
pub struct Network {
    pub plan: NetworkPlan,
    pub store: ParamStore,
    /// Present for supernets.
    pub arch: Option<ArchParams>,
    /// Fraction of channels entering the candidates of each supernet edge.
    pub channel_rate: f64,
    stem: Conv2d,
    stem_bn: BatchNorm,
    cells: Vec<Cell>,
    embed: Linear,
    classifier: Linear,
}

impl Network {
    /// Supernet with zero-initialized architecture matrices shared by all cells of a type.
    pub fn supernet(plan: &NetworkPlan, channel_rate: f64, rng: &mut SeededRng) -> Result<Self> {
        if !(channel_rate > 0.0 && channel_rate <= 1.0) {
            return Err(Error::Config(format!("channel rate must be in (0, 1], got {channel_rate}")));
        }
        Self::build(plan, None, channel_rate, rng)
    }

    /// Freshly initialized network containing only the genotype's edges.
    pub fn discrete(genotype: &Genotype, plan: &NetworkPlan, rng: &mut SeededRng) -> Result<Self> {
        genotype.validate()?;
        plan.check_genotype(genotype)?;
        Self::build(plan, Some(genotype), 1.0, rng)
    }

    fn build(plan: &NetworkPlan, genotype: Option<&Genotype>, channel_rate: f64, rng: &mut SeededRng) -> Result<Self> {
        plan.validate()?;
        let mut store = ParamStore::new();
        let arch = if genotype.is_none() {
            let edges = CellTemplate::new(plan.bottom, CellType::Normal).edges.len();
            Some(ArchParams {
                normal: store.add("alpha.normal", ParamGroup::Arch, Tensor::zeros(vec![edges, NUM_CANDIDATES])),
                reduction: store.add("alpha.reduction", ParamGroup::Arch, Tensor::zeros(vec![edges, NUM_CANDIDATES])),
            })
        } else {
            None
        };
        let c0 = plan.per_node_channels;
        let stem = Conv2d::new(&mut store, rng, "stem.conv", plan.in_channels, c0, 3, ConvGeom::simple(1, 1))?;
        let stem_bn = BatchNorm::new(&mut store, "stem.bn", c0, true);
        let cells = plan
            .layouts()
            .into_iter()
            .enumerate()
            .map(|(k, layout)| Cell::new(&mut store, rng, &format!("cell{k}"), plan.bottom, layout, genotype, channel_rate))
            .collect::<Result<Vec<_>>>()?;
        let embed = Linear::new(&mut store, rng, "head.embed", plan.final_channels(), plan.embedding_dim);
        let classifier = Linear::new(&mut store, rng, "head.classifier", plan.embedding_dim, 1);
        Ok(Network {
            plan: plan.clone(),
            store,
            arch,
            channel_rate,
            stem,
            stem_bn,
            cells,
            embed,
            classifier,
        })
    }

    pub fn is_supernet(&self) -> bool {
        self.arch.is_some()
    }

    /// Architecture matrices `(normal, reduction)` of a supernet.
    pub fn alphas(&self) -> Option<(&Tensor, &Tensor)> {
        self.arch
            .map(|a| (&self.store.get(a.normal).value, &self.store.get(a.reduction).value))
    }

    /// Operation instances per cell: all candidates of all edges for a supernet.
    pub fn cell_op_counts(&self) -> Vec<usize> {
        self.cells.iter().map(Cell::op_count).collect()
    }

    /// `rng` drives channel masks and is untouched by discrete networks.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode, rng: &mut SeededRng) -> Result<NetOutput> {
        let (_, c, _, _) = tape.value(x).dims4()?;
        if c != self.plan.in_channels {
            return Err(shape_err!("network expects {} input channels, got {c}", self.plan.in_channels));
        }
        let store = &mut self.store;
        let alphas = self.arch.map(|a| (store.var(tape, a.normal), store.var(tape, a.reduction)));
        let y = self.stem.forward(tape, store, x)?;
        let stem = self.stem_bn.forward(tape, store, y, mode)?;
        let mut inputs = [stem, stem];
        for cell in &self.cells {
            let alpha = alphas.map(|(n, r)| {
                let a = match cell.template.cell_type {
                    CellType::Normal => n,
                    CellType::Reduction => r,
                };
                (a, self.channel_rate)
            });
            let out = cell.forward(tape, store, inputs, alpha, rng, mode)?;
            inputs = [inputs[1], out];
        }
        let pooled = tape.global_avg_pool(inputs[1])?;
        let embedding = self.embed.forward(tape, store, pooled)?;
        let logit = self.classifier.forward(tape, store, embedding)?;
        let prob = tape.sigmoid(logit)?;
        Ok(NetOutput { embedding, prob })
    }

    /// Per-layer parameters and per-sample MACs for an `h x w` input.
    pub fn cost(&self, h: usize, w: usize) -> Result<CostReport> {
        let mut report = CostReport::default();
        let (h, w, macs) = self.stem.cost(h, w)?;
        report.push("stem.conv", self.stem.params(), macs);
        report.push("stem.bn", self.stem_bn.params(), 0);
        let mut extents = [(h, w), (h, w)];
        for (k, cell) in self.cells.iter().enumerate() {
            let out = cell.cost(&format!("cell{k}"), extents, &mut report)?;
            extents = [extents[1], out];
        }
        report.push("head.embed", self.embed.params(), self.embed.macs());
        report.push("head.classifier", self.classifier.params(), self.classifier.macs());
        Ok(report)
    }
}
