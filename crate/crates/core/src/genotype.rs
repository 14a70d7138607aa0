//! Discrete architectures: derivation from architecture weights, validation,
//! the genotype text file and DOT rendering.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cell::{Bottom, CellTemplate, CellType, INTERMEDIATE_NODES};
use crate::error::{shape_err, Error, Result};
use crate::search_space::{OpKind, NUM_CANDIDATES};
use crate::tensor::Tensor;

pub const GENOTYPE_FORMAT: &str = "cellnas-genotype";
pub const GENOTYPE_VERSION: u32 = 1;

/// A retained edge `(to_node, from_node, op)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize, OpKind)", into = "(usize, usize, OpKind)")]
pub struct GenotypeEdge {
    pub to: usize,
    pub from: usize,
    pub op: OpKind,
}

impl From<(usize, usize, OpKind)> for GenotypeEdge {
    fn from((to, from, op): (usize, usize, OpKind)) -> Self {
        GenotypeEdge { to, from, op }
    }
}

impl From<GenotypeEdge> for (usize, usize, OpKind) {
    fn from(e: GenotypeEdge) -> Self {
        (e.to, e.from, e.op)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub epoch: usize,
    pub alpha_checksum: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub format: String,
    pub version: u32,
    pub bottom: Bottom,
    pub normal_edges: Vec<GenotypeEdge>,
    pub reduction_edges: Vec<GenotypeEdge>,
    pub per_node_channels: usize,
    pub cells_total: usize,
    /// 1-based depths of the reduction cells.
    pub reduction_positions: Vec<usize>,
    pub provenance: Provenance,
}

impl Genotype {
    pub fn edges(&self, cell_type: CellType) -> &[GenotypeEdge] {
        match cell_type {
            CellType::Normal => &self.normal_edges,
            CellType::Reduction => &self.reduction_edges,
        }
    }

    /// Checks every structural invariant, reporting the first violation.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if self.format != GENOTYPE_FORMAT {
            return fail(format!("format must be {GENOTYPE_FORMAT:?}, got {:?}", self.format));
        }
        if self.version != GENOTYPE_VERSION {
            return fail(format!("unsupported genotype version {}", self.version));
        }
        if self.per_node_channels == 0 {
            return fail("per_node_channels must be positive".into());
        }
        if self.cells_total == 0 {
            return fail("cells_total must be positive".into());
        }
        if self.reduction_positions.windows(2).any(|w| w[0] >= w[1]) {
            return fail("reduction_positions must be strictly increasing".into());
        }
        if let Some(&p) = self.reduction_positions.iter().find(|&&p| p == 0 || p > self.cells_total) {
            return fail(format!("reduction position {p} outside 1..={}", self.cells_total));
        }
        let inputs = self.bottom.inputs();
        let per_node = self.bottom.retained_per_node();
        for cell_type in [CellType::Normal, CellType::Reduction] {
            let edges = self.edges(cell_type);
            for e in edges {
                if e.op == OpKind::None {
                    return fail(format!("{cell_type} edge {}->{} carries op \"none\"", e.from, e.to));
                }
                if e.to < inputs || e.to >= inputs + INTERMEDIATE_NODES {
                    return fail(format!("{cell_type} edge target {} is not an intermediate node", e.to));
                }
                if e.from >= e.to {
                    return fail(format!("{cell_type} edge {}->{} does not go forward", e.from, e.to));
                }
            }
            for to in inputs..inputs + INTERMEDIATE_NODES {
                let froms: Vec<usize> = edges.iter().filter(|e| e.to == to).map(|e| e.from).collect();
                if froms.len() != per_node {
                    return fail(format!(
                        "{cell_type} node {} has {} inputs, {} bottom requires {per_node}",
                        to - inputs,
                        froms.len(),
                        self.bottom
                    ));
                }
                if froms.iter().collect::<HashSet<_>>().len() != froms.len() {
                    return fail(format!("{cell_type} node {} repeats an input node", to - inputs));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("genotype serialization: {e}")))
    }

    /// Parses and validates a genotype document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: Genotype = toml::from_str(text).map_err(|e| Error::Parse(format!("genotype: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    /// One DOT digraph for the given cell type, op-labelled edges plus
    /// unlabelled concatenation edges into the output node.
    pub fn to_dot(&self, cell_type: CellType) -> String {
        let template = CellTemplate::new(self.bottom, cell_type);
        let mut out = String::new();
        let _ = writeln!(out, "digraph {cell_type} {{");
        let _ = writeln!(
            out,
            "  // config_hash={} seed={}",
            self.provenance.config_hash, self.provenance.seed
        );
        out.push_str("  rankdir=LR;\n  node [shape=box, style=rounded];\n");
        for node in 0..template.num_nodes() {
            let _ = writeln!(out, "  \"{}\";", template.node_name(node));
        }
        for e in self.edges(cell_type) {
            let _ = writeln!(
                out,
                "  \"{}\" -> \"{}\" [label=\"{}\"];",
                template.node_name(e.from),
                template.node_name(e.to),
                e.op
            );
        }
        for node in template.intermediate_nodes() {
            let _ = writeln!(
                out,
                "  \"{}\" -> \"output\" [style=dashed, arrowhead=none];",
                template.node_name(node)
            );
        }
        out.push_str("}\n");
        out
    }
}

/// Row softmax of an `E x 8` architecture matrix.
pub fn row_softmax(alpha: &Tensor) -> Result<Vec<[f64; NUM_CANDIDATES]>> {
    let (rows, cols) = alpha.dims2()?;
    if cols != NUM_CANDIDATES {
        return Err(shape_err!("architecture matrix must have {NUM_CANDIDATES} columns, got {cols}"));
    }
    Ok((0..rows)
        .map(|r| {
            let row = &alpha.data()[r * cols..][..cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut p = [0.0; NUM_CANDIDATES];
            for (pk, &a) in p.iter_mut().zip(row) {
                *pk = (a - m).exp();
            }
            let z: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= z);
            p
        })
        .collect())
}

/// Strongest non-"none" candidate of a probability row; ties go to the lower index.
pub fn best_candidate(probs: &[f64; NUM_CANDIDATES]) -> (OpKind, f64) {
    let mut best = 1;
    for k in 2..NUM_CANDIDATES {
        if probs[k] > probs[best] {
            best = k;
        }
    }
    (OpKind::from_index(best).expect("candidate index"), probs[best])
}

/// Derives the retained edges of one cell type.
///
/// Incoming edges of each intermediate node are ranked by their strongest
/// non-"none" probability; the top one (single bottom) or two (dual bottom) are
/// kept, ties going to the lower edge id.
pub fn derive_cell(alpha: &Tensor, template: &CellTemplate) -> Result<Vec<GenotypeEdge>> {
    let probs = row_softmax(alpha)?;
    if probs.len() != template.edges.len() {
        return Err(shape_err!(
            "architecture matrix has {} rows, {} {} cell has {} edges",
            probs.len(),
            template.bottom,
            template.cell_type,
            template.edges.len()
        ));
    }
    if !alpha.is_finite() {
        return Err(Error::NonFinite("architecture matrix".into()));
    }
    let keep = template.bottom.retained_per_node();
    let mut out = Vec::new();
    for to in template.intermediate_nodes() {
        let mut ranked: Vec<(usize, usize, OpKind, f64)> = template
            .incoming(to)
            .map(|e| {
                let (op, score) = best_candidate(&probs[e.id]);
                (e.id, e.from, op, score)
            })
            .collect();
        // stable sort keeps ascending edge id among equal scores
        ranked.sort_by(|a, b| b.3.total_cmp(&a.3));
        let mut kept: Vec<_> = ranked.into_iter().take(keep).collect();
        kept.sort_by_key(|k| k.0);
        out.extend(kept.into_iter().map(|(_, from, op, _)| GenotypeEdge { to, from, op }));
    }
    Ok(out)
}

/// Hex digest over the bit patterns of the architecture matrices.
pub fn alpha_checksum(alphas: &[&Tensor]) -> String {
    let mut h = Sha256::new();
    for a in alphas {
        for v in a.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub struct GenotypeShape {
    pub bottom: Bottom,
    pub per_node_channels: usize,
    pub cells_total: usize,
    pub reduction_positions: Vec<usize>,
}

pub fn derive_genotype(alpha_normal: &Tensor, alpha_reduction: &Tensor, shape: GenotypeShape, provenance: Provenance) -> Result<Genotype> {
    let normal_edges = derive_cell(alpha_normal, &CellTemplate::new(shape.bottom, CellType::Normal))?;
    let reduction_edges = derive_cell(alpha_reduction, &CellTemplate::new(shape.bottom, CellType::Reduction))?;
    let g = Genotype {
        format: GENOTYPE_FORMAT.into(),
        version: GENOTYPE_VERSION,
        bottom: shape.bottom,
        normal_edges,
        reduction_edges,
        per_node_channels: shape.per_node_channels,
        cells_total: shape.cells_total,
        reduction_positions: shape.reduction_positions,
        provenance,
    };
    g.validate()?;
    Ok(g)
}
