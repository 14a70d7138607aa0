//! Cell DAG templates.
//!
//! Nodes are numbered in topological order: the cell inputs first (`S`, or
//! `S0`/`S1`), then the four intermediate nodes. The output node is the
//! channel-wise concatenation of the intermediates and carries no edges of its own.

use std::fmt;

use serde::{Deserialize, Serialize};

pub const INTERMEDIATE_NODES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bottom {
    Single,
    Dual,
}

impl Bottom {
    pub fn inputs(self) -> usize {
        match self {
            Bottom::Single => 1,
            Bottom::Dual => 2,
        }
    }

    /// Edges kept per intermediate node after derivation.
    pub fn retained_per_node(self) -> usize {
        self.inputs()
    }
}

impl fmt::Display for Bottom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bottom::Single => "single",
            Bottom::Dual => "dual",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    Normal,
    Reduction,
}

impl fmt::Display for CellType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellType::Normal => "normal",
            CellType::Reduction => "reduction",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemplateEdge {
    pub id: usize,
    pub from: usize,
    pub to: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellTemplate {
    pub bottom: Bottom,
    pub cell_type: CellType,
    pub edges: Vec<TemplateEdge>,
}

impl CellTemplate {
    pub fn new(bottom: Bottom, cell_type: CellType) -> Self {
        let inputs = bottom.inputs();
        let mut edges = Vec::new();
        for j in 0..INTERMEDIATE_NODES {
            let to = inputs + j;
            for from in 0..to {
                edges.push(TemplateEdge {
                    id: edges.len(),
                    from,
                    to,
                });
            }
        }
        CellTemplate {
            bottom,
            cell_type,
            edges,
        }
    }

    pub fn num_inputs(&self) -> usize {
        self.bottom.inputs()
    }

    /// Inputs, intermediates and the output node.
    pub fn num_nodes(&self) -> usize {
        self.num_inputs() + INTERMEDIATE_NODES + 1
    }

    pub fn output_node(&self) -> usize {
        self.num_inputs() + INTERMEDIATE_NODES
    }

    pub fn intermediate_nodes(&self) -> std::ops::Range<usize> {
        self.num_inputs()..self.num_inputs() + INTERMEDIATE_NODES
    }

    pub fn incoming(&self, to: usize) -> impl Iterator<Item = &TemplateEdge> {
        self.edges.iter().filter(move |e| e.to == to)
    }

    pub fn edge_between(&self, from: usize, to: usize) -> Option<&TemplateEdge> {
        self.edges.iter().find(|e| e.from == from && e.to == to)
    }

    /// Edges leaving a cell input are strided in reduction cells.
    pub fn edge_stride(&self, edge: &TemplateEdge) -> usize {
        match self.cell_type {
            CellType::Reduction if edge.from < self.num_inputs() => 2,
            _ => 1,
        }
    }

    pub fn node_name(&self, node: usize) -> String {
        let inputs = self.num_inputs();
        if node < inputs {
            match self.bottom {
                Bottom::Single => "S".into(),
                Bottom::Dual => format!("S{node}"),
            }
        } else if node < inputs + INTERMEDIATE_NODES {
            (node - inputs).to_string()
        } else {
            "output".into()
        }
    }
}
