//! Parameter and multiply-accumulate accounting.

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub layer: String,
    pub params: usize,
    /// Multiply-accumulates per input sample.
    pub macs: u64,
}

/// Per-layer breakdown of a network's parameter and MAC counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn push(&mut self, layer: impl Into<String>, params: usize, macs: u64) {
        self.rows.push(CostRow {
            layer: layer.into(),
            params,
            macs,
        });
    }

    pub fn params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    /// `layer,params,macs` rows followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,params,macs\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.layer, r.params, r.macs));
        }
        out.push_str(&format!("total,{},{}\n", self.params(), self.macs()));
        out
    }
}
