//! Versioned JSON checkpoints and small artifact-writing helpers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::nn::ParamStore;
use crate::optim::{Adam, Sgd};
use crate::search_space::OpKind;
use crate::tensor::Tensor;
use crate::SeededRng;

pub const CHECKPOINT_FORMAT: &str = "cellnas-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Search,
    Retrain,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub stage: Stage,
    pub config_hash: String,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub store: ParamStore,
    pub adam: Option<Adam>,
    pub sgd: Sgd,
    pub rng: SeededRng,
    pub normalization: Normalization,
    /// The architecture of a retrained network.
    pub genotype: Option<Genotype>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Parse(format!("checkpoint serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("not a checkpoint (format {:?})", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {}", ck.version)));
        }
        if ck.stage == Stage::Retrain && ck.genotype.is_none() {
            return Err(Error::Parse("retrain checkpoint carries no genotype".into()));
        }
        if let Some(g) = &ck.genotype {
            g.validate()?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Writes `contents`, creating parent directories.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Leading comment line tying a CSV file to its run.
pub fn provenance_line(config_hash: &str, seed: u64) -> String {
    format!("# config_hash={config_hash} seed={seed}\n")
}

/// `edge,<candidate names...>` rows of an architecture matrix.
pub fn alpha_csv(alpha: &Tensor, config_hash: &str, seed: u64) -> Result<String> {
    let (rows, cols) = alpha.dims2()?;
    let mut out = provenance_line(config_hash, seed);
    out.push_str("edge");
    for k in OpKind::ALL {
        out.push(',');
        out.push_str(k.name());
    }
    out.push('\n');
    for r in 0..rows {
        out.push_str(&r.to_string());
        for v in &alpha.data()[r * cols..(r + 1) * cols] {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses an architecture-matrix CSV written by [`alpha_csv`].
pub fn parse_alpha_csv(text: &str) -> Result<Tensor> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| Error::Parse("alpha csv: empty".into()))?;
    let names: Vec<&str> = header.split(',').collect();
    let expected: Vec<&str> = std::iter::once("edge").chain(OpKind::ALL.iter().map(|k| k.name())).collect();
    if names != expected {
        return Err(Error::Parse(format!("alpha csv: unexpected header {header:?}")));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (r, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected.len() {
            return Err(Error::Parse(format!("alpha csv row {r}: {} fields", fields.len())));
        }
        if fields[0].parse::<usize>().ok() != Some(r) {
            return Err(Error::Parse(format!("alpha csv row {r}: edge id {:?} out of order", fields[0])));
        }
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Parse(format!("alpha csv row {r}: {f:?} is not a finite number")))?;
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse("alpha csv: no rows".into()));
    }
    Tensor::new(vec![rows, OpKind::ALL.len()], data)
}
