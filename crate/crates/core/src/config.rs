//! Run configuration: one TOML document with flat dotted keys.
//!
//! Defaults follow the published full-scale setup; `configs/desk.toml` scales
//! the network and schedule down for a workstation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cell::Bottom;
use crate::data::{AugmentConfig, Phase, SyntheticConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::{evenly_spaced_reductions, NetworkPlan};
use crate::optim::{AdamConfig, SgdConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub bottom: Bottom,
    /// Stem width and per-node width of the first cell.
    pub per_node_channels: usize,
    pub cells: usize,
    pub reductions: usize,
    pub embedding_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            bottom: Bottom::Dual,
            per_node_channels: 16,
            cells: 16,
            reductions: 4,
            embedding_dim: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub epochs: usize,
    pub alpha_lr: f64,
    pub alpha_betas: (f64, f64),
    pub omega_lr_max: f64,
    pub omega_lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub channel_rate: f64,
    /// Epoch interval between checkpoints; the final epoch is always saved.
    pub checkpoint_every: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 200,
            alpha_lr: 0.02,
            alpha_betas: (0.5, 0.999),
            omega_lr_max: 0.1,
            omega_lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
            channel_rate: 0.25,
            checkpoint_every: 10,
        }
    }
}

impl SearchConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.alpha_lr,
            betas: self.alpha_betas,
            eps: 1e-8,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub checkpoint_every: usize,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            epochs: 200,
            lr_max: 0.1,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
            checkpoint_every: 10,
        }
    }
}

impl RetrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
    pub gamma: f64,
    /// L2-normalize embeddings before the triplet and center distances.
    pub normalize_embeddings: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        LossConfig {
            margin: w.margin,
            gamma: w.gamma,
            normalize_embeddings: false,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            margin: self.margin,
            gamma: self.gamma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchConfig {
    /// Identities per batch.
    pub identities: usize,
    /// Frames per identity.
    pub frames: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig { identities: 8, frames: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of on-disk training sequences; synthetic data when absent.
    pub root: Option<PathBuf>,
    /// Directory of on-disk evaluation sequences.
    pub eval_root: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    /// Synthetic held-out sequences for evaluation.
    pub eval_identities: usize,
    /// Side of the square network input crop.
    pub crop_size: usize,
    /// Relative translation and scale jitter of the predicted-box crops.
    pub jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            eval_root: None,
            synthetic: SyntheticConfig::default(),
            eval_identities: 8,
            crop_size: 128,
            jitter: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub search: AugmentConfig,
    pub retrain: AugmentConfig,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            search: AugmentConfig::for_phase(Phase::Search),
            retrain: AugmentConfig::for_phase(Phase::Retrain),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Half-width in pixels of the window searched around the previous box.
    pub search_radius: usize,
    pub search_step: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            search_radius: 12,
            search_step: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub network: NetworkConfig,
    pub search: SearchConfig,
    pub retrain: RetrainConfig,
    pub loss: LossConfig,
    pub batch: BatchConfig,
    pub data: DataConfig,
    pub augment: AugmentSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            network: NetworkConfig::default(),
            search: SearchConfig::default(),
            retrain: RetrainConfig::default(),
            loss: LossConfig::default(),
            batch: BatchConfig::default(),
            data: DataConfig::default(),
            augment: AugmentSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

fn nonzero(name: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be at least 1")))
    }
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be in [0, 1), got {v}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let n = &self.network;
        nonzero("network.per_node_channels", n.per_node_channels)?;
        nonzero("network.cells", n.cells)?;
        nonzero("network.embedding_dim", n.embedding_dim)?;
        if n.reductions > n.cells {
            return Err(Error::Config(format!(
                "network.reductions ({}) exceeds network.cells ({})",
                n.reductions, n.cells
            )));
        }
        let s = &self.search;
        positive("search.alpha_lr", s.alpha_lr)?;
        positive("search.omega_lr_max", s.omega_lr_max)?;
        positive("search.omega_lr_min", s.omega_lr_min)?;
        if s.omega_lr_min >= s.omega_lr_max {
            return Err(Error::Config(format!(
                "search.omega_lr_min ({}) must be below search.omega_lr_max ({})",
                s.omega_lr_min, s.omega_lr_max
            )));
        }
        unit_interval("search.alpha_betas[0]", s.alpha_betas.0)?;
        unit_interval("search.alpha_betas[1]", s.alpha_betas.1)?;
        unit_interval("search.momentum", s.momentum)?;
        positive("search.grad_clip", s.grad_clip)?;
        if s.weight_decay < 0.0 {
            return Err(Error::Config("search.weight_decay must be >= 0".into()));
        }
        if !(s.channel_rate > 0.0 && s.channel_rate <= 1.0) {
            return Err(Error::Config(format!("search.channel_rate must be in (0, 1], got {}", s.channel_rate)));
        }
        nonzero("search.checkpoint_every", s.checkpoint_every)?;
        let r = &self.retrain;
        positive("retrain.lr_max", r.lr_max)?;
        positive("retrain.lr_min", r.lr_min)?;
        if r.lr_min >= r.lr_max {
            return Err(Error::Config(format!(
                "retrain.lr_min ({}) must be below retrain.lr_max ({})",
                r.lr_min, r.lr_max
            )));
        }
        unit_interval("retrain.momentum", r.momentum)?;
        positive("retrain.grad_clip", r.grad_clip)?;
        if r.weight_decay < 0.0 {
            return Err(Error::Config("retrain.weight_decay must be >= 0".into()));
        }
        nonzero("retrain.checkpoint_every", r.checkpoint_every)?;
        self.loss.weights().validate()?;
        nonzero("batch.identities", self.batch.identities)?;
        nonzero("batch.frames", self.batch.frames)?;
        if self.batch.identities < 2 {
            return Err(Error::Config("batch.identities must be at least 2 for the triplet loss".into()));
        }
        let d = &self.data;
        d.synthetic.validate()?;
        nonzero("data.eval_identities", d.eval_identities)?;
        if d.crop_size < 8 {
            return Err(Error::Config(format!("data.crop_size must be at least 8, got {}", d.crop_size)));
        }
        if !(0.0..0.5).contains(&d.jitter) {
            return Err(Error::Config(format!("data.jitter must be in [0, 0.5), got {}", d.jitter)));
        }
        if d.root.is_some() && d.eval_root.is_none() {
            return Err(Error::Config("data.eval_root is required when data.root is set".into()));
        }
        self.augment.search.validate()?;
        self.augment.retrain.validate()?;
        nonzero("eval.search_step", self.eval.search_step)?;
        Ok(())
    }

    pub fn plan(&self) -> Result<NetworkPlan> {
        let n = &self.network;
        let plan = NetworkPlan {
            bottom: n.bottom,
            in_channels: 3,
            per_node_channels: n.per_node_channels,
            cells_total: n.cells,
            reduction_positions: evenly_spaced_reductions(n.cells, n.reductions),
            embedding_dim: n.embedding_dim,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Parses a document over the defaults, rejecting unknown keys and
    /// invalid values.
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let mut value = toml::Value::try_from(RunConfig::default()).map_err(|e| Error::Config(format!("config: {e}")))?;
        let mut leaves = Vec::new();
        leaf_values("", &toml::Value::Table(doc), &mut leaves);
        for (key, v) in leaves {
            set_dotted(&mut value, &key, v)?;
        }
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Applies `key=value` overrides (dotted keys, TOML literal values; bare
    /// words are taken as strings) and re-validates.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(self).map_err(|e| Error::Config(format!("config: {e}")))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let parsed = parse_literal(raw.trim());
            set_dotted(&mut value, key.trim(), parsed)?;
        }
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Flat `dotted.key = value` lines in a stable order.
    pub fn to_toml(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| Error::Config(format!("config: {e}")))?;
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        Ok(lines.join("\n") + "\n")
    }

    /// Short hex digest of the canonical serialization, excluding the output
    /// location so reruns elsewhere share it.
    pub fn hash(&self) -> Result<String> {
        let canonical = RunConfig {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml()?.as_bytes());
        Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?}: {part:?} is not a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config(format!("empty override key {key:?}")))
}

fn leaf_values(prefix: &str, value: &toml::Value, out: &mut Vec<(String, toml::Value)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaf_values(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}
