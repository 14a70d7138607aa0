//! The five pipeline commands, shared by the binary and the tests.

use std::path::{Path, PathBuf};

use crate::cell::CellType;
use crate::checkpoint::{provenance_line, write_file, Checkpoint};
use crate::config::RunConfig;
use crate::cost::CostReport;
use crate::data::{generate_dataset, load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::eval::{eval_dataset, track_all, write_report, Protocol, Tracker};
use crate::genotype::Genotype;
use crate::metrics::MetricReport;
use crate::network::{Network, NetworkPlan};
use crate::retrain::{run_retrain, RetrainOutcome};
use crate::search::{run_search, SearchOutcome};
use crate::SeededRng;

/// Training sequences: `data.root` if set, otherwise the seeded synthetic set.
pub fn training_dataset(config: &RunConfig) -> Result<Dataset> {
    match &config.data.root {
        Some(root) => load_dataset(root),
        None => generate_dataset(&config.data.synthetic, config.seed),
    }
}

pub fn load_genotype(path: &Path) -> Result<Genotype> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Genotype::from_toml(&text)
}

fn write_config(config: &RunConfig, out: &Path) -> Result<()> {
    let text = provenance_line(&config.hash()?, config.seed) + &config.to_toml()?;
    write_file(&out.join("config.toml"), &text)
}

/// Writes one DOT file per cell type; returns their paths.
pub fn write_dot(genotype: &Genotype, out: &Path) -> Result<Vec<PathBuf>> {
    [CellType::Normal, CellType::Reduction]
        .into_iter()
        .map(|ct| {
            let path = out.join(format!("{ct}.dot"));
            write_file(&path, &genotype.to_dot(ct))?;
            Ok(path)
        })
        .collect()
}

pub fn cmd_search(config: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<SearchOutcome> {
    config.validate()?;
    let dataset = training_dataset(config)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    write_config(config, out)?;
    let outcome = run_search(config, &dataset, out, resume.as_ref())?;
    write_dot(&outcome.genotype, out)?;
    Ok(outcome)
}

pub fn cmd_retrain(config: &RunConfig, genotype_path: &Path, out: &Path, resume: Option<&Path>) -> Result<RetrainOutcome> {
    config.validate()?;
    let genotype = load_genotype(genotype_path)?;
    config.plan()?.check_genotype(&genotype)?;
    let dataset = training_dataset(config)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    write_config(config, out)?;
    run_retrain(config, &dataset, genotype, out, resume.as_ref())
}

pub fn cmd_eval(config: &RunConfig, weights: Option<&Path>, protocol: Protocol, out: &Path) -> Result<MetricReport> {
    config.validate()?;
    let dataset = eval_dataset(config)?;
    let mut tracker = match (protocol, weights) {
        (Protocol::Embedding, None) => {
            return Err(Error::Config("the embedding protocol needs --weights".into()));
        }
        (Protocol::Embedding, Some(w)) => Some(Tracker::from_checkpoint(config, &Checkpoint::load(w)?)?),
        _ => None,
    };
    let records = track_all(protocol, &dataset, tracker.as_mut(), config.seed)?;
    let report = write_report(&records, out, &config.hash()?, config.seed)?;
    log::info!(
        "{} protocol on {} frames: precision {:.3} success {:.3} norm_precision {:.3}",
        protocol.name(),
        report.frames,
        report.precision,
        report.success,
        report.norm_precision
    );
    Ok(report)
}

pub fn cmd_export(genotype_path: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    write_dot(&load_genotype(genotype_path)?, out)
}

/// Per-layer parameter and per-sample MAC counts of the discrete network for
/// an `input_size` square input with 3 channels.
pub fn cmd_count(config: &RunConfig, genotype_path: &Path, input_size: usize, out: Option<&Path>) -> Result<CostReport> {
    let genotype = load_genotype(genotype_path)?;
    let plan = NetworkPlan::from_genotype(&genotype, 3, config.network.embedding_dim)?;
    let mut rng = <SeededRng as rand::SeedableRng>::seed_from_u64(config.seed);
    let net = Network::discrete(&genotype, &plan, &mut rng)?;
    let report = net.cost(input_size, input_size)?;
    if let Some(out) = out {
        let text = provenance_line(&genotype.provenance.config_hash, genotype.provenance.seed) + &report.to_csv();
        write_file(&out.join("count.csv"), &text)?;
    }
    Ok(report)
}
