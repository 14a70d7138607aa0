//! Alternating first-order optimization of architecture weights (Adam, on one
//! half of the data) and operation weights (SGD with momentum, on the other).

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;

use crate::checkpoint::{alpha_csv, provenance_line, write_file, Checkpoint, Stage, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
use crate::config::RunConfig;
use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::genotype::{alpha_checksum, derive_genotype, row_softmax, Genotype, Provenance};
use crate::network::Network;
use crate::nn::{Mode, ParamGroup};
use crate::optim::{clip_grad_norm, cosine_lr, Adam, Sgd};
use crate::train::{fit_normalization, joint_loss_step, split_dataset, BatchSpec, FramePool, Sample, SplitDataset, StepOutcome};
use crate::SeededRng;

/// Stream of the seeded generator reserved for the data split.
const SPLIT_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub alpha_loss: f64,
    pub omega_loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
    /// Forward multiply-accumulates over the epoch's steps.
    pub flops_estimate: u64,
    pub iterations: usize,
}

pub const SEARCH_LOG_HEADER: &str = "epoch,alpha_loss,omega_loss,lr,wall_ms,flops_estimate\n";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.1},{}\n",
            self.epoch, self.alpha_loss, self.omega_loss, self.lr, self.wall_ms, self.flops_estimate
        )
    }
}

pub fn split_for_seed(dataset: &Dataset, seed: u64) -> SplitDataset {
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    split_dataset(dataset, &mut rng)
}

/// Supernet, optimizers and generator state of a search in progress.
pub struct Searcher<'a> {
    pub config: &'a RunConfig,
    pub dataset: &'a Dataset,
    pub net: Network,
    pub adam: Adam,
    pub sgd: Sgd,
    pub rng: SeededRng,
    /// Completed epochs.
    pub epoch: usize,
    pub split: SplitDataset,
    pub normalization: Normalization,
    config_hash: String,
}

impl<'a> Searcher<'a> {
    pub fn new(config: &'a RunConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.sequences.is_empty() {
            return Err(Error::Validation("search needs a non-empty dataset".into()));
        }
        let mut rng = SeededRng::seed_from_u64(config.seed);
        let net = Network::supernet(&config.plan()?, config.search.channel_rate, &mut rng)?;
        Ok(Searcher {
            config,
            dataset,
            net,
            adam: Adam::new(config.search.adam()),
            sgd: Sgd::new(config.search.sgd()),
            rng,
            epoch: 0,
            split: split_for_seed(dataset, config.seed),
            normalization: fit_normalization(dataset, config.data.crop_size),
            config_hash: config.hash()?,
        })
    }

    pub fn restore(config: &'a RunConfig, dataset: &'a Dataset, ck: &Checkpoint) -> Result<Self> {
        let mut s = Self::new(config, dataset)?;
        if ck.stage != Stage::Search {
            return Err(Error::Validation("checkpoint is not from a search run".into()));
        }
        if ck.config_hash != s.config_hash {
            return Err(Error::Validation(format!(
                "checkpoint config hash {} differs from the current config {}",
                ck.config_hash, s.config_hash
            )));
        }
        s.net.store.load_from(&ck.store)?;
        s.adam = ck.adam.clone().ok_or_else(|| Error::Validation("search checkpoint lacks Adam state".into()))?;
        s.sgd = ck.sgd.clone();
        s.rng = ck.rng.clone();
        s.epoch = ck.epoch;
        s.normalization = ck.normalization;
        Ok(s)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            stage: Stage::Search,
            config_hash: self.config_hash.clone(),
            seed: self.config.seed,
            epoch: self.epoch,
            store: self.net.store.clone(),
            adam: Some(self.adam.clone()),
            sgd: self.sgd.clone(),
            rng: self.rng.clone(),
            normalization: self.normalization,
            genotype: None,
        }
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn batch(&mut self, picks: &[Sample], labels: Vec<usize>) -> Result<crate::train::TrainBatch> {
        let spec = BatchSpec {
            dataset: self.dataset,
            crop: self.config.data.crop_size,
            jitter: self.config.data.jitter,
            augment: &self.config.augment.search,
            norm: &self.normalization,
        };
        spec.build(picks, labels, &mut self.rng)
    }

    /// Architecture step: weights frozen, batch statistics not folded in.
    pub fn alpha_step(&mut self, picks: &[Sample], labels: Vec<usize>) -> Result<StepOutcome> {
        let batch = self.batch(picks, labels)?;
        self.net.store.set_trainable(ParamGroup::Weight, false);
        self.net.store.set_trainable(ParamGroup::Arch, true);
        let out = joint_loss_step(&mut self.net, batch, &self.config.loss, Mode::Train { update_stats: false }, &mut self.rng);
        self.net.store.set_trainable(ParamGroup::Weight, true);
        let out = out?;
        self.adam.step(&mut self.net.store, ParamGroup::Arch);
        Ok(out)
    }

    /// Weight step: architecture frozen.
    pub fn omega_step(&mut self, picks: &[Sample], labels: Vec<usize>, lr: f64) -> Result<StepOutcome> {
        let batch = self.batch(picks, labels)?;
        self.net.store.set_trainable(ParamGroup::Arch, false);
        let out = joint_loss_step(&mut self.net, batch, &self.config.loss, Mode::Train { update_stats: true }, &mut self.rng);
        self.net.store.set_trainable(ParamGroup::Arch, true);
        let out = out?;
        clip_grad_norm(&mut self.net.store, ParamGroup::Weight, self.config.search.grad_clip);
        self.sgd.step(&mut self.net.store, ParamGroup::Weight, lr);
        Ok(out)
    }

    pub fn current_lr(&self) -> f64 {
        let s = &self.config.search;
        cosine_lr(self.epoch, s.epochs, s.omega_lr_max, s.omega_lr_min)
    }

    /// One epoch of alternating steps. Stops early, with a log line, when a
    /// half runs out of identities for a full batch.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let start = Instant::now();
        let lr = self.current_lr();
        let batch = &self.config.batch;
        let per_batch = batch.identities * batch.frames;
        let planned = self.split.alpha_half.len().min(self.split.omega_half.len()).div_ceil(per_batch);
        let mut alpha_pool = FramePool::new(self.dataset, &self.split.alpha_half);
        let mut omega_pool = FramePool::new(self.dataset, &self.split.omega_half);
        let (mut alpha_sum, mut omega_sum, mut macs, mut iterations) = (0.0, 0.0, 0u64, 0);
        for _ in 0..planned {
            let Some((a_picks, a_labels)) = alpha_pool.draw(batch, &mut self.rng)? else { break };
            let Some((w_picks, w_labels)) = omega_pool.draw(batch, &mut self.rng)? else { break };
            let a = self.alpha_step(&a_picks, a_labels)?;
            let w = self.omega_step(&w_picks, w_labels, lr)?;
            alpha_sum += a.losses.total;
            omega_sum += w.losses.total;
            macs += a.macs + w.macs;
            iterations += 1;
        }
        if iterations < planned {
            log::warn!(
                "search epoch {}: data exhausted after {iterations} of {planned} iterations",
                self.epoch + 1
            );
        }
        if iterations == 0 {
            return Err(Error::Config(format!(
                "dataset halves cannot fill a batch of {} identities",
                batch.identities
            )));
        }
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: self.epoch,
            alpha_loss: alpha_sum / iterations as f64,
            omega_loss: omega_sum / iterations as f64,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            flops_estimate: macs,
            iterations,
        })
    }

    pub fn genotype(&self) -> Result<Genotype> {
        let (a1, a2) = self.net.alphas().ok_or_else(|| Error::Contract("searcher holds no supernet".into()))?;
        derive_genotype(
            a1,
            a2,
            self.net.plan.genotype_shape(),
            Provenance {
                seed: self.config.seed,
                epoch: self.epoch,
                alpha_checksum: alpha_checksum(&[a1, a2]),
                config_hash: self.config_hash.clone(),
            },
        )
    }
}

/// Mean entropy-free summary: per-row softmax entropy of an architecture matrix.
pub fn row_entropies(alpha: &crate::tensor::Tensor) -> Result<Vec<f64>> {
    Ok(row_softmax(alpha)?
        .iter()
        .map(|p| -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
        .collect())
}

/// Forward MACs of one architecture step plus one weight step, measured by
/// the tape counter on a fresh supernet at `channel_rate`.
pub fn iteration_macs(config: &RunConfig, dataset: &Dataset, channel_rate: f64) -> Result<u64> {
    let mut cfg = config.clone();
    cfg.search.channel_rate = channel_rate;
    let mut s = Searcher::new(&cfg, dataset)?;
    let mut alpha_pool = FramePool::new(dataset, &s.split.alpha_half);
    let mut omega_pool = FramePool::new(dataset, &s.split.omega_half);
    let mut rng = s.rng.clone();
    let (a_picks, a_labels) = alpha_pool
        .draw(&cfg.batch, &mut rng)?
        .ok_or_else(|| Error::Config("not enough identities for one batch".into()))?;
    let (w_picks, w_labels) = omega_pool
        .draw(&cfg.batch, &mut rng)?
        .ok_or_else(|| Error::Config("not enough identities for one batch".into()))?;
    let lr = s.current_lr();
    let a = s.alpha_step(&a_picks, a_labels)?;
    let w = s.omega_step(&w_picks, w_labels, lr)?;
    Ok(a.macs + w.macs)
}

/// Forward MACs of one iteration from the per-layer cost report: two steps,
/// each over `3 * M * N` crops (ground truth, jittered, background).
pub fn iteration_macs_estimate(config: &RunConfig, channel_rate: f64) -> Result<u64> {
    let mut rng = SeededRng::seed_from_u64(config.seed);
    let net = Network::supernet(&config.plan()?, channel_rate, &mut rng)?;
    let crop = config.data.crop_size;
    let crops = 3 * config.batch.identities * config.batch.frames;
    Ok(2 * crops as u64 * net.cost(crop, crop)?.macs())
}

pub struct SearchOutcome {
    pub genotype: Genotype,
    pub history: Vec<EpochRecord>,
    pub genotype_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Runs the remaining epochs, writing the log, architecture snapshots,
/// checkpoints, the cost comparison and the derived genotype under `out`.
pub fn run_search(config: &RunConfig, dataset: &Dataset, out: &Path, resume: Option<&Checkpoint>) -> Result<SearchOutcome> {
    let mut searcher = match resume {
        Some(ck) => Searcher::restore(config, dataset, ck)?,
        None => Searcher::new(config, dataset)?,
    };
    let hash = searcher.config_hash().to_string();
    let seed = config.seed;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("search_log.csv");
    let mut log_text = provenance_line(&hash, seed) + SEARCH_LOG_HEADER;
    let checkpoint_path = out.join("checkpoint.json");
    let mut last_good: Option<PathBuf> = None;
    let mut history = Vec::new();
    write_snapshots(&searcher, out, &hash, seed)?;
    while searcher.epoch < config.search.epochs {
        let record = match searcher.run_epoch() {
            Ok(r) => r,
            Err(Error::NonFinite(what)) => {
                log::error!("non-finite value in {what} during search epoch {}", searcher.epoch + 1);
                return Err(Error::Diverged {
                    epoch: searcher.epoch + 1,
                    last_checkpoint: last_good,
                });
            }
            Err(e) => return Err(e),
        };
        log::info!(
            "search epoch {}/{}: alpha_loss {:.4} omega_loss {:.4} lr {:.5} ({} iterations, {:.0} ms)",
            record.epoch,
            config.search.epochs,
            record.alpha_loss,
            record.omega_loss,
            record.lr,
            record.iterations,
            record.wall_ms
        );
        log_text.push_str(&record.csv_row());
        write_file(&log_path, &log_text)?;
        write_snapshots(&searcher, out, &hash, seed)?;
        if record.epoch % config.search.checkpoint_every == 0 || record.epoch == config.search.epochs {
            searcher.checkpoint().save(&checkpoint_path)?;
            last_good = Some(checkpoint_path.clone());
        }
        history.push(record);
    }
    if history.is_empty() {
        write_file(&log_path, &log_text)?;
        searcher.checkpoint().save(&checkpoint_path)?;
    }

    let mut cost = provenance_line(&hash, seed);
    cost.push_str("variant,channel_rate,macs_per_iteration\n");
    cost.push_str(&format!(
        "masked,{},{}\n",
        config.search.channel_rate,
        iteration_macs_estimate(config, config.search.channel_rate)?
    ));
    cost.push_str(&format!("unmasked,1,{}\n", iteration_macs_estimate(config, 1.0)?));
    write_file(&out.join("cost.csv"), &cost)?;

    let genotype = searcher.genotype()?;
    let genotype_path = out.join("genotype.toml");
    write_file(&genotype_path, &genotype.to_toml()?)?;
    Ok(SearchOutcome {
        genotype,
        history,
        genotype_path,
        checkpoint_path,
    })
}

fn write_snapshots(s: &Searcher, out: &Path, hash: &str, seed: u64) -> Result<()> {
    let (a1, a2) = s.net.alphas().ok_or_else(|| Error::Contract("searcher holds no supernet".into()))?;
    let dir = out.join("alpha");
    write_file(&dir.join(format!("normal_epoch{:03}.csv", s.epoch)), &alpha_csv(a1, hash, seed)?)?;
    write_file(&dir.join(format!("reduction_epoch{:03}.csv", s.epoch)), &alpha_csv(a2, hash, seed)?)
}
