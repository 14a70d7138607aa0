//! Training a discrete network built from a genotype with the joint loss.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;

use crate::checkpoint::{provenance_line, write_file, Checkpoint, Stage, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
use crate::config::RunConfig;
use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::losses::LossBreakdown;
use crate::network::{Network, NetworkPlan};
use crate::nn::{Mode, ParamGroup};
use crate::optim::{clip_grad_norm, cosine_lr, Sgd};
use crate::train::{fit_normalization, joint_loss_step, BatchSpec, FramePool};
use crate::SeededRng;

const RETRAIN_STREAM: u64 = 2;

pub const STEP_LOG_HEADER: &str = "step,L_CLS,L_BHTri,L_CT,L_total\n";
pub const EPOCH_LOG_HEADER: &str = "epoch,L_CLS,L_BHTri,L_CT,L_total,lr,steps,wall_ms\n";

#[derive(Clone, Debug, PartialEq)]
pub struct RetrainEpoch {
    pub epoch: usize,
    /// Mean over the epoch's steps.
    pub losses: LossBreakdown,
    pub lr: f64,
    pub steps: usize,
    pub wall_ms: f64,
    /// Per-step losses in order.
    pub step_losses: Vec<LossBreakdown>,
}

pub fn network_for(config: &RunConfig, genotype: &Genotype, rng: &mut SeededRng) -> Result<Network> {
    let plan = NetworkPlan::from_genotype(genotype, config.plan()?.in_channels, config.network.embedding_dim)?;
    Network::discrete(genotype, &plan, rng)
}

pub struct Retrainer<'a> {
    pub config: &'a RunConfig,
    pub dataset: &'a Dataset,
    pub genotype: Genotype,
    pub net: Network,
    pub sgd: Sgd,
    pub rng: SeededRng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps over all epochs.
    pub step: usize,
    pub normalization: Normalization,
    config_hash: String,
}

impl<'a> Retrainer<'a> {
    pub fn new(config: &'a RunConfig, dataset: &'a Dataset, genotype: Genotype) -> Result<Self> {
        config.validate()?;
        if dataset.sequences.is_empty() {
            return Err(Error::Validation("retraining needs a non-empty dataset".into()));
        }
        let mut rng = SeededRng::seed_from_u64(config.seed);
        rng.set_stream(RETRAIN_STREAM);
        let net = network_for(config, &genotype, &mut rng)?;
        Ok(Retrainer {
            config,
            dataset,
            genotype,
            net,
            sgd: Sgd::new(config.retrain.sgd()),
            rng,
            epoch: 0,
            step: 0,
            normalization: fit_normalization(dataset, config.data.crop_size),
            config_hash: config.hash()?,
        })
    }

    pub fn restore(config: &'a RunConfig, dataset: &'a Dataset, ck: &Checkpoint) -> Result<Self> {
        if ck.stage != Stage::Retrain {
            return Err(Error::Validation("checkpoint is not from a retrain run".into()));
        }
        let genotype = ck
            .genotype
            .clone()
            .ok_or_else(|| Error::Validation("retrain checkpoint carries no genotype".into()))?;
        let mut r = Self::new(config, dataset, genotype)?;
        if ck.config_hash != r.config_hash {
            return Err(Error::Validation(format!(
                "checkpoint config hash {} differs from the current config {}",
                ck.config_hash, r.config_hash
            )));
        }
        r.net.store.load_from(&ck.store)?;
        r.sgd = ck.sgd.clone();
        r.rng = ck.rng.clone();
        r.epoch = ck.epoch;
        r.step = steps_before(config, dataset, ck.epoch);
        r.normalization = ck.normalization;
        Ok(r)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            stage: Stage::Retrain,
            config_hash: self.config_hash.clone(),
            seed: self.config.seed,
            epoch: self.epoch,
            store: self.net.store.clone(),
            adam: None,
            sgd: self.sgd.clone(),
            rng: self.rng.clone(),
            normalization: self.normalization,
            genotype: Some(self.genotype.clone()),
        }
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn current_lr(&self) -> f64 {
        let r = &self.config.retrain;
        cosine_lr(self.epoch, r.epochs, r.lr_max, r.lr_min)
    }

    /// One pass over every training frame in identity-balanced batches.
    pub fn run_epoch(&mut self) -> Result<RetrainEpoch> {
        let start = Instant::now();
        let lr = self.current_lr();
        let samples = self.dataset.samples();
        let mut pool = FramePool::new(self.dataset, &samples);
        let mut step_losses = Vec::new();
        while let Some((picks, labels)) = pool.draw(&self.config.batch, &mut self.rng)? {
            let spec = BatchSpec {
                dataset: self.dataset,
                crop: self.config.data.crop_size,
                jitter: self.config.data.jitter,
                augment: &self.config.augment.retrain,
                norm: &self.normalization,
            };
            let batch = spec.build(&picks, labels, &mut self.rng)?;
            let out = joint_loss_step(&mut self.net, batch, &self.config.loss, Mode::Train { update_stats: true }, &mut self.rng)?;
            clip_grad_norm(&mut self.net.store, ParamGroup::Weight, self.config.retrain.grad_clip);
            self.sgd.step(&mut self.net.store, ParamGroup::Weight, lr);
            step_losses.push(out.losses);
            self.step += 1;
        }
        if step_losses.is_empty() {
            return Err(Error::Config(format!(
                "dataset cannot fill a batch of {} identities",
                self.config.batch.identities
            )));
        }
        self.epoch += 1;
        Ok(RetrainEpoch {
            epoch: self.epoch,
            losses: mean_losses(&step_losses, self.config.loss.gamma),
            lr,
            steps: step_losses.len(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            step_losses,
        })
    }
}

/// Steps per epoch depend only on the dataset and batch shape.
fn steps_before(config: &RunConfig, dataset: &Dataset, epochs: usize) -> usize {
    let mut rng = SeededRng::seed_from_u64(0);
    let samples = dataset.samples();
    let mut pool = FramePool::new(dataset, &samples);
    let mut n = 0;
    while let Ok(Some(_)) = pool.draw(&config.batch, &mut rng) {
        n += 1;
    }
    n * epochs
}

fn mean_losses(steps: &[LossBreakdown], gamma: f64) -> LossBreakdown {
    let n = steps.len() as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| steps.iter().map(f).sum::<f64>() / n;
    LossBreakdown::new(sum(|l| l.cls), sum(|l| l.tri), sum(|l| l.cen), gamma)
}

fn loss_row(first: &str, l: &LossBreakdown) -> String {
    format!("{first},{},{},{},{}", l.cls, l.tri, l.cen, l.total)
}

pub struct RetrainOutcome {
    pub history: Vec<RetrainEpoch>,
    pub weights_path: PathBuf,
}

/// Runs the remaining epochs, writing loss logs and the weights checkpoint
/// under `out`.
pub fn run_retrain(
    config: &RunConfig,
    dataset: &Dataset,
    genotype: Genotype,
    out: &Path,
    resume: Option<&Checkpoint>,
) -> Result<RetrainOutcome> {
    let mut r = match resume {
        Some(ck) => Retrainer::restore(config, dataset, ck)?,
        None => Retrainer::new(config, dataset, genotype)?,
    };
    let prov = provenance_line(r.config_hash(), config.seed);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let step_path = out.join("retrain_steps.csv");
    let epoch_path = out.join("retrain_log.csv");
    let weights_path = out.join("weights.json");
    let (mut step_text, mut epoch_text) = match resume {
        Some(_) => (
            read_log(&step_path, &prov, STEP_LOG_HEADER, r.step),
            read_log(&epoch_path, &prov, EPOCH_LOG_HEADER, r.epoch),
        ),
        None => (prov.clone() + STEP_LOG_HEADER, prov.clone() + EPOCH_LOG_HEADER),
    };
    let mut last_good = resume.map(|_| weights_path.clone());
    let mut history = Vec::new();
    while r.epoch < config.retrain.epochs {
        let first_step = r.step;
        let rec = match r.run_epoch() {
            Ok(rec) => rec,
            Err(Error::NonFinite(what)) => {
                log::error!("non-finite value in {what} during retrain epoch {}", r.epoch + 1);
                return Err(Error::Diverged {
                    epoch: r.epoch + 1,
                    last_checkpoint: last_good,
                });
            }
            Err(e) => return Err(e),
        };
        log::info!(
            "retrain epoch {}/{}: L_total {:.4} (cls {:.4} tri {:.4} cen {:.4}) lr {:.5} ({} steps, {:.0} ms)",
            rec.epoch,
            config.retrain.epochs,
            rec.losses.total,
            rec.losses.cls,
            rec.losses.tri,
            rec.losses.cen,
            rec.lr,
            rec.steps,
            rec.wall_ms
        );
        for (i, l) in rec.step_losses.iter().enumerate() {
            step_text.push_str(&loss_row(&(first_step + i + 1).to_string(), l));
            step_text.push('\n');
        }
        epoch_text.push_str(&loss_row(&rec.epoch.to_string(), &rec.losses));
        epoch_text.push_str(&format!(",{},{},{:.1}\n", rec.lr, rec.steps, rec.wall_ms));
        write_file(&step_path, &step_text)?;
        write_file(&epoch_path, &epoch_text)?;
        if rec.epoch % config.retrain.checkpoint_every == 0 || rec.epoch == config.retrain.epochs {
            r.checkpoint().save(&weights_path)?;
            last_good = Some(weights_path.clone());
        }
        history.push(rec);
    }
    if history.is_empty() && resume.is_none() {
        write_file(&step_path, &step_text)?;
        write_file(&epoch_path, &epoch_text)?;
        r.checkpoint().save(&weights_path)?;
    }
    Ok(RetrainOutcome { history, weights_path })
}

/// Existing log rows up to and including index `keep`, so a resumed run
/// does not duplicate rows written after the checkpoint.
fn read_log(path: &Path, prov: &str, header: &str, keep: usize) -> String {
    let mut out = format!("{prov}{header}");
    if let Ok(text) = std::fs::read_to_string(path) {
        for line in text.lines() {
            let index = line.split(',').next().and_then(|f| f.parse::<usize>().ok());
            if index.is_some_and(|i| i <= keep) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    out
}
