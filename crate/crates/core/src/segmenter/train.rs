//! Episodic phase-1 training: Adam for the first stretch of iterations,
//! then plain SGD at a lower rate.

use log::info;
use serde::{Deserialize, Serialize};

use super::{forward_nodes, SupportInput};
use crate::data::{sample_episode, Episode, ImageDataset};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{ArchConfig, ModelState};
use crate::optim::{sgd_step, Adam, GradMap};
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase1Config {
    pub adam_lr: f64,
    pub adam_iterations: usize,
    pub sgd_lr: f64,
    pub sgd_iterations: usize,
    /// Episodes per iteration.
    pub batch_size: usize,
    pub n_shot: usize,
    pub k_query: usize,
    /// Weight of the optional soft-Dice term added to cross-entropy.
    pub dice_weight: f64,
    pub log_every: usize,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            adam_lr: 1e-4,
            adam_iterations: 5000,
            sgd_lr: 1e-5,
            sgd_iterations: 1000,
            batch_size: 8,
            n_shot: 1,
            k_query: 1,
            dice_weight: 0.0,
            log_every: 100,
        }
    }
}

impl Phase1Config {
    pub fn total_iterations(&self) -> usize {
        self.adam_iterations + self.sgd_iterations
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.adam_lr >= 0.0 && self.sgd_lr >= 0.0) {
            return Err(Error::config("phase-1 learning rates must be non-negative"));
        }
        if self.batch_size == 0 || self.n_shot == 0 || self.k_query == 0 {
            return Err(Error::config(
                "batch_size, n_shot and k_query must be positive",
            ));
        }
        if self.dice_weight < 0.0 {
            return Err(Error::config("dice_weight must be non-negative"));
        }
        Ok(())
    }

    /// Optimizer and learning rate in effect at `iteration`.
    pub fn schedule(&self, iteration: usize) -> (OptimizerKind, f64) {
        if iteration < self.adam_iterations {
            (OptimizerKind::Adam, self.adam_lr)
        } else {
            (OptimizerKind::Sgd, self.sgd_lr)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub loss: f64,
}

/// Resumable training state. Episode sampling at iteration `i` draws from
/// substream `(seed, "sampling", i)`, so a resumed run replays exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Phase1Trainer {
    pub model: ModelState,
    pub adam: Adam,
    pub iteration: usize,
    pub seed: u64,
}

impl Phase1Trainer {
    pub fn new(model: ModelState, seed: u64) -> Self {
        Self {
            model,
            adam: Adam::new(),
            iteration: 0,
            seed,
        }
    }

    /// One optimisation step on a fresh batch of episodes.
    pub fn step(&mut self, dataset: &ImageDataset, cfg: &Phase1Config) -> Result<LossRecord> {
        let mut rng = substream(self.seed, "sampling", self.iteration as u64);
        let episodes = (0..cfg.batch_size)
            .map(|_| sample_episode(dataset, cfg.n_shot, cfg.k_query, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (value, grads) = batch_loss(&self.model, &episodes, cfg.dice_weight)?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "phase-1 loss is {value} at iteration {}",
                self.iteration
            )));
        }
        let (kind, lr) = cfg.schedule(self.iteration);
        match kind {
            OptimizerKind::Adam => self.adam.step(&mut self.model.params, &grads, lr),
            OptimizerKind::Sgd => sgd_step(&mut self.model.params, &grads, lr),
        }
        let record = LossRecord {
            iteration: self.iteration,
            optimizer: kind,
            lr,
            loss: value,
        };
        self.iteration += 1;
        Ok(record)
    }

    /// Step until `until` iterations have been run in total.
    pub fn run_until(
        &mut self,
        dataset: &ImageDataset,
        cfg: &Phase1Config,
        until: usize,
        mut on_record: impl FnMut(&LossRecord),
    ) -> Result<Vec<LossRecord>> {
        cfg.validate()?;
        if dataset.classes().len() < 2 {
            return Err(Error::Sampling(
                "phase-1 training needs at least two base classes".into(),
            ));
        }
        let mut log = Vec::with_capacity(until.saturating_sub(self.iteration));
        while self.iteration < until {
            let rec = self.step(dataset, cfg)?;
            if cfg.log_every > 0 && rec.iteration % cfg.log_every == 0 {
                info!(
                    "phase1 iter {:>5} {:?} lr {:.0e} loss {:.5}",
                    rec.iteration, rec.optimizer, rec.lr, rec.loss
                );
            }
            on_record(&rec);
            log.push(rec);
        }
        Ok(log)
    }
}

/// Mean per-episode loss (cross-entropy plus `dice_weight` times soft Dice)
/// and its gradient with respect to every trainable parameter.
pub fn batch_loss(
    model: &ModelState,
    episodes: &[Episode],
    dice_weight: f64,
) -> Result<(f64, GradMap)> {
    if episodes.is_empty() {
        return Err(Error::Validation("empty episode batch".into()));
    }
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let weight = 1.0 / episodes.len() as f64;
    let mut terms: Vec<(Var, f64)> = Vec::new();
    for ep in episodes {
        let support = SupportInput::new(&ep.support)?;
        let queries: Vec<Tensor> = ep.query.iter().map(|q| q.image().clone()).collect();
        let targets: Vec<Tensor> = ep.query.iter().map(|q| q.mask().clone()).collect();
        let nodes = forward_nodes(
            &mut g,
            &p,
            &model.arch,
            &support,
            &Tensor::stack(&queries)?,
            false,
        )?;
        let target = Tensor::stack(&targets)?;
        terms.push((g.cross_entropy(nodes.logits, target.clone()), weight));
        if dice_weight > 0.0 {
            let fg = g.select_channel(nodes.probs, 1);
            terms.push((g.soft_dice(fg, target), weight * dice_weight));
        }
    }
    let loss = g.weighted_sum(&terms);
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss);
    Ok((value, p.collect_grads(&mut grads)))
}

pub struct Phase1Outcome {
    pub model: ModelState,
    pub trainer: Phase1Trainer,
    pub log: Vec<LossRecord>,
}

/// Train a freshly initialised model over the full schedule of `cfg`.
pub fn train_phase1(
    dataset: &ImageDataset,
    cfg: &Phase1Config,
    arch: &ArchConfig,
    seed: u64,
) -> Result<Phase1Outcome> {
    let model = ModelState::init(arch, seed)?;
    let mut trainer = Phase1Trainer::new(model, seed);
    let log = trainer.run_until(dataset, cfg, cfg.total_iterations(), |_| {})?;
    Ok(Phase1Outcome {
        model: trainer.model.clone(),
        trainer,
        log,
    })
}
