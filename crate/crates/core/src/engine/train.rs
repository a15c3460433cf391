//! Episodic training of the transformer surrogate.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelError, TrainItem};
use crate::numerics::{AdamW, AdamWConfig, NumericsError, ParamStore, Tape};
use crate::tasks::{sample_context_target, Episode, SamplerConfig, TaskDataset, TaskError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_tasks: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Overrides the model's dropout rate during training when set.
    pub dropout: Option<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fixed episodes drawn per validation task.
    pub val_draws: usize,
    /// Set by the caller; run configs carry a single top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_tasks: 8,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            dropout: None,
            max_epochs: 300,
            patience: 50,
            val_draws: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_tasks == 0 || self.max_epochs == 0 || self.val_draws == 0 {
            return Err(TrainError::Config("batch_tasks, max_epochs and val_draws must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config("learning_rate must be positive and weight_decay nonnegative".into()));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(TrainError::Config(format!("dropout {p} is outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub(crate) fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("numeric failure at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: NumericsError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

/// One row of `train_log.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-target NLL over the epoch's training batches.
    pub train_nll: f64,
    /// Mean per-target NLL on the fixed validation episodes.
    pub val_nll: f64,
    pub best: bool,
}

/// Keeps the best-validation parameters and decides when to stop: training
/// ends once more than `patience` consecutive epochs fail to improve.
pub(crate) struct EarlyStopping {
    patience: usize,
    best: f64,
    bad_epochs: usize,
    pub best_params: Option<ParamStore>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
            best_params: None,
        }
    }

    /// Records an epoch; returns whether it is the new best.
    pub fn observe(&mut self, val: f64, params: &ParamStore) -> bool {
        if val < self.best {
            self.best = val;
            self.bad_epochs = 0;
            self.best_params = Some(params.clone());
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs > self.patience
    }
}

/// Seeded task order, reshuffled every time it is exhausted.
pub(crate) struct TaskCycle {
    order: Vec<usize>,
    pos: usize,
}

impl TaskCycle {
    pub fn new(n: usize) -> Self {
        TaskCycle { order: (0..n).collect(), pos: n }
    }

    pub fn next(&mut self, rng: &mut impl Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Result of [`train`]: the best-validation model and per-epoch log.
pub struct Trained {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub steps: usize,
}

fn validation_episodes(
    val: &[TaskDataset],
    sampler: &SamplerConfig,
    draws: usize,
    seed: u64,
) -> Result<Vec<(usize, Episode)>, TaskError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5641_4C5F_5345_4544);
    let mut out = Vec::with_capacity(val.len() * draws);
    for (t, task) in val.iter().enumerate() {
        for _ in 0..draws {
            out.push((t, sample_context_target(task, sampler, &mut rng)?));
        }
    }
    Ok(out)
}

/// Mean per-target NLL of `model` on fixed episodes.
pub(crate) fn episode_nll(model: &Model, tasks: &[TaskDataset], episodes: &[(usize, Episode)]) -> Result<f64, ModelError> {
    let (mut total, mut count) = (0.0, 0usize);
    for (t, ep) in episodes {
        let item = TrainItem::from_task(&tasks[*t], &ep.context, &ep.targets);
        total += model.nll_loss(&item.context, &item.targets)?;
        count += ep.targets.len();
    }
    Ok(total / count as f64)
}

/// Trains `model` episodically and returns the best-validation weights.
///
/// `on_epoch` sees each log row as soon as it is computed.
pub fn train(
    mut model: Model,
    train_tasks: &[TaskDataset],
    val_tasks: &[TaskDataset],
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Trained, TrainError> {
    cfg.validate()?;
    sampler.validate()?;
    if train_tasks.is_empty() || val_tasks.is_empty() {
        return Err(TrainError::Config("training needs at least one train and one val task".into()));
    }
    let val_eps = validation_episodes(val_tasks, sampler, cfg.val_draws, cfg.seed)?;
    let dropout = cfg.dropout.unwrap_or(model.config().dropout_rate);
    let mut opt = AdamW::new(cfg.adamw(), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cycle = TaskCycle::new(train_tasks.len());
    let steps_per_epoch = train_tasks.len().div_ceil(cfg.batch_tasks);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut log = Vec::new();
    let mut step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let (mut epoch_loss, mut epoch_targets) = (0.0, 0usize);
        for _ in 0..steps_per_epoch {
            let mut episodes = Vec::with_capacity(cfg.batch_tasks);
            for _ in 0..cfg.batch_tasks {
                let t = cycle.next(&mut rng);
                episodes.push((t, sample_context_target(&train_tasks[t], sampler, &mut rng)?));
            }
            let batch: Vec<TrainItem> = episodes
                .iter()
                .map(|(t, ep)| TrainItem::from_task(&train_tasks[*t], &ep.context, &ep.targets))
                .collect();
            let step_seed = rng.random::<u64>();
            let mut tape = Tape::new();
            let loss = model
                .batch_loss(&mut tape, &batch, Some((dropout, step_seed)))
                .map_err(|e| step_error(step, e))?;
            let value = tape.value(loss).item();
            let grads = tape.backward(loss).map_err(|source| TrainError::Step { step, source })?;
            opt.step(model.params_mut(), &grads);
            epoch_loss += value * batch.len() as f64;
            epoch_targets += batch.iter().map(|b| b.targets.len()).sum::<usize>();
            step += 1;
        }
        let val_nll = episode_nll(&model, val_tasks, &val_eps).map_err(|e| step_error(step, e))?;
        if !val_nll.is_finite() {
            return Err(TrainError::Step { step, source: NumericsError::NonFinite("validation loss") });
        }
        let best = stopper.observe(val_nll, model.params());
        let row = EpochLog {
            epoch,
            train_nll: epoch_loss / epoch_targets as f64,
            val_nll,
            best,
        };
        on_epoch(&row);
        log.push(row);
        if stopper.should_stop() {
            break;
        }
    }
    if let Some(best) = stopper.best_params {
        *model.params_mut() = best;
    }
    Ok(Trained { model, log, steps: step })
}

fn step_error(step: usize, e: ModelError) -> TrainError {
    match e {
        ModelError::Numerics(source) => TrainError::Step { step, source },
        other => TrainError::Model(other),
    }
}
