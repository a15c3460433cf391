//! Deep-kernel GP shared across tasks: an MLP encoder `E`, a linear mean
//! `W·E(x)` and an ARD kernel over embeddings, all trained jointly on the
//! exact marginal likelihood of balanced per-task samples.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gram_var, posterior_with_mean, GpError, KernelConfig, KernelFamily, KernelVars};
use crate::engine::{EarlyStopping, EpochLog, TrainConfig};
use crate::model::layers::{Fwd, Linear};
use crate::model::{Checkpoint, CheckpointError, GaussianPrediction, ModelKind, Normalizer};
use crate::numerics::{AdamW, ParamId, ParamStore, Tape, Tensor, Var};
use crate::tasks::{sample_balanced, TaskDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub family: KernelFamily,
    pub embedding_dim: usize,
    /// Width of each of the three hidden layers.
    pub hidden_dim: usize,
    pub sample_size: usize,
    pub high_quantile: f64,
    pub jitter: f64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            family: KernelFamily::Rbf,
            embedding_dim: 16,
            hidden_dim: 64,
            sample_size: 50,
            high_quantile: 0.8,
            jitter: 1e-6,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: DgpConfig,
    input_dim: usize,
    normalizer: Normalizer,
}

#[derive(Clone, Debug)]
pub struct DeepKernelGp {
    config: DgpConfig,
    input_dim: usize,
    normalizer: Normalizer,
    params: ParamStore,
    layers: [Linear; 4],
    mean_w: ParamId,
    log_ls: ParamId,
    log_sf: ParamId,
    log_sn: ParamId,
}

impl DeepKernelGp {
    pub fn new(config: DgpConfig, input_dim: usize, normalizer: Normalizer, seed: u64) -> Result<Self, GpError> {
        if config.embedding_dim == 0 || config.hidden_dim == 0 || config.sample_size < 2 || input_dim == 0 {
            return Err(GpError::Config("dimensions must be positive and sample_size at least 2".into()));
        }
        if !(config.jitter > 0.0) || !(config.high_quantile > 0.0 && config.high_quantile < 1.0) {
            return Err(GpError::Config("jitter must be positive and high_quantile in (0, 1)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (h, e) = (config.hidden_dim, config.embedding_dim);
        let layers = [
            Linear::new(&mut params, "enc.0", input_dim, h, &mut rng),
            Linear::new(&mut params, "enc.1", h, h, &mut rng),
            Linear::new(&mut params, "enc.2", h, h, &mut rng),
            Linear::new(&mut params, "enc.3", h, e, &mut rng),
        ];
        let mean_w = params.add_xavier("mean.w", e, 1, &mut rng);
        let log_ls = params.add("kernel.log_lengthscales", Tensor::full(vec![e], 0.5 * (e as f64).ln()));
        let log_sf = params.add("kernel.log_signal", Tensor::vector(vec![0.0]));
        let log_sn = params.add("kernel.log_noise", Tensor::vector(vec![(0.1f64).ln()]));
        Ok(DeepKernelGp { config, input_dim, normalizer, params, layers, mean_w, log_ls, log_sf, log_sn })
    }

    pub fn config(&self) -> &DgpConfig {
        &self.config
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Current kernel hyperparameters over embeddings.
    pub fn kernel(&self) -> KernelConfig {
        let mut log: Vec<f64> = self.params.get(self.log_ls).data().to_vec();
        log.push(self.params.get(self.log_sf).item());
        log.push(self.params.get(self.log_sn).item());
        KernelConfig::from_log_hypers(self.config.family, &log, self.config.jitter)
    }

    fn design_matrix(&self, xs: &[&[f64]]) -> Result<Tensor, GpError> {
        let mut data = Vec::with_capacity(xs.len() * self.input_dim);
        for x in xs {
            if x.len() != self.input_dim {
                return Err(GpError::Config(format!("design has {} entries, expected {}", x.len(), self.input_dim)));
            }
            data.extend_from_slice(x);
        }
        Ok(Tensor::new(vec![xs.len(), self.input_dim], data))
    }

    /// Embeddings `[n, e]` and prior means `[n]` on the tape.
    fn forward(&self, f: &Fwd, tape: &mut Tape, x: Tensor) -> (Var, Var) {
        let n = x.n_rows();
        let mut h = tape.constant(x);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(f, tape, h);
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        let w = f.param(tape, self.mean_w);
        let m = tape.matmul(h, w);
        let m = tape.reshape(m, &[n]);
        (h, m)
    }

    fn kernel_vars(&self, f: &Fwd, tape: &mut Tape) -> KernelVars {
        KernelVars {
            log_lengthscales: f.param(tape, self.log_ls),
            log_signal: f.param(tape, self.log_sf),
            log_noise: f.param(tape, self.log_sn),
        }
    }

    /// Joint negative log marginal likelihood of standardized rewards `y`.
    fn joint_nll(&self, f: &Fwd, tape: &mut Tape, xs: &[&[f64]], y: &[f64]) -> Result<Var, GpError> {
        let x = self.design_matrix(xs)?;
        let (e, m) = self.forward(f, tape, x);
        let yv = tape.constant(Tensor::vector(y.to_vec()));
        let r = tape.sub(yv, m);
        let hv = self.kernel_vars(f, tape);
        let k = gram_var(tape, self.config.family, e, hv);
        Ok(tape.gp_nll(k, r, self.config.jitter)?)
    }

    fn sample_nll(&self, task: &TaskDataset, idx: &[usize]) -> Result<f64, GpError> {
        let xs: Vec<&[f64]> = idx.iter().map(|&i| task.records[i].x.as_slice()).collect();
        let y: Vec<f64> = idx.iter().map(|&i| self.normalizer.reward(task.records[i].f)).collect();
        let f = Fwd::new(&self.params, None);
        let mut tape = Tape::inference();
        let nll = self.joint_nll(&f, &mut tape, &xs, &y)?;
        Ok(tape.value(nll).item())
    }

    fn embed(&self, xs: &[&[f64]]) -> Result<(Tensor, Vec<f64>), GpError> {
        let f = Fwd::new(&self.params, None);
        let mut tape = Tape::inference();
        let (e, m) = self.forward(&f, &mut tape, self.design_matrix(xs)?);
        Ok((tape.value(e).clone(), tape.value(m).data().to_vec()))
    }

    /// Posterior in standardized reward units given raw context rewards.
    pub fn predict(
        &self,
        context_x: &[&[f64]],
        context_f: &[f64],
        query: &[&[f64]],
    ) -> Result<Vec<GaussianPrediction>, GpError> {
        if context_x.is_empty() || context_x.len() != context_f.len() {
            return Err(GpError::TooFewPoints { needed: 1, got: context_x.len().min(context_f.len()) });
        }
        let (ec, mc) = self.embed(context_x)?;
        let (eq, mq) = self.embed(query)?;
        let resid: Vec<f64> = context_f
            .iter()
            .zip(&mc)
            .map(|(&f, m)| self.normalizer.reward(f) - m)
            .collect();
        posterior_with_mean(&self.kernel(), &ec, &resid, &eq, &mq)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let header = Header {
            config: self.config.clone(),
            input_dim: self.input_dim,
            normalizer: self.normalizer.clone(),
        };
        Checkpoint {
            kind: ModelKind::DeepKernelGp,
            header: serde_json::to_value(header).expect("header serializes"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, GpError> {
        if ck.kind != ModelKind::DeepKernelGp {
            return Err(CheckpointError::KindMismatch {
                expected: ModelKind::DeepKernelGp.name(),
                found: ck.kind.name(),
            }
            .into());
        }
        let header: Header = serde_json::from_value(ck.header.clone())
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let mut model = DeepKernelGp::new(header.config, header.input_dim, header.normalizer, 0)?;
        ck.restore_into(&mut model.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), GpError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, GpError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Output of [`train_dgp`].
pub struct DgpTraining {
    pub model: DeepKernelGp,
    pub log: Vec<EpochLog>,
    /// Validation NLL per point before the first update.
    pub initial_val_nll: f64,
}

fn fixed_samples(
    tasks: &[TaskDataset],
    cfg: &DgpConfig,
    draws: usize,
    seed: u64,
) -> Vec<(usize, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4447_505F_5641_4C00);
    let mut out = Vec::with_capacity(tasks.len() * draws);
    for (t, task) in tasks.iter().enumerate() {
        for _ in 0..draws {
            out.push((t, sample_balanced(task, cfg.sample_size, cfg.high_quantile, &mut rng)));
        }
    }
    out
}

fn mean_point_nll(model: &DeepKernelGp, tasks: &[TaskDataset], samples: &[(usize, Vec<usize>)]) -> Result<f64, GpError> {
    let (mut total, mut count) = (0.0, 0usize);
    for (t, idx) in samples {
        total += model.sample_nll(&tasks[*t], idx)?;
        count += idx.len();
    }
    Ok(total / count as f64)
}

/// Trains a deep-kernel GP; tasks smaller than `sample_size` are sampled
/// with replacement. Returns the best-validation parameters.
pub fn train_dgp(
    train: &[TaskDataset],
    val: &[TaskDataset],
    cfg: &DgpConfig,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<DgpTraining, GpError> {
    tc.validate().map_err(|e| GpError::Config(e.to_string()))?;
    let first = train.first().ok_or(GpError::TooFewPoints { needed: 1, got: 0 })?;
    if val.is_empty() {
        return Err(GpError::Config("DGP training needs at least one validation task".into()));
    }
    let input_dim = first
        .input_dim()
        .ok_or_else(|| GpError::Config(format!("training task {} has no designs", first.task_id)))?;
    let mut model = DeepKernelGp::new(cfg.clone(), input_dim, Normalizer::fit(train), tc.seed)?;
    let val_samples = fixed_samples(val, cfg, tc.val_draws, tc.seed);
    let initial_val_nll = mean_point_nll(&model, val, &val_samples)?;

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = AdamW::new(tc.adamw(), &model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopping::new(tc.patience);
    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut points) = (0.0, 0usize);
        for chunk in order.chunks(tc.batch_tasks) {
            let mut tape = Tape::new();
            let f = Fwd::new(&model.params, None);
            let mut terms = Vec::with_capacity(chunk.len());
            for &t in chunk {
                let task = &train[t];
                let idx = sample_balanced(task, cfg.sample_size, cfg.high_quantile, &mut rng);
                let xs: Vec<&[f64]> = idx.iter().map(|&i| task.records[i].x.as_slice()).collect();
                let y: Vec<f64> = idx.iter().map(|&i| model.normalizer.reward(task.records[i].f)).collect();
                let nll = model.joint_nll(&f, &mut tape, &xs, &y).map_err(|e| at_step(step, e))?;
                terms.push(nll);
                points += idx.len();
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = tape.add(total, t);
            }
            epoch_loss += tape.value(total).item();
            let loss = tape.scale(total, 1.0 / chunk.len() as f64);
            let grads = tape.backward(loss).map_err(|source| GpError::Step { step, source })?;
            opt.step(&mut model.params, &grads);
            step += 1;
        }
        let val_nll = mean_point_nll(&model, val, &val_samples).map_err(|e| at_step(step, e))?;
        let best = stopper.observe(val_nll, &model.params);
        let row = EpochLog { epoch, train_nll: epoch_loss / points as f64, val_nll, best };
        on_epoch(&row);
        log.push(row);
        if stopper.should_stop() {
            break;
        }
    }
    if let Some(best) = stopper.best_params.take() {
        model.params = best;
    }
    Ok(DgpTraining { model, log, initial_val_nll })
}

fn at_step(step: usize, e: GpError) -> GpError {
    match e {
        GpError::Numerics(source) => GpError::Step { step, source },
        other => other,
    }
}

/// One cell of the validation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub family: KernelFamily,
    pub embedding_dim: usize,
    pub best_val_nll: f64,
    pub epochs: usize,
}

/// Trains one DGP per (family, embedding_dim) pair and keeps the one with
/// the lowest validation NLL; ties go to the earlier grid cell.
pub fn select_dgp(
    train: &[TaskDataset],
    val: &[TaskDataset],
    base: &DgpConfig,
    families: &[KernelFamily],
    dims: &[usize],
    tc: &TrainConfig,
) -> Result<(DgpTraining, Vec<GridResult>), GpError> {
    let mut best: Option<(f64, DgpTraining)> = None;
    let mut grid = Vec::new();
    for &family in families {
        for &embedding_dim in dims {
            let cfg = DgpConfig { family, embedding_dim, ..base.clone() };
            let run = train_dgp(train, val, &cfg, tc, |_| {})?;
            let score = run.log.iter().map(|r| r.val_nll).fold(f64::INFINITY, f64::min);
            grid.push(GridResult { family, embedding_dim, best_val_nll: score, epochs: run.log.len() });
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, run));
            }
        }
    }
    let (_, run) = best.ok_or_else(|| GpError::Config("empty DGP grid".into()))?;
    Ok((run, grid))
}

