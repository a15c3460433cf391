//! Few-shot prediction protocol: for every context size and task, draw
//! fixed seeded context/target pairs and score the surrogate's predictions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EngineError, Surrogate};
use crate::numerics::gaussian_nll;
use crate::par::map_indexed;
use crate::tasks::{derive_seed, SamplerConfig, TaskDataset};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub sizes: Vec<usize>,
    pub repeats: usize,
    /// Sampler used for every draw; its context range is ignored.
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sizes: vec![5, 10, 20, 30],
            repeats: 10,
            sampler: SamplerConfig::default(),
            seed: 0,
            jobs: 1,
        }
    }
}

/// One row of the evaluation table.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub context_size: usize,
    /// Squared error summed over each target set, averaged over pairs and tasks.
    pub mse_sum: f64,
    /// Per-target NLL averaged over targets, pairs and tasks.
    pub nll_mean: f64,
    pub n_tasks: usize,
    pub n_repeats: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionReport {
    pub rows: Vec<PredictionRow>,
    /// `per_task_mse[s][t]`: summed squared error of task `t` at size
    /// `sizes[s]`, averaged over repeats.
    pub per_task_mse: Vec<Vec<f64>>,
}

/// Episodes depend only on `(seed, task, size, repeat)`, so two
/// surrogates evaluated with the same seed see identical pairs.
pub fn evaluate_prediction(
    surrogate: &dyn Surrogate,
    tasks: &[TaskDataset],
    cfg: &EvalConfig,
) -> Result<PredictionReport, EngineError> {
    if cfg.sizes.is_empty() || cfg.repeats == 0 || tasks.is_empty() {
        return Err(EngineError::Config("need at least one size, one repeat and one task".into()));
    }
    for &size in &cfg.sizes {
        if size == 0 || size < cfg.sampler.context_min || size > cfg.sampler.context_max {
            return Err(EngineError::Config(format!(
                "context size {size} is outside the sampler range [{}, {}]",
                cfg.sampler.context_min, cfg.sampler.context_max
            )));
        }
    }
    let norm = surrogate.normalizer();
    let per_task: Vec<Result<Vec<(f64, f64)>, EngineError>> = map_indexed(tasks.len(), cfg.jobs, |t| {
        let task = &tasks[t];
        let mut out = Vec::with_capacity(cfg.sizes.len());
        for (s, &size) in cfg.sizes.iter().enumerate() {
            let (mut se, mut nll) = (0.0, 0.0);
            for r in 0..cfg.repeats {
                let seed = derive_seed(cfg.seed, &[t as u64, s as u64, r as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ep = cfg.sampler.sample_sized(task, size, &mut rng)?;
                let preds = surrogate.predict(task, &ep.context, &ep.targets, seed)?;
                let mut pair_nll = 0.0;
                for (p, &i) in preds.iter().zip(&ep.targets) {
                    let y = norm.reward(task.records[i].f);
                    se += (p.mu - y).powi(2);
                    pair_nll += gaussian_nll(y, p.mu, p.sigma).map_err(crate::model::ModelError::from)?;
                }
                nll += pair_nll / ep.targets.len() as f64;
            }
            out.push((se / cfg.repeats as f64, nll / cfg.repeats as f64));
        }
        Ok(out)
    });
    let per_task = per_task.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = tasks.len() as f64;
    let mut rows = Vec::with_capacity(cfg.sizes.len());
    let mut per_task_mse = Vec::with_capacity(cfg.sizes.len());
    for (s, &size) in cfg.sizes.iter().enumerate() {
        let mse: Vec<f64> = per_task.iter().map(|v| v[s].0).collect();
        rows.push(PredictionRow {
            context_size: size,
            mse_sum: mse.iter().sum::<f64>() / n,
            nll_mean: per_task.iter().map(|v| v[s].1).sum::<f64>() / n,
            n_tasks: tasks.len(),
            n_repeats: cfg.repeats,
        });
        per_task_mse.push(mse);
    }
    Ok(PredictionReport { rows, per_task_mse })
}
