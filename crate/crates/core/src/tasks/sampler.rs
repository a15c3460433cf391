use rand::Rng;
use serde::{Deserialize, Serialize};

use super::generate::quantile_sorted;
use super::{TaskDataset, TaskError};

/// Distribution over (context, target) splits of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub context_min: usize,
    pub context_max: usize,
    pub target_size: usize,
    /// Draw targets half from the high-reward stratum, half from the rest.
    pub balanced: bool,
    /// Same rule for context points.
    pub balanced_context: bool,
    /// Per-task reward quantile at which the high stratum starts.
    pub high_quantile: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            context_min: 5,
            context_max: 30,
            target_size: 100,
            balanced: true,
            balanced_context: true,
            high_quantile: 0.8,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.context_min == 0 || self.context_min > self.context_max {
            return Err(TaskError::Config(format!(
                "context range [{}, {}] is empty or starts at 0",
                self.context_min, self.context_max
            )));
        }
        if self.target_size == 0 {
            return Err(TaskError::Config("target_size must be positive".into()));
        }
        if !(self.high_quantile > 0.0 && self.high_quantile < 1.0) {
            return Err(TaskError::Config(format!(
                "high_quantile {} is outside (0, 1)",
                self.high_quantile
            )));
        }
        Ok(())
    }

    /// Checks that a pool of `pool` designs can serve every draw.
    pub fn check_pool(&self, pool: usize) -> Result<(), TaskError> {
        self.validate()?;
        if self.context_max + self.target_size >= pool {
            return Err(TaskError::Config(format!(
                "pool of {pool} designs cannot hold {} context plus {} target points",
                self.context_max, self.target_size
            )));
        }
        Ok(())
    }
}

/// Indices into a task's records: a context set and a disjoint target set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub context: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Reward at or above which a design belongs to the high stratum.
pub fn high_threshold(task: &TaskDataset, quantile: f64) -> f64 {
    let mut f: Vec<f64> = task.records.iter().map(|r| r.f).collect();
    f.sort_by(f64::total_cmp);
    quantile_sorted(&f, quantile)
}

struct Strata {
    high: Vec<usize>,
    low: Vec<usize>,
}

impl Strata {
    fn new(task: &TaskDataset, quantile: f64) -> Self {
        let cut = high_threshold(task, quantile);
        let (high, low) = (0..task.records.len()).partition(|&i| task.records[i].f >= cut);
        Strata { high, low }
    }

    fn take(&mut self, balanced: bool, rng: &mut impl Rng) -> usize {
        let (nh, nl) = (self.high.len(), self.low.len());
        debug_assert!(nh + nl > 0);
        let from_high = if balanced {
            let coin = rng.random_bool(0.5);
            (coin && nh > 0) || nl == 0
        } else {
            rng.random_range(0..nh + nl) < nh
        };
        let pool = if from_high { &mut self.high } else { &mut self.low };
        let j = rng.random_range(0..pool.len());
        pool.swap_remove(j)
    }
}

/// Draws `N_C ~ U{context_min..=context_max}` and a fresh episode.
pub fn sample_context_target(
    task: &TaskDataset,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Episode, TaskError> {
    cfg.check_pool(task.len())?;
    let n_context = rng.random_range(cfg.context_min..=cfg.context_max);
    draw(task, cfg, n_context, rng)
}

impl SamplerConfig {
    /// An episode with exactly `n_context` context points.
    pub fn sample_sized(
        &self,
        task: &TaskDataset,
        n_context: usize,
        rng: &mut impl Rng,
    ) -> Result<Episode, TaskError> {
        self.validate()?;
        if n_context == 0 || n_context + self.target_size >= task.len() {
            return Err(TaskError::Config(format!(
                "task {} has {} designs, too few for {n_context} context plus {} target points",
                task.task_id,
                task.len(),
                self.target_size
            )));
        }
        draw(task, self, n_context, rng)
    }
}

fn draw(task: &TaskDataset, cfg: &SamplerConfig, n_context: usize, rng: &mut impl Rng) -> Result<Episode, TaskError> {
    let mut strata = Strata::new(task, cfg.high_quantile);
    let context = (0..n_context)
        .map(|_| strata.take(cfg.balanced_context, rng))
        .collect();
    let targets = (0..cfg.target_size)
        .map(|_| strata.take(cfg.balanced, rng))
        .collect();
    Ok(Episode { context, targets })
}

/// `n` indices drawn stratum-balanced without replacement. When the pool is
/// smaller than `n`, the whole pool is used and the remainder is drawn with
/// replacement under the same rule.
pub fn sample_balanced(task: &TaskDataset, n: usize, quantile: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n && !task.records.is_empty() {
        let mut strata = Strata::new(task, quantile);
        let round = (n - out.len()).min(task.len());
        out.extend((0..round).map(|_| strata.take(true, rng)));
    }
    out
}
