use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{io, simulate_trial, Split, TaskDataset, TaskError, Theta, DESIGN_DIM};
use crate::par::map_indexed;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub pool_size: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seed: 0,
            n_train: 200,
            n_val: 25,
            n_test: 50,
            pool_size: 256,
        }
    }
}

impl BenchmarkConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub train: Vec<TaskDataset>,
    pub val: Vec<TaskDataset>,
    pub test: Vec<TaskDataset>,
}

impl Benchmark {
    pub fn split(&self, split: Split) -> &[TaskDataset] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Seed of task `index` in `split`, independent of every other task.
pub fn task_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 1u64,
        Split::Val => 2,
        Split::Test => 3,
    };
    derive_seed(seed, &[tag, index as u64])
}

/// Folds `words` into `seed`, giving well-separated child seeds.
pub(crate) fn derive_seed(seed: u64, words: &[u64]) -> u64 {
    let mut z = seed;
    for word in words {
        z = splitmix64(z ^ word.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    z
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn generate_task(cfg: &BenchmarkConfig, split: Split, index: usize) -> TaskDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed(cfg.seed, split, index));
    let theta = Theta::sample(&mut rng);
    let mut seen = HashSet::with_capacity(cfg.pool_size);
    let mut records = Vec::with_capacity(cfg.pool_size);
    while records.len() < cfg.pool_size {
        let x: Vec<f64> = (0..DESIGN_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            records.push(simulate_trial(&theta, &x));
        }
    }
    TaskDataset::new(format!("{split}-{index:04}"), split, Some(theta), records)
}

/// Generates all three splits. `jobs` only affects speed, never output.
pub fn generate_benchmark(cfg: &BenchmarkConfig, jobs: usize) -> Result<Benchmark, TaskError> {
    if cfg.n_train == 0 || cfg.n_val == 0 || cfg.n_test == 0 {
        return Err(TaskError::Config("every split needs at least one task".into()));
    }
    if cfg.pool_size == 0 {
        return Err(TaskError::Config("pool size must be positive".into()));
    }
    let make = |split| map_indexed(cfg.count(split), jobs, |i| generate_task(cfg, split, i));
    Ok(Benchmark {
        train: make(Split::Train),
        val: make(Split::Val),
        test: make(Split::Test),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitSummary {
    pub tasks: usize,
    pub designs: usize,
    /// Quantiles 0, 0.1, 0.25, 0.5, 0.75, 0.9, 1 of all rewards in the split.
    pub reward_quantiles: Vec<f64>,
    /// Same quantiles of the per-task maximum reward.
    pub max_f_quantiles: Vec<f64>,
    pub frac_zero_reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub config: BenchmarkConfig,
    pub quantile_levels: Vec<f64>,
    pub train: SplitSummary,
    pub val: SplitSummary,
    pub test: SplitSummary,
    pub test_frac_max_f_ge_4: f64,
}

const QUANTILE_LEVELS: [f64; 7] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];

fn split_summary(tasks: &[TaskDataset]) -> SplitSummary {
    let mut rewards: Vec<f64> = tasks.iter().flat_map(|t| t.records.iter().map(|r| r.f)).collect();
    let mut maxes: Vec<f64> = tasks.iter().map(|t| t.max_f).collect();
    rewards.sort_by(f64::total_cmp);
    maxes.sort_by(f64::total_cmp);
    let zeros = rewards.iter().filter(|&&f| f == 0.0).count();
    SplitSummary {
        tasks: tasks.len(),
        designs: rewards.len(),
        reward_quantiles: QUANTILE_LEVELS.iter().map(|&q| quantile_sorted(&rewards, q)).collect(),
        max_f_quantiles: QUANTILE_LEVELS.iter().map(|&q| quantile_sorted(&maxes, q)).collect(),
        frac_zero_reward: zeros as f64 / rewards.len().max(1) as f64,
    }
}

/// Linear-interpolation quantile of ascending `sorted`.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    pub fn new(cfg: &BenchmarkConfig, bench: &Benchmark) -> Self {
        let good = bench.test.iter().filter(|t| t.max_f >= 4.0).count();
        Summary {
            config: cfg.clone(),
            quantile_levels: QUANTILE_LEVELS.to_vec(),
            train: split_summary(&bench.train),
            val: split_summary(&bench.val),
            test: split_summary(&bench.test),
            test_frac_max_f_ge_4: good as f64 / bench.test.len().max(1) as f64,
        }
    }
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and `summary.json`.
pub fn write_benchmark(dir: &Path, cfg: &BenchmarkConfig, bench: &Benchmark) -> Result<Summary, TaskError> {
    fs::create_dir_all(dir).map_err(|e| TaskError::io(dir, e))?;
    for split in Split::ALL {
        io::write_tasks(&dir.join(format!("{split}.jsonl")), bench.split(split))?;
    }
    let summary = Summary::new(cfg, bench);
    let path = dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| TaskError::io(path, e))?;
    Ok(summary)
}
