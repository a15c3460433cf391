//! Discrete Bayesian optimization over a task's pre-evaluated pool.
//!
//! Trial indices: the `init` starting designs occupy trials `1-init ..= 0`
//! and the acquisition picks occupy trials `1 ..= trials`, so the value at
//! trial 0 is the best of the initial context.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EngineError, Surrogate};
use crate::model::GaussianPrediction;
use crate::numerics::std_normal_cdf;
use crate::par::map_indexed;
use crate::tasks::{derive_seed, TaskDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acquisition {
    Pi,
    Greedy,
}

impl Acquisition {
    pub fn name(self) -> &'static str {
        match self {
            Acquisition::Pi => "pi",
            Acquisition::Greedy => "greedy",
        }
    }
}

/// Probability of improvement over `f_best`, or the mean itself for greedy.
pub fn acquisition_score(kind: Acquisition, p: &GaussianPrediction, f_best: f64) -> f64 {
    match kind {
        Acquisition::Greedy => p.mu,
        Acquisition::Pi if f_best == f64::NEG_INFINITY => 1.0,
        Acquisition::Pi => std_normal_cdf((p.mu - f_best) / p.sigma),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub trial: i64,
    pub selected_index: usize,
    pub observed_f: f64,
    pub best_f: f64,
    pub regret: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizationTrace {
    pub surrogate: String,
    pub acquisition: Acquisition,
    pub task_id: String,
    pub run: usize,
    pub seed: u64,
    pub max_f: f64,
    /// Set when too few designs passed the low-reward filter and the
    /// initial context fell back to the lowest-reward designs.
    pub init_fallback: bool,
    pub rows: Vec<TraceRow>,
}

impl OptimizationTrace {
    pub fn final_regret(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.regret)
    }
}

/// Initial designs: uniform among those with `f ≤ 0.3·max_f`.
fn initial_context(task: &TaskDataset, init: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
    let cut = 0.3 * task.max_f;
    let mut low: Vec<usize> = (0..task.len()).filter(|&i| task.records[i].f <= cut).collect();
    if low.len() >= init {
        low.shuffle(rng);
        low.truncate(init);
        return (low, false);
    }
    let mut all: Vec<usize> = (0..task.len()).collect();
    all.sort_by(|&a, &b| task.records[a].f.total_cmp(&task.records[b].f).then(a.cmp(&b)));
    all.truncate(init);
    (all, true)
}

/// One optimization run of `trials` picks after `init` starting designs.
pub fn bayesopt_run(
    surrogate: &dyn Surrogate,
    task: &TaskDataset,
    init: usize,
    trials: usize,
    acquisition: Acquisition,
    seed: u64,
) -> Result<OptimizationTrace, EngineError> {
    if init == 0 || task.len() < init + trials {
        return Err(EngineError::Config(format!(
            "task {} has {} designs, fewer than {init} initial plus {trials} trials",
            task.task_id,
            task.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut observed, init_fallback) = initial_context(task, init, &mut rng);
    let mut seen = vec![false; task.len()];
    let mut rows = Vec::with_capacity(init + trials);
    let mut best = f64::NEG_INFINITY;
    let record = |rows: &mut Vec<TraceRow>, trial: i64, i: usize, best: &mut f64| {
        let f = task.records[i].f;
        *best = best.max(f);
        rows.push(TraceRow {
            trial,
            selected_index: i,
            observed_f: f,
            best_f: *best,
            regret: task.max_f - *best,
        });
    };
    for (k, &i) in observed.iter().enumerate() {
        seen[i] = true;
        record(&mut rows, k as i64 + 1 - init as i64, i, &mut best);
    }

    let mut cache = None;
    for t in 1..=trials {
        let candidates: Vec<usize> = (0..task.len()).filter(|&i| !seen[i]).collect();
        let preds = surrogate.predict_growing(task, &observed, &candidates, derive_seed(seed, &[t as u64]), &mut cache)?;
        let f_best = surrogate.normalizer().reward(best);
        let mut pick = (f64::NEG_INFINITY, candidates[0]);
        for (p, &i) in preds.iter().zip(&candidates) {
            let score = acquisition_score(acquisition, p, f_best);
            if score > pick.0 {
                pick = (score, i);
            }
        }
        let chosen = pick.1;
        seen[chosen] = true;
        observed.push(chosen);
        record(&mut rows, t as i64, chosen, &mut best);
    }
    Ok(OptimizationTrace {
        surrogate: surrogate.name().to_string(),
        acquisition,
        task_id: task.task_id.clone(),
        run: 0,
        seed,
        max_f: task.max_f,
        init_fallback,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub init: usize,
    pub trials: usize,
    pub runs: usize,
    pub acquisition: Acquisition,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            init: 5,
            trials: 30,
            runs: 5,
            acquisition: Acquisition::Pi,
        }
    }
}

/// `runs` optimization runs on every task, ordered by task then run.
pub fn run_protocol(
    surrogate: &dyn Surrogate,
    tasks: &[TaskDataset],
    cfg: &ProtocolConfig,
    seed: u64,
    jobs: usize,
) -> Result<Vec<OptimizationTrace>, EngineError> {
    if cfg.runs == 0 {
        return Err(EngineError::Config("runs must be positive".into()));
    }
    let results = map_indexed(tasks.len() * cfg.runs, jobs, |k| {
        let (t, r) = (k / cfg.runs, k % cfg.runs);
        let run_seed = derive_seed(seed, &[t as u64, r as u64]);
        bayesopt_run(surrogate, &tasks[t], cfg.init, cfg.trials, cfg.acquisition, run_seed).map(|mut tr| {
            tr.run = r;
            tr
        })
    });
    results.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub surrogate: String,
    pub trial: i64,
    pub mean_norm_best: f64,
    pub mean_regret: f64,
    /// One entry per requested threshold.
    pub frac_solved: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub thresholds: Vec<f64>,
    pub rows: Vec<AggregateRow>,
    /// Tasks left out because their pool maximum is 0.
    pub excluded_tasks: usize,
}

/// Per surrogate and trial: runs are averaged within each task first, then
/// across tasks. Surrogates appear in first-seen order.
pub fn aggregate_runs(traces: &[OptimizationTrace], thresholds: &[f64]) -> Result<Aggregate, EngineError> {
    if traces.is_empty() {
        return Err(EngineError::Config("no traces to aggregate".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&OptimizationTrace>> = HashMap::new();
    for tr in traces {
        if !groups.contains_key(tr.surrogate.as_str()) {
            order.push(&tr.surrogate);
        }
        groups.entry(&tr.surrogate).or_default().push(tr);
    }
    let mut excluded: Vec<&str> = Vec::new();
    let mut rows = Vec::new();
    for name in order {
        let group = &groups[name];
        let trials: Vec<i64> = group[0].rows.iter().map(|r| r.trial).collect();
        let mut tasks: Vec<&str> = Vec::new();
        let mut by_task: HashMap<&str, Vec<&OptimizationTrace>> = HashMap::new();
        for tr in group {
            if tr.rows.iter().map(|r| r.trial).ne(trials.iter().copied()) {
                return Err(EngineError::Config(format!(
                    "{} trace for task {} run {} has a different trial range",
                    name, tr.task_id, tr.run
                )));
            }
            if !(tr.max_f > 0.0) {
                if !excluded.contains(&tr.task_id.as_str()) {
                    excluded.push(&tr.task_id);
                }
                continue;
            }
            if !by_task.contains_key(tr.task_id.as_str()) {
                tasks.push(&tr.task_id);
            }
            by_task.entry(&tr.task_id).or_default().push(tr);
        }
        if tasks.is_empty() {
            continue;
        }
        let nt = tasks.len() as f64;
        for (k, &trial) in trials.iter().enumerate() {
            let (mut norm, mut regret) = (0.0, 0.0);
            let mut solved = vec![0.0; thresholds.len()];
            for task in &tasks {
                let runs = &by_task[task];
                let nr = runs.len() as f64;
                for tr in runs {
                    let row = &tr.rows[k];
                    norm += row.best_f / tr.max_f / nr;
                    regret += row.regret / nr;
                    for (s, &th) in solved.iter_mut().zip(thresholds) {
                        if row.regret <= th {
                            *s += 1.0 / nr;
                        }
                    }
                }
            }
            rows.push(AggregateRow {
                surrogate: name.to_string(),
                trial,
                mean_norm_best: norm / nt,
                mean_regret: regret / nt,
                frac_solved: solved.into_iter().map(|s| s / nt).collect(),
            });
        }
    }
    Ok(Aggregate {
        thresholds: thresholds.to_vec(),
        rows,
        excluded_tasks: excluded.len(),
    })
}
