//! Single-task GP refit on each test-time context.
//!
//! Hyperparameters are MAP estimates: the exact log marginal likelihood of
//! the standardized rewards plus a normal prior on each log-lengthscale
//! centred at `ln √d` with unit scale. Each restart runs Adam on the
//! log-hyperparameters and the best objective value seen anywhere wins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gp_posterior, lml_gradient, GpError, KernelConfig, KernelFamily};
use crate::model::GaussianPrediction;
use crate::numerics::{NumericsError, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StgpConfig {
    pub family: KernelFamily,
    pub restarts: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub prior_scale: f64,
    pub min_noise: f64,
    pub jitter: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for StgpConfig {
    fn default() -> Self {
        StgpConfig {
            family: KernelFamily::Rbf,
            restarts: 4,
            iterations: 60,
            learning_rate: 0.1,
            prior_scale: 1.0,
            min_noise: 1e-6,
            jitter: 1e-6,
            seed: 0,
        }
    }
}

/// A fitted single-task GP together with its training data.
#[derive(Clone, Debug)]
pub struct Stgp {
    pub kernel: KernelConfig,
    /// Best MAP objective reached.
    pub objective: f64,
    /// MAP objective at each restart's starting point.
    pub initial_objectives: Vec<f64>,
    x: Tensor,
    y_scaled: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
}

impl Stgp {
    /// Posterior in the units of the training rewards.
    pub fn predict(&self, query: &Tensor) -> Result<Vec<GaussianPrediction>, GpError> {
        let preds = gp_posterior(&self.kernel, &self.x, &self.y_scaled, query)?;
        Ok(preds
            .into_iter()
            .map(|p| GaussianPrediction {
                mu: self.y_mean + self.y_scale * p.mu,
                sigma: self.y_scale * p.sigma,
            })
            .collect())
    }
}

const LOG_BOUND: f64 = 10.0;

fn map_objective(
    cfg: &StgpConfig,
    log: &[f64],
    x: &Tensor,
    y: &[f64],
) -> Result<(f64, Vec<f64>), GpError> {
    let (lml, mut grad) = lml_gradient(cfg.family, log, x, y, cfg.jitter)?;
    let d = x.row_len();
    let centre = 0.5 * (d as f64).ln();
    let s2 = cfg.prior_scale * cfg.prior_scale;
    let mut prior = 0.0;
    for i in 0..d {
        let z = log[i] - centre;
        prior -= 0.5 * z * z / s2;
        grad[i] -= z / s2;
    }
    Ok((lml + prior, grad))
}

fn clamp(cfg: &StgpConfig, log: &mut [f64]) {
    let n = log.len();
    for v in log.iter_mut() {
        *v = v.clamp(-LOG_BOUND, LOG_BOUND);
    }
    log[n - 1] = log[n - 1].max(cfg.min_noise.ln());
}

/// Fits an STGP on `(x, y)` with `y` in any units; requires two points.
pub fn fit_stgp(x: &Tensor, y: &[f64], cfg: &StgpConfig) -> Result<Stgp, GpError> {
    let n = y.len();
    if n < 2 || x.n_rows() != n {
        return Err(GpError::TooFewPoints { needed: 2, got: n.min(x.n_rows()) });
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
    let y_scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    let y_scaled: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();

    let d = x.row_len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut initial = Vec::with_capacity(cfg.restarts);
    let mut last_err = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut log = vec![0.5 * (d as f64).ln(); d];
        log.push(0.0);
        log.push((0.1f64).ln());
        if restart > 0 {
            for v in &mut log[..d] {
                *v += cfg.prior_scale * rng.random_range(-1.5..1.5);
            }
            log[d] = rng.random_range(-1.0..1.0);
            log[d + 1] = rng.random_range((1e-3f64).ln()..(0.5f64).ln());
        }
        clamp(cfg, &mut log);
        match adam_ascent(cfg, log, x, &y_scaled) {
            Ok((start, value, point)) => {
                initial.push(start);
                if best.as_ref().is_none_or(|(b, _)| value > *b) {
                    best = Some((value, point));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let Some((objective, log)) = best else {
        let e = match last_err {
            Some(GpError::Numerics(e)) => e,
            Some(other) => NumericsError::InvalidArgument(other.to_string()),
            None => NumericsError::InvalidArgument("no restarts ran".into()),
        };
        return Err(GpError::AllRestartsFailed(e));
    };
    Ok(Stgp {
        kernel: KernelConfig::from_log_hypers(cfg.family, &log, cfg.jitter),
        objective,
        initial_objectives: initial,
        x: x.clone(),
        y_scaled,
        y_mean,
        y_scale,
    })
}

/// Returns (starting objective, best objective, best point).
fn adam_ascent(
    cfg: &StgpConfig,
    mut log: Vec<f64>,
    x: &Tensor,
    y: &[f64],
) -> Result<(f64, f64, Vec<f64>), GpError> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![0.0; log.len()];
    let mut v = vec![0.0; log.len()];
    let (start, mut grad) = map_objective(cfg, &log, x, y)?;
    let (mut best, mut best_point) = (start, log.clone());
    for t in 1..=cfg.iterations {
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for i in 0..log.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            log[i] += cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
        clamp(cfg, &mut log);
        // a failed step ends this restart but keeps what it found so far
        let Ok((value, g)) = map_objective(cfg, &log, x, y) else { break };
        if value > best {
            best = value;
            best_point.clone_from(&log);
        }
        grad = g;
    }
    Ok((start, best, best_point))
}
