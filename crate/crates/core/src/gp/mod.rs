//! Gaussian-process baselines.
//!
//! [`gp_posterior`] is the exact posterior under an ARD kernel. The
//! single-task GP ([`fit_stgp`]) fits its hyperparameters on the test-time
//! context alone; the deep-kernel GP ([`DeepKernelGp`]) learns an encoder,
//! a linear mean and the kernel across training tasks.

mod dgp;
mod stgp;

pub use dgp::{select_dgp, train_dgp, DeepKernelGp, DgpConfig, DgpTraining, GridResult};
pub use stgp::{fit_stgp, Stgp, StgpConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CheckpointError, GaussianPrediction};
use crate::numerics::{linalg, matern52_from_sq, NumericsError, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Rbf,
    Matern52,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 2] = [KernelFamily::Rbf, KernelFamily::Matern52];

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Rbf => "rbf",
            KernelFamily::Matern52 => "matern52",
        }
    }

    /// Correlation as a function of the squared scaled distance.
    pub fn correlation(self, d2: f64) -> f64 {
        match self {
            KernelFamily::Rbf => (-0.5 * d2).exp(),
            KernelFamily::Matern52 => matern52_from_sq(d2),
        }
    }
}

/// Stationary ARD kernel plus Gaussian observation noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub jitter: f64,
}

impl KernelConfig {
    pub fn new(family: KernelFamily, dim: usize) -> Self {
        KernelConfig {
            family,
            lengthscales: vec![1.0; dim],
            signal_variance: 1.0,
            noise_variance: 1e-2,
            jitter: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<(), GpError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.lengthscales.is_empty() || !self.lengthscales.iter().all(|&l| positive(l)) {
            return Err(GpError::Config("lengthscales must be positive and non-empty".into()));
        }
        if !positive(self.signal_variance) || !positive(self.noise_variance) || !positive(self.jitter) {
            return Err(GpError::Config("variances and jitter must be positive".into()));
        }
        Ok(())
    }

    /// `[ln ℓ_1 … ln ℓ_d, ln σ_f², ln σ_n²]`.
    pub fn log_hypers(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.lengthscales.iter().map(|l| l.ln()).collect();
        v.push(self.signal_variance.ln());
        v.push(self.noise_variance.ln());
        v
    }

    pub fn from_log_hypers(family: KernelFamily, log: &[f64], jitter: f64) -> Self {
        let d = log.len() - 2;
        KernelConfig {
            family,
            lengthscales: log[..d].iter().map(|v| v.exp()).collect(),
            signal_variance: log[d].exp(),
            noise_variance: log[d + 1].exp(),
            jitter,
        }
    }
}

#[derive(Debug, Error)]
pub enum GpError {
    #[error("invalid GP configuration: {0}")]
    Config(String),
    #[error("need at least {needed} training points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("every restart failed; last error: {0}")]
    AllRestartsFailed(NumericsError),
    #[error("numeric failure at training step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: NumericsError,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Task(#[from] crate::tasks::TaskError),
}

/// `k(X, X2)` as an `[n, m]` matrix; rows of `x` and `x2` are designs.
pub fn kernel_eval(cfg: &KernelConfig, x: &Tensor, x2: &Tensor) -> Tensor {
    let d = cfg.lengthscales.len();
    assert_eq!(x.row_len(), d, "kernel_eval: x width differs from the lengthscales");
    assert_eq!(x2.row_len(), d, "kernel_eval: x2 width differs from the lengthscales");
    let inv: Vec<f64> = cfg.lengthscales.iter().map(|l| 1.0 / l).collect();
    let (n, m) = (x.n_rows(), x2.n_rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let a = x.row(i);
        for j in 0..m {
            let d2: f64 = a
                .iter()
                .zip(x2.row(j))
                .zip(&inv)
                .map(|((p, q), s)| {
                    let t = (p - q) * s;
                    t * t
                })
                .sum();
            out.push(cfg.signal_variance * cfg.family.correlation(d2));
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Zero-mean exact posterior at `query`, observation noise included in σ.
pub fn gp_posterior(
    cfg: &KernelConfig,
    x: &Tensor,
    y: &[f64],
    query: &Tensor,
) -> Result<Vec<GaussianPrediction>, GpError> {
    let zeros = vec![0.0; query.n_rows()];
    posterior_with_mean(cfg, x, y, query, &zeros)
}

/// Posterior of a GP whose prior mean is already subtracted from
/// `residuals`; `query_mean` is added back to every predicted mean.
pub(crate) fn posterior_with_mean(
    cfg: &KernelConfig,
    x: &Tensor,
    residuals: &[f64],
    query: &Tensor,
    query_mean: &[f64],
) -> Result<Vec<GaussianPrediction>, GpError> {
    cfg.validate()?;
    let n = x.n_rows();
    if n == 0 || residuals.len() != n {
        return Err(GpError::TooFewPoints { needed: 1, got: residuals.len().min(n) });
    }
    let mut k = kernel_eval(cfg, x, x).into_data();
    for i in 0..n {
        k[i * n + i] += cfg.noise_variance;
    }
    let (chol, _) = linalg::cholesky_with_jitter(&k, n, cfg.jitter, 3)
        .map_err(|jitter| NumericsError::NotPositiveDefinite { jitter })?;
    let alpha = linalg::cholesky_solve(&chol, n, residuals);
    let cross = kernel_eval(cfg, query, x);
    let mut v = vec![0.0; n];
    let out = (0..query.n_rows())
        .map(|q| {
            let ks = cross.row(q);
            let mu = query_mean[q] + ks.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>();
            v.copy_from_slice(ks);
            linalg::solve_lower(&chol, n, &mut v);
            let explained: f64 = v.iter().map(|t| t * t).sum();
            let var = (cfg.signal_variance - explained).max(0.0) + cfg.noise_variance;
            GaussianPrediction { mu, sigma: var.sqrt() }
        })
        .collect::<Vec<_>>();
    if out.iter().any(|p| !p.mu.is_finite() || !p.sigma.is_finite()) {
        return Err(NumericsError::NonFinite("gp posterior").into());
    }
    Ok(out)
}

/// Log-hyperparameters of a kernel living on a tape.
#[derive(Clone, Copy)]
pub(crate) struct KernelVars {
    pub log_lengthscales: Var,
    pub log_signal: Var,
    pub log_noise: Var,
}

/// Noisy Gram matrix `k(X, X) + σ_n² I` built on the tape.
pub(crate) fn gram_var(tape: &mut Tape, family: KernelFamily, x: Var, h: KernelVars) -> Var {
    let neg = tape.scale(h.log_lengthscales, -1.0);
    let inv = tape.exp(neg);
    let xs = tape.mul_row(x, inv);
    let d2 = tape.sq_dist(xs, xs);
    let corr = match family {
        KernelFamily::Rbf => {
            let e = tape.scale(d2, -0.5);
            tape.exp(e)
        }
        KernelFamily::Matern52 => tape.matern52(d2),
    };
    let sf = tape.exp(h.log_signal);
    let k = tape.mul_scalar(corr, sf);
    let sn = tape.exp(h.log_noise);
    tape.add_diag(k, sn)
}

/// Exact log marginal likelihood of `y` under a zero-mean GP.
pub fn log_marginal_likelihood(cfg: &KernelConfig, x: &Tensor, y: &[f64]) -> Result<f64, GpError> {
    Ok(lml_gradient(cfg.family, &cfg.log_hypers(), x, y, cfg.jitter)?.0)
}

/// Log marginal likelihood and its gradient with respect to the
/// log-hyperparameters laid out as in [`KernelConfig::log_hypers`].
pub fn lml_gradient(
    family: KernelFamily,
    log_hypers: &[f64],
    x: &Tensor,
    y: &[f64],
    jitter: f64,
) -> Result<(f64, Vec<f64>), GpError> {
    let d = x.row_len();
    if log_hypers.len() != d + 2 {
        return Err(GpError::Config(format!("expected {} log-hyperparameters, got {}", d + 2, log_hypers.len())));
    }
    let mut tape = Tape::new();
    let h = KernelVars {
        log_lengthscales: tape.variable(Tensor::vector(log_hypers[..d].to_vec())),
        log_signal: tape.variable(Tensor::vector(vec![log_hypers[d]])),
        log_noise: tape.variable(Tensor::vector(vec![log_hypers[d + 1]])),
    };
    let xv = tape.constant(x.clone());
    let yv = tape.constant(Tensor::vector(y.to_vec()));
    let k = gram_var(&mut tape, family, xv, h);
    let nll = tape.gp_nll(k, yv, jitter)?;
    let value = -tape.value(nll).item();
    let grads = tape.backward(nll)?;
    let mut g = Vec::with_capacity(d + 2);
    for var in [h.log_lengthscales, h.log_signal, h.log_noise] {
        g.extend(grads.wrt(var).expect("variable gradient").data().iter().map(|v| -v));
    }
    Ok((value, g))
}
