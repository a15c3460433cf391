//! Training, prediction evaluation and the Bayesian-optimization loop.

mod bayesopt;
mod eval;
mod train;

pub use bayesopt::{
    acquisition_score, aggregate_runs, bayesopt_run, run_protocol, Acquisition, Aggregate, AggregateRow,
    OptimizationTrace, ProtocolConfig, TraceRow,
};
pub use eval::{evaluate_prediction, EvalConfig, PredictionReport, PredictionRow};
pub(crate) use train::EarlyStopping;
pub use train::{train, EpochLog, TrainConfig, TrainError, Trained};

use thiserror::Error;

use crate::gp::{fit_stgp, DeepKernelGp, GpError, StgpConfig};
use crate::model::{ContextPoint, ContextSet, GaussianPrediction, Model, ModelError, Normalizer};
use crate::numerics::Tensor;
use crate::tasks::{TaskDataset, TaskError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid protocol: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

impl EngineError {
    /// Whether the failure is numeric rather than a usage problem.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            EngineError::Model(ModelError::Numerics(_))
                | EngineError::Gp(GpError::Numerics(_) | GpError::AllRestartsFailed(_) | GpError::Step { .. })
        )
    }
}

/// Anything that turns observed designs of a task into predictions, in
/// standardized reward units, for other designs of that task.
pub trait Surrogate: Sync {
    fn name(&self) -> &str;

    /// Statistics defining the standardized reward units.
    fn normalizer(&self) -> &Normalizer;

    /// Predictions for `query` given `context` records of `task`. `seed`
    /// only matters for surrogates with a randomized fit.
    fn predict(
        &self,
        task: &TaskDataset,
        context: &[usize],
        query: &[usize],
        seed: u64,
    ) -> Result<Vec<GaussianPrediction>, EngineError>;

    /// Like [`Surrogate::predict`] for a context that only ever grows
    /// between calls; `cache` may hold per-context state across calls.
    fn predict_growing(
        &self,
        task: &TaskDataset,
        context: &[usize],
        query: &[usize],
        seed: u64,
        cache: &mut Option<Tensor>,
    ) -> Result<Vec<GaussianPrediction>, EngineError> {
        let _ = cache;
        self.predict(task, context, query, seed)
    }
}

fn designs<'t>(task: &'t TaskDataset, idx: &[usize]) -> Vec<&'t [f64]> {
    idx.iter().map(|&i| task.records[i].x.as_slice()).collect()
}

impl Surrogate for Model {
    fn name(&self) -> &str {
        self.config().variant.name()
    }

    fn normalizer(&self) -> &Normalizer {
        Model::normalizer(self)
    }

    fn predict(
        &self,
        task: &TaskDataset,
        context: &[usize],
        query: &[usize],
        _seed: u64,
    ) -> Result<Vec<GaussianPrediction>, EngineError> {
        Ok(Model::predict(self, &ContextSet::from_task(task, context), &designs(task, query))?)
    }

    /// Context embeddings depend on each point alone, so only new context
    /// points are encoded.
    fn predict_growing(
        &self,
        task: &TaskDataset,
        context: &[usize],
        query: &[usize],
        _seed: u64,
        cache: &mut Option<Tensor>,
    ) -> Result<Vec<GaussianPrediction>, EngineError> {
        let have = cache.as_ref().map_or(0, Tensor::n_rows);
        if have > context.len() {
            return Err(EngineError::Config("context shrank between calls".into()));
        }
        if have < context.len() {
            let pts: Vec<ContextPoint> = context[have..].iter().map(|&i| ContextPoint::from(&task.records[i])).collect();
            let fresh = self.encode_context(&pts)?;
            let mut data = cache.take().map_or_else(Vec::new, Tensor::into_data);
            data.extend_from_slice(fresh.data());
            *cache = Some(Tensor::new(vec![context.len(), self.config().model_dim], data));
        }
        let emb = cache.as_ref().ok_or(ModelError::EmptyContext)?;
        Ok(self.predict_from_embeddings(emb, &designs(task, query))?)
    }
}

impl Surrogate for DeepKernelGp {
    fn name(&self) -> &str {
        "dgp"
    }

    fn normalizer(&self) -> &Normalizer {
        DeepKernelGp::normalizer(self)
    }

    fn predict(
        &self,
        task: &TaskDataset,
        context: &[usize],
        query: &[usize],
        _seed: u64,
    ) -> Result<Vec<GaussianPrediction>, EngineError> {
        let cf: Vec<f64> = context.iter().map(|&i| task.records[i].f).collect();
        Ok(DeepKernelGp::predict(self, &designs(task, context), &cf, &designs(task, query))?)
    }
}

/// Single-task GP refit from scratch on every call; the normalizer only
/// converts its predictions to standardized units.
#[derive(Clone, Debug)]
pub struct StgpSurrogate {
    pub config: StgpConfig,
    pub normalizer: Normalizer,
}

impl Surrogate for StgpSurrogate {
    fn name(&self) -> &str {
        "stgp"
    }

    fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    fn predict(
        &self,
        task: &TaskDataset,
        context: &[usize],
        query: &[usize],
        seed: u64,
    ) -> Result<Vec<GaussianPrediction>, EngineError> {
        let rows = |idx: &[usize]| Tensor::from_rows(&idx.iter().map(|&i| task.records[i].x.clone()).collect::<Vec<_>>());
        let y: Vec<f64> = context.iter().map(|&i| task.records[i].f).collect();
        let cfg = StgpConfig { seed, ..self.config.clone() };
        let fit = fit_stgp(&rows(context), &y, &cfg)?;
        Ok(fit
            .predict(&rows(query))?
            .into_iter()
            .map(|p| GaussianPrediction {
                mu: self.normalizer.reward(p.mu),
                sigma: p.sigma / self.normalizer.f_std,
            })
            .collect())
    }
}
