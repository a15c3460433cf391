//! Transformer neural-process surrogate.
//!
//! Each context point `(x, f, h)` is embedded on its own: the auxiliary
//! sequence `h` runs through a small transformer with sinusoidal time
//! encodings, preceded by a CLS token and an `(x, f)` token, and the final
//! CLS state is added to an MLP embedding of `(x, f)`. A predictor
//! transformer without positional encodings then lets every token attend to
//! the context tokens only, and a two-layer head turns each target token
//! into a Gaussian over its reward.
//!
//! Rewards and auxiliary channels are standardized with a [`Normalizer`]
//! fitted on the training split; predictions and losses are reported in
//! those standardized reward units.

mod checkpoint;
pub(crate) mod layers;
mod normalize;

pub use checkpoint::{Checkpoint, CheckpointError, ModelKind, MAGIC, VERSION};
pub use normalize::Normalizer;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{sinusoidal_table, NumericsError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::tasks::{AuxSequence, TaskDataset, TrialRecord};
use layers::{Block, Fwd, LayerNorm, Linear, Mlp, Segments};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Aux,
    RewardOnly,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Aux => "aux",
            Variant::RewardOnly => "reward_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub aux_channels: usize,
    pub model_dim: usize,
    pub predictor_layers: usize,
    pub sequence_encoder_layers: usize,
    pub heads: usize,
    /// Hidden width of every transformer feed-forward block.
    pub ff_dim: usize,
    pub dropout_rate: f64,
    pub sigma_floor: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 4,
            aux_channels: 4,
            model_dim: 64,
            predictor_layers: 4,
            sequence_encoder_layers: 2,
            heads: 4,
            ff_dim: 128,
            dropout_rate: 0.1,
            sigma_floor: 1e-3,
            variant: Variant::Aux,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.input_dim == 0 || self.aux_channels == 0 {
            return bad("input_dim and aux_channels must be positive".into());
        }
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.ff_dim == 0 || self.predictor_layers == 0 {
            return bad("ff_dim and predictor_layers must be positive".into());
        }
        if self.variant == Variant::Aux && self.sequence_encoder_layers == 0 {
            return bad("the aux variant needs at least one sequence-encoder layer".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} is outside [0, 1)", self.dropout_rate));
        }
        if !(self.sigma_floor > 0.0) {
            return bad(format!("sigma_floor {} must be positive", self.sigma_floor));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("context set is empty")]
    EmptyContext,
    #[error("no target designs given")]
    EmptyTargets,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Predicted normal distribution of one reward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPrediction {
    pub mu: f64,
    pub sigma: f64,
}

/// One observed context point, borrowed from a [`TrialRecord`].
#[derive(Clone, Copy, Debug)]
pub struct ContextPoint<'a> {
    pub x: &'a [f64],
    pub f: f64,
    pub h: &'a AuxSequence,
}

impl<'a> From<&'a TrialRecord> for ContextPoint<'a> {
    fn from(r: &'a TrialRecord) -> Self {
        ContextPoint { x: &r.x, f: r.f, h: &r.h }
    }
}

/// Ordered context set `C`.
#[derive(Clone, Debug, Default)]
pub struct ContextSet<'a> {
    points: Vec<ContextPoint<'a>>,
}

impl<'a> ContextSet<'a> {
    pub fn new(points: Vec<ContextPoint<'a>>) -> Self {
        ContextSet { points }
    }

    pub fn from_task(task: &'a TaskDataset, indices: &[usize]) -> Self {
        Self::new(indices.iter().map(|&i| (&task.records[i]).into()).collect())
    }

    pub fn push(&mut self, p: ContextPoint<'a>) {
        self.points.push(p);
    }

    pub fn points(&self) -> &[ContextPoint<'a>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One training episode: a context set and labelled targets.
#[derive(Clone, Debug)]
pub struct TrainItem<'a> {
    pub context: ContextSet<'a>,
    pub targets: Vec<(&'a [f64], f64)>,
}

impl<'a> TrainItem<'a> {
    pub fn from_task(task: &'a TaskDataset, context: &[usize], targets: &[usize]) -> Self {
        TrainItem {
            context: ContextSet::from_task(task, context),
            targets: targets.iter().map(|&i| (task.records[i].x.as_slice(), task.records[i].f)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct SequenceEncoder {
    step_in: Linear,
    xf_token: Linear,
    cls: ParamId,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct Net {
    sequence: Option<SequenceEncoder>,
    xf_embed: Mlp,
    target_embed: Mlp,
    blocks: Vec<Block>,
    head_norm: LayerNorm,
    head: Mlp,
}

impl Net {
    fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        let sequence = (cfg.variant == Variant::Aux).then(|| {
            let cls_data = (0..d).map(|_| rng.random_range(-0.02..0.02)).collect();
            SequenceEncoder {
                step_in: Linear::new(store, "seq.step_in", cfg.aux_channels, d, rng),
                xf_token: Linear::new(store, "seq.xf_token", cfg.input_dim + 1, d, rng),
                cls: store.add("seq.cls", Tensor::new(vec![1, d], cls_data)),
                blocks: (0..cfg.sequence_encoder_layers)
                    .map(|l| Block::new(store, &format!("seq.block{l}"), d, cfg.ff_dim, cfg.heads, rng))
                    .collect(),
                out_norm: LayerNorm::new(store, "seq.out_norm", d),
            }
        });
        Net {
            sequence,
            xf_embed: Mlp::new(store, "ctx.xf_embed", [cfg.input_dim + 1, d, d], rng),
            target_embed: Mlp::new(store, "tgt.embed", [cfg.input_dim, d, d], rng),
            blocks: (0..cfg.predictor_layers)
                .map(|l| Block::new(store, &format!("pred.block{l}"), d, cfg.ff_dim, cfg.heads, rng))
                .collect(),
            head_norm: LayerNorm::new(store, "head.norm", d),
            head: Mlp::new(store, "head.mlp", [d, d, 2], rng),
        }
    }
}

/// The few-shot surrogate.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    normalizer: Normalizer,
    params: ParamStore,
    net: Net,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    normalizer: Normalizer,
}

impl Model {
    pub fn new(config: ModelConfig, normalizer: Normalizer, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if normalizer.channels() != config.aux_channels {
            return Err(ModelError::Config(format!(
                "normalizer has {} channels, config says {}",
                normalizer.channels(),
                config.aux_channels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = Net::build(&config, &mut params, &mut rng);
        Ok(Model {
            config,
            normalizer,
            params,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_context(&self, points: &[ContextPoint]) -> Result<(), ModelError> {
        if points.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        for p in points {
            if p.x.len() != self.config.input_dim {
                return Err(ModelError::Shape(format!(
                    "context design has {} coordinates, model expects {}",
                    p.x.len(),
                    self.config.input_dim
                )));
            }
            if p.h.channels() != self.config.aux_channels {
                return Err(ModelError::Shape(format!(
                    "context h has {} channels, model expects {}",
                    p.h.channels(),
                    self.config.aux_channels
                )));
            }
        }
        Ok(())
    }

    fn check_targets<'t>(&self, targets: impl IntoIterator<Item = &'t [f64]>) -> Result<usize, ModelError> {
        let mut n = 0;
        for x in targets {
            n += 1;
            if x.len() != self.config.input_dim {
                return Err(ModelError::Shape(format!(
                    "target design has {} coordinates, model expects {}",
                    x.len(),
                    self.config.input_dim
                )));
            }
        }
        if n == 0 {
            return Err(ModelError::EmptyTargets);
        }
        Ok(n)
    }

    /// `[n, model_dim]` context embeddings.
    fn context_var(&self, f: &mut Fwd, tape: &mut Tape, points: &[ContextPoint]) -> Result<Var, ModelError> {
        let n = points.len();
        let din = self.config.input_dim;
        let mut xf = Vec::with_capacity(n * (din + 1));
        for p in points {
            xf.extend_from_slice(p.x);
            xf.push(self.normalizer.reward(p.f));
        }
        let xf = tape.constant(Tensor::new(vec![n, din + 1], xf));
        let e_xf = self.net.xf_embed.forward(f, tape, xf);
        let Some(enc) = &self.net.sequence else {
            return Ok(e_xf);
        };

        let c = self.config.aux_channels;
        let d = self.config.model_dim;
        let mut steps = Vec::new();
        let mut lens = Vec::with_capacity(n);
        for p in points {
            lens.push(self.normalizer.push_steps(p.h, &mut steps));
        }
        let total: usize = lens.iter().sum();
        let longest = lens.iter().copied().max().unwrap_or(1);
        let table = sinusoidal_table(longest, d);
        let mut pe = Vec::with_capacity(total * d);
        for &l in &lens {
            pe.extend_from_slice(&table.data()[..l * d]);
        }
        let steps = tape.constant(Tensor::new(vec![total, c], steps));
        let pe = tape.constant(Tensor::new(vec![total, d], pe));
        let step_emb = enc.step_in.forward(f, tape, steps);
        let step_emb = tape.add(step_emb, pe);
        let xf_tok = enc.xf_token.forward(f, tape, xf);
        let cls = f.param(tape, enc.cls);

        let mut index = Vec::with_capacity(total + 2 * n);
        let mut offset = 0;
        for (i, &l) in lens.iter().enumerate() {
            index.push((0, 0));
            index.push((1, i));
            index.extend((0..l).map(|t| (2, offset + t)));
            offset += l;
        }
        let mut x = tape.gather_rows(&[cls, xf_tok, step_emb], &index);
        let seg_lens: Vec<usize> = lens.iter().map(|l| l + 2).collect();
        let segs = Segments::new(seg_lens.clone(), seg_lens);
        for block in &enc.blocks {
            x = block.forward(f, tape, x, &segs)?;
        }
        let cls_rows: Vec<(usize, usize)> = (0..n).map(|i| (0, segs.start(i))).collect();
        let e_seq = tape.gather_rows(&[x], &cls_rows);
        let e_seq = enc.out_norm.forward(f, tape, e_seq);
        Ok(tape.add(e_seq, e_xf))
    }

    /// Runs the predictor for several independent problems at once. Group
    /// `b` owns context rows `ctx_offsets[b]..ctx_offsets[b] + ctx_counts[b]`
    /// of `ctx` and the targets in `targets[b]`. Returns `(μ, σ)` vectors over
    /// all targets in group order.
    fn predict_var(
        &self,
        f: &mut Fwd,
        tape: &mut Tape,
        ctx: Var,
        ctx_counts: &[usize],
        targets: &[Vec<&[f64]>],
    ) -> Result<(Var, Var), ModelError> {
        let din = self.config.input_dim;
        let m_total: usize = targets.iter().map(Vec::len).sum();
        let mut tx = Vec::with_capacity(m_total * din);
        for x in targets.iter().flatten() {
            tx.extend_from_slice(x);
        }
        let tx = tape.constant(Tensor::new(vec![m_total, din], tx));
        let t_emb = self.net.target_embed.forward(f, tape, tx);

        let mut index = Vec::new();
        let mut lens = Vec::with_capacity(targets.len());
        let (mut c_off, mut t_off) = (0, 0);
        for (b, tg) in targets.iter().enumerate() {
            let n = ctx_counts[b];
            index.extend((0..n).map(|i| (0, c_off + i)));
            index.extend((0..tg.len()).map(|j| (1, t_off + j)));
            lens.push(n + tg.len());
            c_off += n;
            t_off += tg.len();
        }
        let mut x = tape.gather_rows(&[ctx, t_emb], &index);
        let segs = Segments::new(lens, ctx_counts.to_vec());
        for block in &self.net.blocks {
            x = block.forward(f, tape, x, &segs)?;
        }
        let mut rows = Vec::with_capacity(m_total);
        for (b, tg) in targets.iter().enumerate() {
            let base = segs.start(b) + ctx_counts[b];
            rows.extend((0..tg.len()).map(|j| (0, base + j)));
        }
        let h = tape.gather_rows(&[x], &rows);
        let h = self.net.head_norm.forward(f, tape, h);
        let out = self.net.head.forward(f, tape, h);
        let mu = tape.select_column(out, 0);
        let raw = tape.select_column(out, 1);
        let sp = tape.softplus(raw);
        let sigma = tape.add_scalar(sp, self.config.sigma_floor);
        Ok((mu, sigma))
    }

    /// Context embeddings `[n, model_dim]`, one row per point, each
    /// independent of the others.
    pub fn encode_context(&self, points: &[ContextPoint]) -> Result<Tensor, ModelError> {
        self.check_context(points)?;
        let mut tape = Tape::inference();
        let mut f = Fwd::new(&self.params, None);
        let v = self.context_var(&mut f, &mut tape, points)?;
        Ok(tape.value(v).clone())
    }

    /// Predictions from precomputed context embeddings (rows of
    /// [`Model::encode_context`]).
    pub fn predict_from_embeddings(
        &self,
        embeddings: &Tensor,
        targets: &[&[f64]],
    ) -> Result<Vec<GaussianPrediction>, ModelError> {
        let n = embeddings.n_rows();
        if n == 0 {
            return Err(ModelError::EmptyContext);
        }
        if embeddings.row_len() != self.config.model_dim {
            return Err(ModelError::Shape("embedding width differs from model_dim".into()));
        }
        self.check_targets(targets.iter().copied())?;
        let mut tape = Tape::inference();
        let mut f = Fwd::new(&self.params, None);
        let ctx = tape.constant(embeddings.clone());
        let (mu, sigma) = self.predict_var(&mut f, &mut tape, ctx, &[n], &[targets.to_vec()])?;
        Ok(collect_predictions(&tape, mu, sigma))
    }

    /// Gaussian predictions, in standardized reward units, for each target.
    pub fn predict(&self, context: &ContextSet, targets: &[&[f64]]) -> Result<Vec<GaussianPrediction>, ModelError> {
        self.check_context(context.points())?;
        self.check_targets(targets.iter().copied())?;
        let mut tape = Tape::inference();
        let mut f = Fwd::new(&self.params, None);
        let ctx = self.context_var(&mut f, &mut tape, context.points())?;
        let (mu, sigma) = self.predict_var(&mut f, &mut tape, ctx, &[context.len()], &[targets.to_vec()])?;
        Ok(collect_predictions(&tape, mu, sigma))
    }

    /// `Σ_k NLL(f̃_k | μ̂_k, σ̂_k)` over the targets, with raw rewards
    /// standardized first.
    pub fn nll_loss(&self, context: &ContextSet, targets: &[(&[f64], f64)]) -> Result<f64, ModelError> {
        let xs: Vec<&[f64]> = targets.iter().map(|t| t.0).collect();
        let preds = self.predict(context, &xs)?;
        let mut total = 0.0;
        for (p, &(_, y)) in preds.iter().zip(targets) {
            total += crate::numerics::gaussian_nll(self.normalizer.reward(y), p.mu, p.sigma)?;
        }
        Ok(total)
    }

    /// Records the mean over `batch` of each episode's summed target NLL on
    /// `tape`. Dropout is active when `dropout = Some((rate, seed))`.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        batch: &[TrainItem],
        dropout: Option<(f64, u64)>,
    ) -> Result<Var, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        let mut points = Vec::new();
        let mut counts = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut ys = Vec::new();
        for item in batch {
            self.check_context(item.context.points())?;
            self.check_targets(item.targets.iter().map(|t| t.0))?;
            points.extend_from_slice(item.context.points());
            counts.push(item.context.len());
            targets.push(item.targets.iter().map(|t| t.0).collect::<Vec<_>>());
            ys.extend(item.targets.iter().map(|t| self.normalizer.reward(t.1)));
        }
        let mut f = Fwd::new(&self.params, dropout);
        let ctx = self.context_var(&mut f, tape, &points)?;
        let (mu, sigma) = self.predict_var(&mut f, tape, ctx, &counts, &targets)?;
        let total = tape.gaussian_nll(&ys, mu, sigma)?;
        Ok(tape.scale(total, 1.0 / batch.len() as f64))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let header = Header {
            config: self.config.clone(),
            normalizer: self.normalizer.clone(),
        };
        Checkpoint {
            kind: ModelKind::Transformer,
            header: serde_json::to_value(header).expect("header serializes"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        if ck.kind != ModelKind::Transformer {
            return Err(CheckpointError::KindMismatch {
                expected: ModelKind::Transformer.name(),
                found: ck.kind.name(),
            }
            .into());
        }
        let header: Header = serde_json::from_value(ck.header.clone())
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let mut model = Model::new(header.config, header.normalizer, 0)?;
        ck.restore_into(&mut model.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Loads a model and checks that it is the requested variant.
    pub fn load_expecting(path: &Path, variant: Variant) -> Result<Self, ModelError> {
        let model = Self::load(path)?;
        if model.config.variant != variant {
            return Err(CheckpointError::ConfigConflict(format!(
                "file holds the {} variant but {} was requested",
                model.config.variant.name(),
                variant.name()
            ))
            .into());
        }
        Ok(model)
    }
}

fn collect_predictions(tape: &Tape, mu: Var, sigma: Var) -> Vec<GaussianPrediction> {
    tape.value(mu)
        .data()
        .iter()
        .zip(tape.value(sigma).data())
        .map(|(&mu, &sigma)| GaussianPrediction { mu, sigma })
        .collect()
}
