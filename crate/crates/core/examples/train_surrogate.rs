//! Trains a small transformer surrogate for a few epochs and queries it.
//!
//! Pass `reward_only` to train the variant that ignores the feedback
//! sequences.

use auxbo::engine::{evaluate_prediction, train, EvalConfig, TrainConfig};
use auxbo::model::{ContextSet, Model, ModelConfig, Normalizer, Variant};
use auxbo::tasks::{generate_benchmark, BenchmarkConfig, SamplerConfig, Split};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let variant = match std::env::args().nth(1).as_deref() {
        Some("reward_only") => Variant::RewardOnly,
        _ => Variant::Aux,
    };
    let bench = generate_benchmark(&BenchmarkConfig { seed: 1, n_train: 24, n_val: 4, n_test: 4, pool_size: 96 }, 1)?;
    let (tr, va, te) = (bench.split(Split::Train), bench.split(Split::Val), bench.split(Split::Test));

    let mc = ModelConfig { variant, model_dim: 32, predictor_layers: 2, sequence_encoder_layers: 1, ff_dim: 64, ..Default::default() };
    let model = Model::new(mc, Normalizer::fit(tr), 0)?;
    let sampler = SamplerConfig { target_size: 40, ..SamplerConfig::default() };
    let tc = TrainConfig { max_epochs: 8, learning_rate: 1e-3, seed: 0, ..Default::default() };
    let trained = train(model, tr, va, &sampler, &tc, |r| {
        println!("epoch {:2}  train {:.3}  val {:.3}{}", r.epoch, r.train_nll, r.val_nll, if r.best { " *" } else { "" });
    })?;
    let model = trained.model;

    let task = &te[0];
    let ctx = ContextSet::from_task(task, &[0, 1, 2, 3, 4]);
    let queries: Vec<&[f64]> = task.records[5..10].iter().map(|r| r.x.as_slice()).collect();
    let norm = model.normalizer();
    for (p, r) in model.predict(&ctx, &queries)?.iter().zip(&task.records[5..10]) {
        println!("true f {:.1}  predicted {:.2} ± {:.2}", r.f, norm.reward_back(p.mu), p.sigma * norm.f_std);
    }

    let ec = EvalConfig { sizes: vec![5, 20], repeats: 2, sampler, ..Default::default() };
    for row in evaluate_prediction(&model, te, &ec)?.rows {
        println!("context {:2}: summed MSE {:.3}, NLL {:.3}", row.context_size, row.mse_sum, row.nll_mean);
    }
    Ok(())
}
