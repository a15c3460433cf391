//! Trains the deep-kernel GP baseline across a training split: an MLP
//! feature map and linear mean shared by all tasks, conditioned on each
//! task's context at prediction time.

use auxbo::engine::TrainConfig;
use auxbo::gp::{train_dgp, DgpConfig, KernelFamily};
use auxbo::tasks::{generate_benchmark, BenchmarkConfig, Split, TrialRecord};

fn xs(r: &[TrialRecord]) -> Vec<&[f64]> {
    r.iter().map(|t| t.x.as_slice()).collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bench = generate_benchmark(&BenchmarkConfig { seed: 2, n_train: 24, n_val: 6, n_test: 2, pool_size: 96 }, 1)?;
    let cfg = DgpConfig { family: KernelFamily::Matern52, embedding_dim: 8, hidden_dim: 32, sample_size: 30, ..Default::default() };
    let tc = TrainConfig { max_epochs: 10, learning_rate: 3e-3, batch_tasks: 4, seed: 0, ..Default::default() };
    let run = train_dgp(bench.split(Split::Train), bench.split(Split::Val), &cfg, &tc, |r| {
        println!("epoch {:2}  train {:.3}  val {:.3}", r.epoch, r.train_nll, r.val_nll);
    })?;
    println!("validation NLL at initialization {:.3}", run.initial_val_nll);

    let task = &bench.split(Split::Test)[0];
    let ctx = &task.records[..10];
    let f: Vec<f64> = ctx.iter().map(|r| r.f).collect();
    let preds = run.model.predict(&xs(ctx), &f, &xs(&task.records[10..16]))?;
    let norm = run.model.normalizer();
    for (p, r) in preds.iter().zip(&task.records[10..16]) {
        println!("true {:.1}  predicted {:.2} ± {:.2}", r.f, norm.reward_back(p.mu), p.sigma * norm.f_std);
    }
    Ok(())
}
