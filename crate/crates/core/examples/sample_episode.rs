//! Draws context/target episodes with uniform and reward-balanced sampling.

use auxbo::tasks::{generate_benchmark, high_threshold, sample_context_target, BenchmarkConfig, SamplerConfig, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bench = generate_benchmark(&BenchmarkConfig { seed: 3, n_train: 1, n_val: 1, n_test: 1, pool_size: 256 }, 1)?;
    let task = &bench.split(Split::Train)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for balanced in [false, true] {
        let cfg = SamplerConfig { balanced, balanced_context: balanced, ..SamplerConfig::default() };
        let cut = high_threshold(task, cfg.high_quantile);
        let ep = sample_context_target(task, &cfg, &mut rng)?;
        let high = |idx: &[usize]| idx.iter().filter(|&&i| task.records[i].f >= cut).count();
        println!(
            "balanced={balanced}: {} context ({} high), {} targets ({} high), high stratum f >= {cut:.1}",
            ep.context.len(),
            high(&ep.context),
            ep.targets.len(),
            high(&ep.targets)
        );
    }
    Ok(())
}
