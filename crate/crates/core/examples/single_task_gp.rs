//! Fits a single-task GP to a handful of evaluations of one task, choosing
//! hyperparameters by maximizing the regularized marginal likelihood.

use auxbo::gp::{fit_stgp, KernelFamily, StgpConfig};
use auxbo::numerics::Tensor;
use auxbo::tasks::{generate_benchmark, BenchmarkConfig, Split};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bench = generate_benchmark(&BenchmarkConfig { seed: 5, n_train: 1, n_val: 1, n_test: 1, pool_size: 64 }, 1)?;
    let task = &bench.split(Split::Test)[0];
    let (seen, unseen) = task.records.split_at(20);
    let x = Tensor::from_rows(&seen.iter().map(|r| r.x.clone()).collect::<Vec<_>>());
    let y: Vec<f64> = seen.iter().map(|r| r.f).collect();
    let query = Tensor::from_rows(&unseen[..8].iter().map(|r| r.x.clone()).collect::<Vec<_>>());

    for family in KernelFamily::ALL {
        let gp = fit_stgp(&x, &y, &StgpConfig { family, seed: 0, ..Default::default() })?;
        let k = &gp.kernel;
        println!(
            "{}: lengthscales {:?}, signal {:.3}, noise {:.4}, objective {:.3}",
            family.name(),
            k.lengthscales.iter().map(|l| (l * 100.0).round() / 100.0).collect::<Vec<_>>(),
            k.signal_variance,
            k.noise_variance,
            gp.objective
        );
        for (p, r) in gp.predict(&query)?.iter().zip(unseen) {
            println!("  true {:.1}  predicted {:.2} ± {:.2}", r.f, p.mu, p.sigma);
        }
    }
    Ok(())
}
