//! Pool-based Bayesian optimization on a few test tasks with the
//! single-task GP, comparing probability of improvement with greedy
//! selection.

use auxbo::engine::{aggregate_runs, run_protocol, Acquisition, ProtocolConfig, StgpSurrogate};
use auxbo::gp::StgpConfig;
use auxbo::model::Normalizer;
use auxbo::tasks::{generate_benchmark, BenchmarkConfig, Split};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bench = generate_benchmark(&BenchmarkConfig { seed: 4, n_train: 10, n_val: 1, n_test: 4, pool_size: 128 }, 1)?;
    let stgp = StgpSurrogate {
        config: StgpConfig { restarts: 2, iterations: 30, ..Default::default() },
        normalizer: Normalizer::fit(bench.split(Split::Train)),
    };
    let mut traces = Vec::new();
    for acquisition in [Acquisition::Pi, Acquisition::Greedy] {
        let cfg = ProtocolConfig { init: 5, trials: 15, runs: 2, acquisition };
        let mut t = run_protocol(&stgp, bench.split(Split::Test), &cfg, 0, 1)?;
        for tr in &mut t {
            tr.surrogate = format!("stgp+{}", acquisition.name());
        }
        traces.extend(t);
    }
    for tr in traces.iter().filter(|t| t.run == 0) {
        println!("{} {}: final regret {:.1} (max_f {:.1})", tr.surrogate, tr.task_id, tr.final_regret(), tr.max_f);
    }
    let agg = aggregate_runs(&traces, &[0.5])?;
    println!("trial  surrogate   norm_best  regret  solved");
    for r in agg.rows.iter().filter(|r| r.trial % 5 == 0) {
        println!("{:5}  {:10}  {:9.3}  {:6.2}  {:6.2}", r.trial, r.surrogate, r.mean_norm_best, r.mean_regret, r.frac_solved[0]);
    }
    Ok(())
}
