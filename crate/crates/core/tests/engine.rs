mod common;

use auxbo::engine::{
    acquisition_score, aggregate_runs, bayesopt_run, evaluate_prediction, run_protocol, train, Acquisition,
    EngineError, EvalConfig, OptimizationTrace, ProtocolConfig, StgpSurrogate, Surrogate, TraceRow, TrainConfig,
};
use auxbo::gp::StgpConfig;
use auxbo::model::{GaussianPrediction, Model, ModelConfig, Normalizer, TrainItem};
use auxbo::tasks::{generate_benchmark, sample_context_target, AuxSequence, BenchmarkConfig, SamplerConfig, Split, TaskDataset, TrialRecord};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Predicts the true standardized reward with unit spread.
struct Truth(Normalizer);

impl Surrogate for Truth {
    fn name(&self) -> &str {
        "truth"
    }
    fn normalizer(&self) -> &Normalizer {
        &self.0
    }
    fn predict(&self, task: &TaskDataset, _: &[usize], query: &[usize], _: u64) -> Result<Vec<GaussianPrediction>, EngineError> {
        Ok(query.iter().map(|&i| GaussianPrediction { mu: self.0.reward(task.records[i].f), sigma: 1.0 }).collect())
    }
}

/// Same prediction everywhere.
struct Flat(Normalizer);

impl Surrogate for Flat {
    fn name(&self) -> &str {
        "flat"
    }
    fn normalizer(&self) -> &Normalizer {
        &self.0
    }
    fn predict(&self, _: &TaskDataset, _: &[usize], query: &[usize], _: u64) -> Result<Vec<GaussianPrediction>, EngineError> {
        Ok(vec![GaussianPrediction { mu: 0.3, sigma: 0.7 }; query.len()])
    }
}

fn bench(seed: u64, n_train: usize, pool: usize) -> auxbo::tasks::Benchmark {
    generate_benchmark(&BenchmarkConfig { seed, n_train, n_val: 2, n_test: 4, pool_size: pool }, 1).unwrap()
}

fn flat_task(f: &[f64]) -> TaskDataset {
    let records = f
        .iter()
        .enumerate()
        .map(|(i, &f)| TrialRecord { x: vec![i as f64 / 100.0, 0.0, 0.0, 0.0], f, h: AuxSequence::empty(4) })
        .collect();
    TaskDataset::new("hand".into(), Split::Test, None, records)
}

#[test]
fn acquisition_reference_values() {
    let p = GaussianPrediction { mu: 1.3, sigma: 0.4 };
    assert!((acquisition_score(Acquisition::Pi, &p, 1.3) - 0.5).abs() <= 1e-15);
    assert!((acquisition_score(Acquisition::Pi, &p, 0.9) - 0.841_344_746_068_542_9).abs() <= 1e-12);
    assert_eq!(acquisition_score(Acquisition::Pi, &p, f64::NEG_INFINITY), 1.0);
    assert_eq!(acquisition_score(Acquisition::Greedy, &p, 99.0), 1.3);
}

proptest! {
    #[test]
    fn pi_is_monotone(mu in -5.0f64..5.0, d in 1e-3f64..2.0, sigma in 0.05f64..3.0, best in -5.0f64..5.0) {
        let at = |mu: f64, best: f64| acquisition_score(Acquisition::Pi, &GaussianPrediction { mu, sigma }, best);
        // strictness needs the CDF away from its saturated tails
        prop_assume!(((mu - best) / sigma).abs() < 6.0 && ((mu + d - best) / sigma).abs() < 6.0);
        prop_assert!(at(mu + d, best) > at(mu, best));
        prop_assume!(((mu - best - d) / sigma).abs() < 6.0);
        prop_assert!(at(mu, best + d) < at(mu, best));
    }
}

#[test]
fn truth_oracle_has_zero_error_and_finds_the_optimum_at_once() {
    let b = bench(11, 2, 160);
    let norm = Normalizer::fit(&b.train);
    let truth = Truth(norm.clone());
    let cfg = EvalConfig {
        sizes: vec![5, 30],
        repeats: 3,
        sampler: SamplerConfig { target_size: 100, ..SamplerConfig::default() },
        seed: 4,
        jobs: 2,
    };
    let report = evaluate_prediction(&truth, &b.test, &cfg).unwrap();
    assert!(report.rows.iter().all(|r| r.mse_sum == 0.0 && r.n_tasks == 4 && r.n_repeats == 3));
    let too_big = EvalConfig { sizes: vec![31], ..cfg };
    assert!(matches!(evaluate_prediction(&truth, &b.test, &too_big), Err(EngineError::Config(_))));

    for task in &b.test {
        let tr = bayesopt_run(&truth, task, 5, 10, Acquisition::Greedy, 3).unwrap();
        assert_eq!(tr.rows.len(), 15);
        let at1 = tr.rows.iter().find(|r| r.trial == 1).unwrap();
        assert_eq!(at1.observed_f, task.max_f);
        assert_eq!(at1.regret, 0.0);
        // every initial design passes the low-reward filter
        if !tr.init_fallback {
            assert!(tr.rows[..5].iter().all(|r| r.observed_f <= 0.3 * task.max_f));
        }
    }
}

#[test]
fn ties_go_to_the_lowest_unobserved_index() {
    let b = bench(12, 2, 64);
    let flat = Flat(Normalizer::fit(&b.train));
    let task = &b.test[0];
    let tr = bayesopt_run(&flat, task, 5, 8, Acquisition::Pi, 9).unwrap();
    let init: Vec<usize> = tr.rows[..5].iter().map(|r| r.selected_index).collect();
    let expected: Vec<usize> = (0..task.len()).filter(|i| !init.contains(i)).take(8).collect();
    let picked: Vec<usize> = tr.rows[5..].iter().map(|r| r.selected_index).collect();
    assert_eq!(picked, expected);
    assert_eq!(tr.rows.iter().map(|r| r.trial).collect::<Vec<_>>(), (-4..=8).collect::<Vec<i64>>());
}

#[test]
fn initial_context_holding_the_maximum_gives_flat_zero_regret() {
    let norm = Normalizer::identity(4);
    // all rewards equal: nothing is below 30% of the maximum, so the
    // lowest-reward fallback is taken and already holds the maximum
    let task = flat_task(&[2.0; 20]);
    let tr = bayesopt_run(&Flat(norm.clone()), &task, 5, 6, Acquisition::Pi, 1).unwrap();
    assert!(tr.init_fallback);
    assert_eq!(tr.rows[..5].iter().map(|r| r.selected_index).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    assert!(tr.rows.iter().filter(|r| r.trial >= 0).all(|r| r.regret == 0.0 && r.best_f == 2.0));

    let zero = flat_task(&[0.0; 12]);
    let tr = bayesopt_run(&Truth(norm), &zero, 5, 3, Acquisition::Pi, 2).unwrap();
    assert!(!tr.init_fallback);
    assert!(tr.rows.iter().all(|r| r.regret == 0.0));
    assert!(bayesopt_run(&Flat(Normalizer::identity(4)), &zero, 5, 8, Acquisition::Pi, 2).is_err());
}

#[test]
fn traces_respect_their_invariants_under_stgp() {
    let b = bench(13, 2, 64);
    let stgp = StgpSurrogate { config: StgpConfig { iterations: 25, ..StgpConfig::default() }, normalizer: Normalizer::fit(&b.train) };
    let cfg = ProtocolConfig { init: 5, trials: 12, runs: 2, acquisition: Acquisition::Pi };
    let traces = run_protocol(&stgp, &b.test, &cfg, 21, 2).unwrap();
    assert_eq!(traces.len(), 8);
    for (k, tr) in traces.iter().enumerate() {
        assert_eq!((tr.task_id.as_str(), tr.run), (b.test[k / 2].task_id.as_str(), k % 2));
        assert_eq!(tr.rows.len(), 17);
        let mut seen = std::collections::HashSet::new();
        for w in tr.rows.windows(2) {
            assert!(w[1].best_f >= w[0].best_f && w[1].regret <= w[0].regret);
        }
        for r in &tr.rows {
            assert!(seen.insert(r.selected_index), "design {} selected twice", r.selected_index);
            assert_eq!(r.regret, tr.max_f - r.best_f);
        }
    }
    let again = run_protocol(&stgp, &b.test, &cfg, 21, 1).unwrap();
    assert_eq!(traces, again);
}

fn trace(surrogate: &str, task: &str, max_f: f64, best: &[f64]) -> OptimizationTrace {
    OptimizationTrace {
        surrogate: surrogate.into(),
        acquisition: Acquisition::Pi,
        task_id: task.into(),
        run: 0,
        seed: 0,
        max_f,
        init_fallback: false,
        rows: best
            .iter()
            .enumerate()
            .map(|(t, &b)| TraceRow { trial: t as i64, selected_index: t, observed_f: b, best_f: b, regret: max_f - b })
            .collect(),
    }
}

#[test]
fn aggregation_arithmetic() {
    let one = aggregate_runs(&[trace("aux", "t0", 6.0, &[5.4])], &[0.5]).unwrap();
    let r = &one.rows[0];
    assert!((r.mean_norm_best - 0.9).abs() < 1e-12 && (r.mean_regret - 0.6).abs() < 1e-12);
    assert_eq!(r.frac_solved, vec![0.0]);

    // runs are averaged per task before tasks are averaged
    let mut runs = vec![
        trace("aux", "a", 4.0, &[1.0, 3.0, 4.0]),
        trace("aux", "a", 4.0, &[2.0, 2.0, 2.0]),
        trace("aux", "b", 2.0, &[2.0, 2.0, 2.0]),
        trace("aux", "z", 0.0, &[0.0, 0.0, 0.0]),
        trace("stgp", "a", 4.0, &[0.0, 1.0, 3.6]),
    ];
    runs[1].run = 1;
    let agg = aggregate_runs(&runs, &[0.5, 2.0]).unwrap();
    assert_eq!(agg.excluded_tasks, 1);
    let aux: Vec<_> = agg.rows.iter().filter(|r| r.surrogate == "aux").collect();
    assert_eq!(aux.len(), 3);
    assert!((aux[2].mean_regret - 0.5).abs() < 1e-12);
    assert!((aux[2].mean_norm_best - 0.875).abs() < 1e-12);
    assert_eq!(aux[0].frac_solved, vec![0.5, 0.75]);
    assert_eq!(aux[2].frac_solved, vec![0.75, 1.0]);
    for w in aux.windows(2) {
        for (a, b) in w[0].frac_solved.iter().zip(&w[1].frac_solved) {
            assert!(a <= b && (0.0..=1.0).contains(b));
        }
    }
    assert_eq!(agg.rows.last().unwrap().surrogate, "stgp");
    assert!(aggregate_runs(&[], &[0.5]).is_err());
}

fn tiny_model(norm: Normalizer, seed: u64) -> Model {
    let cfg = ModelConfig {
        model_dim: 16,
        heads: 2,
        ff_dim: 32,
        predictor_layers: 2,
        sequence_encoder_layers: 1,
        ..ModelConfig::default()
    };
    Model::new(cfg, norm, seed).unwrap()
}

fn small_sampler() -> SamplerConfig {
    SamplerConfig { context_min: 3, context_max: 10, target_size: 20, ..SamplerConfig::default() }
}

#[test]
fn training_is_replayable_and_honours_patience() {
    let b = bench(14, 4, 40);
    let norm = Normalizer::fit(&b.train);
    let tc = TrainConfig { max_epochs: 3, patience: 5, learning_rate: 1e-3, seed: 8, ..TrainConfig::default() };
    let run = || train(tiny_model(norm.clone(), 1), &b.train, &b.val, &small_sampler(), &tc, |_| {}).unwrap();
    let (a, c) = (run(), run());
    assert_eq!(a.model.to_checkpoint().to_bytes(), c.model.to_checkpoint().to_bytes());
    assert_eq!(a.log, c.log);
    assert_eq!(a.steps, 3);

    // a large learning rate makes validation stall quickly
    let tc = TrainConfig { max_epochs: 60, patience: 0, learning_rate: 3e-2, seed: 2, ..TrainConfig::default() };
    let t = train(tiny_model(norm, 2), &b.train, &b.val, &small_sampler(), &tc, |_| {}).unwrap();
    let first_bad = t.log.iter().position(|r| !r.best).expect("validation never stalled");
    assert_eq!(t.log.len(), first_bad + 1);
    assert!(t.log[..first_bad].iter().all(|r| r.best));
}

#[test]
fn single_task_training_reduces_its_loss() {
    let b = bench(15, 1, 40);
    let norm = Normalizer::fit(&b.train);
    let sampler = small_sampler();
    let task = &b.train[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fixed: Vec<_> = (0..6).map(|_| sample_context_target(task, &sampler, &mut rng).unwrap()).collect();
    let loss = |m: &Model| -> f64 {
        fixed
            .iter()
            .map(|ep| {
                let item = TrainItem::from_task(task, &ep.context, &ep.targets);
                m.nll_loss(&item.context, &item.targets).unwrap()
            })
            .sum()
    };
    let mut decreased = 0;
    for seed in 0..20 {
        let model = tiny_model(norm.clone(), seed);
        let before = loss(&model);
        let tc = TrainConfig { max_epochs: 100, patience: 100, learning_rate: 1e-3, dropout: Some(0.0), seed, ..TrainConfig::default() };
        let t = train(model, &b.train, &b.train, &sampler, &tc, |_| {}).unwrap();
        assert_eq!(t.steps, 100);
        if loss(&t.model) < before {
            decreased += 1;
        }
    }
    assert!(decreased >= 19, "loss decreased in only {decreased} of 20 seeded runs");
}
