mod common;

use auxbo::engine::TrainConfig;
use auxbo::gp::{
    fit_stgp, gp_posterior, kernel_eval, lml_gradient, log_marginal_likelihood, train_dgp, DeepKernelGp, DgpConfig,
    GpError, KernelConfig, KernelFamily, StgpConfig,
};
use auxbo::model::{CheckpointError, Model, ModelError, Normalizer};
use auxbo::numerics::{linalg, Tensor};
use auxbo::tasks::{generate_benchmark, BenchmarkConfig, TaskDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::gp_oracle::{dense_inverse, oracle_kernel, random_kernel, random_points};

#[test]
fn kernel_closed_forms() {
    let one = |family| KernelConfig { lengthscales: vec![0.7], signal_variance: 1.0, ..KernelConfig::new(family, 1) };
    let x = Tensor::new(vec![1, 1], vec![0.2]);
    let y = Tensor::new(vec![1, 1], vec![0.9]);
    assert!((kernel_eval(&one(KernelFamily::Rbf), &x, &y).item() - 0.606_530_659_712_633_4).abs() < 1e-12);
    let unit = KernelConfig { lengthscales: vec![1.0], ..one(KernelFamily::Matern52) };
    let z = Tensor::new(vec![1, 1], vec![1.2]);
    assert!((kernel_eval(&unit, &x, &z).item() - 0.523_994_108_831_820_3).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for family in KernelFamily::ALL {
        let cfg = KernelConfig { family, ..random_kernel(&mut rng, 3) };
        let pts = random_points(&mut rng, 7, 3);
        let k = kernel_eval(&cfg, &pts, &pts);
        for i in 0..7 {
            assert!((k.row(i)[i] - cfg.signal_variance).abs() < 1e-15);
            for j in 0..7 {
                assert!((k.row(i)[j] - k.row(j)[i]).abs() <= 1e-12);
                assert!((k.row(i)[j] - oracle_kernel(&cfg, pts.row(i), pts.row(j))).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn posterior_matches_dense_inverse_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let (n, d, m) = (rng.random_range(1..=8), rng.random_range(1..=4), rng.random_range(1..=4));
        let cfg = random_kernel(&mut rng, d);
        let x = random_points(&mut rng, n, d);
        let q = random_points(&mut rng, m, d);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = oracle_kernel(&cfg, x.row(i), x.row(j));
            }
            a[i * n + i] += cfg.noise_variance + cfg.jitter;
        }
        let inv = dense_inverse(&a, n);
        let got = gp_posterior(&cfg, &x, &y, &q).unwrap();
        for (k, p) in got.iter().enumerate() {
            let ks: Vec<f64> = (0..n).map(|i| oracle_kernel(&cfg, q.row(k), x.row(i))).collect();
            let w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| inv[i * n + j] * ks[j]).sum()).collect();
            let mu: f64 = (0..n).map(|i| (0..n).map(|j| ks[i] * inv[i * n + j] * y[j]).sum::<f64>()).sum();
            let var = cfg.signal_variance - ks.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + cfg.noise_variance;
            assert!((p.mu - mu).abs() <= 1e-8, "mean {} vs {mu}", p.mu);
            assert!((p.sigma * p.sigma - var).abs() <= 1e-8, "variance {} vs {var}", p.sigma * p.sigma);
            assert!(p.sigma * p.sigma >= cfg.noise_variance - 1e-9);
        }
    }
}

#[test]
fn posterior_interpolates_and_reverts_to_prior() {
    let cfg = KernelConfig { noise_variance: 1e-12, ..KernelConfig::new(KernelFamily::Rbf, 2) };
    let x = Tensor::new(vec![1, 2], vec![0.3, -0.4]);
    let p = gp_posterior(&cfg, &x, &[1.7], &x).unwrap();
    assert!((p[0].mu - 1.7).abs() <= 1e-5);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for family in KernelFamily::ALL {
        let cfg = KernelConfig { family, ..random_kernel(&mut rng, 2) };
        let far = Tensor::new(vec![1, 2], vec![1e3, -1e3]);
        let x = random_points(&mut rng, 6, 2);
        let y: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let before = gp_posterior(&cfg, &x, &y, &far).unwrap()[0];
        assert!(before.mu.abs() <= 1e-6);
        assert!((before.sigma.powi(2) - cfg.signal_variance - cfg.noise_variance).abs() <= 1e-6);
        let more = Tensor::new(vec![7, 2], [x.data(), &[0.1, 0.1]].concat());
        let after = gp_posterior(&cfg, &more, &[y.as_slice(), &[5.0]].concat(), &far).unwrap()[0];
        assert!((after.mu - before.mu).abs() <= 1e-6 && (after.sigma - before.sigma).abs() <= 1e-6);
    }
    let bad = KernelConfig { lengthscales: vec![1.0, -1.0], ..KernelConfig::new(KernelFamily::Rbf, 2) };
    assert!(matches!(gp_posterior(&bad, &x, &[1.0], &x), Err(GpError::Config(_))));
}

#[test]
fn marginal_likelihood_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let (n, d) = (rng.random_range(2..=8), rng.random_range(1..=3));
        let cfg = random_kernel(&mut rng, d);
        let x = random_points(&mut rng, n, d);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let log = cfg.log_hypers();
        let (value, grad) = lml_gradient(cfg.family, &log, &x, &y, cfg.jitter).unwrap();
        assert!((value - log_marginal_likelihood(&cfg, &x, &y).unwrap()).abs() < 1e-12);

        // independent value: −½ yᵀA⁻¹y − ½ log|A| − (n/2) log 2π via the dense inverse
        let mut a = kernel_eval(&cfg, &x, &x).into_data();
        for i in 0..n {
            a[i * n + i] += cfg.noise_variance + cfg.jitter;
        }
        let inv = dense_inverse(&a, n);
        let quad: f64 = (0..n).map(|i| (0..n).map(|j| y[i] * inv[i * n + j] * y[j]).sum::<f64>()).sum();
        let logdet = 2.0 * linalg::half_log_det(&linalg::cholesky(&a, n).unwrap(), n);
        let expect = -0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        assert!((value - expect).abs() < 1e-9);

        for i in 0..log.len() {
            let mut up = log.clone();
            up[i] += 1e-5;
            let mut down = log.clone();
            down[i] -= 1e-5;
            let fd = (lml_gradient(cfg.family, &up, &x, &y, cfg.jitter).unwrap().0
                - lml_gradient(cfg.family, &down, &x, &y, cfg.jitter).unwrap().0)
                / 2e-5;
            let scale = grad[i].abs().max(fd.abs());
            if scale > 1e-6 {
                assert!((grad[i] - fd).abs() / scale <= 1e-4, "coord {i}: {} vs {fd}", grad[i]);
            }
        }
    }
}

#[test]
fn stgp_recovers_lengthscale_of_its_generating_gp() {
    // draws from a 1-D RBF GP with lengthscale 0.3, refit from scratch
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let truth = KernelConfig {
            lengthscales: vec![0.3],
            signal_variance: 1.0,
            noise_variance: 1e-3,
            ..KernelConfig::new(KernelFamily::Rbf, 1)
        };
        let x = random_points(&mut rng, 40, 1);
        let mut k = kernel_eval(&truth, &x, &x).into_data();
        for i in 0..40 {
            k[i * 40 + i] += truth.noise_variance;
        }
        let l = linalg::cholesky(&k, 40).unwrap();
        let z: Vec<f64> = (0..40).map(|_| standard_normal(&mut rng)).collect();
        let y: Vec<f64> = (0..40).map(|i| (0..=i).map(|j| l[i * 40 + j] * z[j]).sum()).collect();
        let fit = fit_stgp(&x, &y, &StgpConfig { seed, ..StgpConfig::default() }).unwrap();
        let ls = fit.kernel.lengthscales[0];
        assert!((0.15..=0.6).contains(&ls), "seed {seed}: lengthscale {ls}");
        assert!(fit.initial_objectives.iter().all(|&v| fit.objective >= v));
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[test]
fn stgp_handles_duplicates_and_climbs() {
    let x = Tensor::new(vec![6, 2], vec![0.1, 0.2, 0.1, 0.2, -0.5, 0.4, -0.5, 0.4, 0.7, -0.7, 0.7, -0.7]);
    let y = [1.0, 2.0, 0.0, 0.6, 3.0, 2.2];
    let fit = fit_stgp(&x, &y, &StgpConfig::default()).unwrap();
    assert!(fit.kernel.noise_variance > 1e-2, "noise {}", fit.kernel.noise_variance);
    assert_eq!(fit.initial_objectives.len(), 4);
    assert!(fit.initial_objectives.iter().all(|&v| fit.objective >= v));
    let p = fit.predict(&x).unwrap();
    assert!(p.iter().all(|p| p.mu.is_finite() && p.sigma > 0.0));
    // predictions are returned in the units of y
    let mean = y.iter().sum::<f64>() / 6.0;
    let far = fit.predict(&Tensor::new(vec![1, 2], vec![50.0, 50.0])).unwrap();
    assert!((far[0].mu - mean).abs() < 1e-6);

    assert!(matches!(
        fit_stgp(&Tensor::new(vec![1, 2], vec![0.0, 0.0]), &[1.0], &StgpConfig::default()),
        Err(GpError::TooFewPoints { .. })
    ));
}

fn small_benchmark() -> (Vec<TaskDataset>, Vec<TaskDataset>) {
    let cfg = BenchmarkConfig { seed: 3, n_train: 6, n_val: 2, n_test: 1, pool_size: 128 };
    let b = generate_benchmark(&cfg, 1).unwrap();
    (b.train, b.val)
}

#[test]
fn untrained_dgp_posterior_is_finite_and_consistent() {
    let (train, _) = small_benchmark();
    let model = DeepKernelGp::new(DgpConfig::default(), 4, Normalizer::fit(&train), 7).unwrap();
    let task = &train[0];
    let cx: Vec<&[f64]> = task.records[..10].iter().map(|r| r.x.as_slice()).collect();
    let cf: Vec<f64> = task.records[..10].iter().map(|r| r.f).collect();
    let qx: Vec<&[f64]> = task.records[10..60].iter().map(|r| r.x.as_slice()).collect();
    let noise = model.kernel().noise_variance;
    for p in model.predict(&cx, &cf, &qx).unwrap() {
        assert!(p.mu.is_finite());
        assert!(p.sigma * p.sigma >= noise - 1e-9);
        assert!(p.sigma * p.sigma <= model.kernel().signal_variance + noise + 1e-9);
    }
}

#[test]
fn dgp_training_improves_held_out_likelihood_and_is_deterministic() {
    let (train, _) = small_benchmark();
    // one task split in two: fit on half its designs, validate on the rest
    let task = &train[0];
    let half = |range: std::ops::Range<usize>, id: &str| {
        TaskDataset::new(id.into(), task.split, task.theta, task.records[range].to_vec())
    };
    let fit_on = vec![half(0..64, "a")];
    let held_out = vec![half(64..128, "b")];
    let cfg = DgpConfig { embedding_dim: 8, hidden_dim: 32, ..DgpConfig::default() };
    let tc = TrainConfig { learning_rate: 1e-3, max_epochs: 150, patience: 150, seed: 5, ..TrainConfig::default() };
    let a = train_dgp(&fit_on, &held_out, &cfg, &tc, |_| {}).unwrap();
    let best = a.log.iter().map(|r| r.val_nll).fold(f64::INFINITY, f64::min);
    assert!(best < a.initial_val_nll, "best {best} vs initial {}", a.initial_val_nll);

    let short = TrainConfig { max_epochs: 5, ..tc };
    let b1 = train_dgp(&fit_on, &held_out, &cfg, &short, |_| {}).unwrap();
    let b2 = train_dgp(&fit_on, &held_out, &cfg, &short, |_| {}).unwrap();
    assert_eq!(b1.model.params(), b2.model.params());
    assert_eq!(b1.log, b2.log);
}

#[test]
fn dgp_checkpoint_round_trip_and_kind_tag() {
    let (train, _) = small_benchmark();
    let model = DeepKernelGp::new(DgpConfig::default(), 4, Normalizer::fit(&train), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dgp.bin");
    model.save(&path).unwrap();
    let back = DeepKernelGp::load(&path).unwrap();
    assert_eq!(back.params(), model.params());
    assert_eq!(back.config(), model.config());
    assert!(matches!(
        Model::load(&path),
        Err(ModelError::Checkpoint(CheckpointError::KindMismatch { expected: "tnp", found: "dgp" }))
    ));
}
