mod common;

use auxbo::model::{
    CheckpointError, ContextPoint, ContextSet, Model, ModelConfig, ModelError, Normalizer, TrainItem, Variant,
};
use auxbo::numerics::{gaussian_nll, AdamW, AdamWConfig, Tape};
use auxbo::tasks::AuxSequence;
use common::synthetic::{context, normalizer_for, random_task, tiny_config};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn targets_of<'a>(task: &'a auxbo::tasks::TaskDataset, idx: &[usize]) -> Vec<&'a [f64]> {
    idx.iter().map(|&i| task.records[i].x.as_slice()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn predictions_are_set_invariant_and_target_independent(seed in any::<u64>(), aux in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let variant = if aux { Variant::Aux } else { Variant::RewardOnly };
        let cfg = tiny_config(&mut rng, variant);
        let task = random_task(&mut rng, 24, cfg.input_dim, cfg.aux_channels, 6);
        let model = Model::new(cfg, normalizer_for(&task), rng.random()).unwrap();

        let n_ctx = rng.random_range(1..=10);
        let mut order: Vec<usize> = (0..24).collect();
        order.shuffle(&mut rng);
        let (ctx_idx, tgt_idx) = order.split_at(n_ctx);
        let tgt_idx = &tgt_idx[..rng.random_range(1..=8)];
        let targets = targets_of(&task, tgt_idx);

        let base = model.predict(&context(&task, ctx_idx), &targets).unwrap();
        for p in &base {
            prop_assert!(p.mu.is_finite() && p.sigma.is_finite());
            prop_assert!(p.sigma >= model.config().sigma_floor);
        }

        let mut shuffled = ctx_idx.to_vec();
        shuffled.shuffle(&mut rng);
        let permuted = model.predict(&context(&task, &shuffled), &targets).unwrap();
        for (a, b) in base.iter().zip(&permuted) {
            prop_assert!((a.mu - b.mu).abs() <= 1e-9, "mu drift {}", (a.mu - b.mu).abs());
            prop_assert!((a.sigma - b.sigma).abs() <= 1e-9);
        }

        let keep = rng.random_range(0..targets.len());
        let alone = model.predict(&context(&task, ctx_idx), &targets[keep..=keep]).unwrap();
        prop_assert!((alone[0].mu - base[keep].mu).abs() <= 1e-9);
        prop_assert!((alone[0].sigma - base[keep].sigma).abs() <= 1e-9);
    }

    #[test]
    fn reward_only_ignores_feedback_bitwise(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = tiny_config(&mut rng, Variant::RewardOnly);
        let task = random_task(&mut rng, 16, cfg.input_dim, cfg.aux_channels, 6);
        let other = random_task(&mut rng, 16, cfg.input_dim, cfg.aux_channels, 9);
        let model = Model::new(cfg, normalizer_for(&task), rng.random()).unwrap();
        let ctx = context(&task, &[0, 1, 2, 3, 4]);
        let swapped = ContextSet::new(
            (0..5).map(|i| ContextPoint { x: &task.records[i].x, f: task.records[i].f, h: &other.records[i].h }).collect(),
        );
        let targets = targets_of(&task, &[8, 9, 10]);
        prop_assert_eq!(model.predict(&ctx, &targets).unwrap(), model.predict(&swapped, &targets).unwrap());
    }
}

#[test]
fn identical_feedback_gives_identical_embeddings_and_order_matters() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ModelConfig {
        model_dim: 16,
        heads: 2,
        ff_dim: 32,
        predictor_layers: 2,
        sequence_encoder_layers: 2,
        ..ModelConfig::default()
    };
    let task = random_task(&mut rng, 8, 4, 4, 6);
    let model = Model::new(cfg, normalizer_for(&task), 1).unwrap();
    let h = AuxSequence::from_steps(4, &[vec![0.1, 0.2, 0.5, 0.0], vec![0.4, -0.3, 0.6, 0.0], vec![1.2, 0.9, 0.7, 1.0]]);
    let h_copy = h.clone();
    let x = [0.3, -0.2, 0.9, 0.1];
    let a = ContextPoint { x: &x, f: 1.5, h: &h };
    let b = ContextPoint { x: &x, f: 1.5, h: &h_copy };
    let emb = model.encode_context(&[a, b]).unwrap();
    assert_eq!(emb.row(0), emb.row(1));

    let rev = h.reversed();
    let r = ContextPoint { x: &x, f: 1.5, h: &rev };
    let emb_rev = model.encode_context(&[r]).unwrap();
    assert!(emb_rev.row(0).iter().zip(emb.row(0)).any(|(p, q)| p != q));

    let empty = AuxSequence::empty(4);
    let e = ContextPoint { x: &x, f: 1.5, h: &empty };
    assert!(model.encode_context(&[e]).unwrap().is_finite());
}

#[test]
fn loss_is_a_sum_over_independent_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = ModelConfig {
        model_dim: 16,
        heads: 4,
        ff_dim: 16,
        predictor_layers: 2,
        sequence_encoder_layers: 1,
        ..ModelConfig::default()
    };
    let task = random_task(&mut rng, 20, 4, 4, 5);
    let model = Model::new(cfg, normalizer_for(&task), 2).unwrap();
    let ctx = context(&task, &[0, 1, 2, 3]);
    let t: Vec<(&[f64], f64)> = (5..12).map(|i| (task.records[i].x.as_slice(), task.records[i].f)).collect();
    let total = model.nll_loss(&ctx, &t).unwrap();
    let parts: f64 = t.iter().map(|p| model.nll_loss(&ctx, std::slice::from_ref(p)).unwrap()).sum();
    assert!((total - parts).abs() <= 1e-9);

    let mut doubled = t.clone();
    doubled.push(t[2]);
    let extra = model.nll_loss(&ctx, &doubled).unwrap() - total;
    let single = model.nll_loss(&ctx, &t[2..3]).unwrap();
    assert!((extra - single).abs() <= 1e-9);

    // the loss is exactly the Gaussian NLL of the standardized rewards
    let preds = model.predict(&ctx, &t.iter().map(|p| p.0).collect::<Vec<_>>()).unwrap();
    let manual: f64 = preds
        .iter()
        .zip(&t)
        .map(|(p, &(_, y))| gaussian_nll(model.normalizer().reward(y), p.mu, p.sigma).unwrap())
        .sum();
    assert!((manual - total).abs() <= 1e-12);
    assert!((gaussian_nll(0.7, 0.7, 1.0).unwrap() - 0.918_938_533_204_672_7).abs() < 1e-12);

    let item = TrainItem { context: ctx.clone(), targets: t.clone() };
    let mut tape = Tape::new();
    let loss = model.batch_loss(&mut tape, &[item.clone(), item], None).unwrap();
    assert!((tape.value(loss).item() - total).abs() <= 1e-9);
}

#[test]
fn empty_inputs_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let task = random_task(&mut rng, 6, 4, 4, 3);
    let model = Model::new(ModelConfig { model_dim: 8, heads: 2, ff_dim: 8, ..ModelConfig::default() }, normalizer_for(&task), 0).unwrap();
    let x = targets_of(&task, &[0]);
    assert!(matches!(model.predict(&ContextSet::default(), &x), Err(ModelError::EmptyContext)));
    assert!(matches!(model.predict(&context(&task, &[1]), &[]), Err(ModelError::EmptyTargets)));
    assert!(Model::new(ModelConfig { model_dim: 10, heads: 4, ..ModelConfig::default() }, Normalizer::identity(4), 0).is_err());
    assert!(Model::new(ModelConfig { sigma_floor: 0.0, ..ModelConfig::default() }, Normalizer::identity(4), 0).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences_for_every_parameter() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = ModelConfig {
        model_dim: 16,
        heads: 2,
        ff_dim: 16,
        predictor_layers: 2,
        sequence_encoder_layers: 2,
        dropout_rate: 0.0,
        ..ModelConfig::default()
    };
    let task = random_task(&mut rng, 12, 4, 4, 4);
    let mut model = Model::new(cfg, normalizer_for(&task), 3).unwrap();
    let item = TrainItem::from_task(&task, &[0, 1, 2], &[5, 6, 7]);
    let batch = [item];
    let loss_of = |m: &Model| {
        let mut tape = Tape::inference();
        let l = m.batch_loss(&mut tape, &batch, None).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let l = model.batch_loss(&mut tape, &batch, None).unwrap();
    let grads = tape.backward(l).unwrap();

    let ids: Vec<_> = model.params().ids().collect();
    let (mut checked, mut worst) = (0usize, 0.0f64);
    for id in ids {
        let analytic = grads.param(id).unwrap().clone();
        for i in 0..analytic.numel() {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + 1e-5;
            let up = loss_of(&model);
            model.params_mut().get_mut(id).data_mut()[i] = orig - 1e-5;
            let down = loss_of(&model);
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / 2e-5;
            let an = analytic.data()[i];
            if an.abs().max(fd.abs()) <= 1e-6 {
                continue;
            }
            let rel = (an - fd).abs() / an.abs().max(fd.abs());
            worst = worst.max(rel);
            checked += 1;
            assert!(rel <= 1e-4, "{}[{i}]: analytic {an}, fd {fd}", model.params().name(id));
        }
    }
    assert!(checked > 1000, "only {checked} coordinates checked (worst {worst:e})");
}

#[test]
fn checkpoint_round_trip_and_failures() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let task = random_task(&mut rng, 12, 4, 4, 4);
    let cfg = ModelConfig { model_dim: 16, heads: 2, ff_dim: 16, predictor_layers: 1, sequence_encoder_layers: 1, ..ModelConfig::default() };
    let model = Model::new(cfg, normalizer_for(&task), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    model.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"AUXBO-MODEL"));

    let back = Model::load(&path).unwrap();
    assert_eq!(back.params(), model.params());
    assert_eq!(back.config(), model.config());
    let ctx = context(&task, &[0, 1, 2]);
    let tx = targets_of(&task, &[4, 5, 6]);
    assert_eq!(back.predict(&ctx, &tx).unwrap(), model.predict(&ctx, &tx).unwrap());

    for cut in [5, 11, 14, 20, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        match Model::load(&path) {
            Err(ModelError::Checkpoint(CheckpointError::Truncated)) => {}
            other => panic!("cut at {cut}: expected truncation error, got {other:?}"),
        }
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(Model::load(&path), Err(ModelError::Checkpoint(CheckpointError::BadMagic))));
    let mut newer = bytes.clone();
    newer[11] = 9;
    std::fs::write(&path, &newer).unwrap();
    assert!(matches!(Model::load(&path), Err(ModelError::Checkpoint(CheckpointError::Version { found: 9, .. }))));

    std::fs::write(&path, &bytes).unwrap();
    assert!(Model::load_expecting(&path, Variant::Aux).is_ok());
    assert!(matches!(
        Model::load_expecting(&path, Variant::RewardOnly),
        Err(ModelError::Checkpoint(CheckpointError::ConfigConflict(_)))
    ));
}

#[test]
fn memorizes_a_single_task() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let task = random_task(&mut rng, 20, 4, 4, 6);
    let cfg = ModelConfig {
        model_dim: 32,
        heads: 4,
        ff_dim: 64,
        predictor_layers: 2,
        sequence_encoder_layers: 1,
        dropout_rate: 0.0,
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg, normalizer_for(&task), 9).unwrap();
    let mut opt = AdamW::new(AdamWConfig { lr: 1e-3, weight_decay: 0.0, ..AdamWConfig::default() }, model.params());
    let mut order: Vec<usize> = (0..20).collect();
    for _ in 0..1500 {
        let batch: Vec<TrainItem> = (0..4)
            .map(|_| {
                order.shuffle(&mut rng);
                TrainItem::from_task(&task, &order[..10], &order[10..])
            })
            .collect();
        let mut tape = Tape::new();
        let loss = model.batch_loss(&mut tape, &batch, None).unwrap();
        let grads = tape.backward(loss).unwrap();
        opt.step(model.params_mut(), &grads);
    }
    order.shuffle(&mut rng);
    let (c, t) = order.split_at(10);
    let preds = model.predict(&context(&task, c), &targets_of(&task, t)).unwrap();
    let norm = model.normalizer();
    let mae: f64 = preds.iter().zip(t).map(|(p, &i)| (p.mu - norm.reward(task.records[i].f)).abs()).sum::<f64>() / 10.0;
    assert!(mae <= 0.1, "mean absolute error {mae} in standardized units");
}
