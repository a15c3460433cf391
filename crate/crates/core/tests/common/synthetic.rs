use auxbo::model::{ContextPoint, ContextSet, ModelConfig, Normalizer, Variant};
use auxbo::tasks::{AuxSequence, Split, TaskDataset, TrialRecord};
use rand::Rng;

/// Random records with flagged auxiliary sequences of length 0..=max_len.
pub fn random_task(rng: &mut impl Rng, n: usize, input_dim: usize, channels: usize, max_len: usize) -> TaskDataset {
    let records = (0..n)
        .map(|_| {
            let x = (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let len = rng.random_range(0..=max_len);
            let stop = rng.random_bool(0.5);
            let mut data = Vec::with_capacity(len * channels);
            for t in 0..len {
                for _ in 0..channels - 1 {
                    data.push(rng.random_range(-2.0..2.0));
                }
                data.push(if stop && t + 1 == len { 1.0 } else { 0.0 });
            }
            TrialRecord {
                x,
                f: (rng.random_range(0..60) as f64) / 10.0,
                h: AuxSequence::new(channels, data),
            }
        })
        .collect();
    TaskDataset::new("synthetic".into(), Split::Train, None, records)
}

pub fn tiny_config(rng: &mut impl Rng, variant: Variant) -> ModelConfig {
    let heads = [1usize, 2, 4][rng.random_range(0..3)];
    ModelConfig {
        input_dim: rng.random_range(1..=4),
        aux_channels: rng.random_range(2..=4),
        model_dim: heads * rng.random_range(2..=4),
        predictor_layers: rng.random_range(1..=2),
        sequence_encoder_layers: rng.random_range(1..=2),
        heads,
        ff_dim: rng.random_range(4..=16),
        dropout_rate: 0.1,
        sigma_floor: 1e-3,
        variant,
    }
}

pub fn normalizer_for(task: &TaskDataset) -> Normalizer {
    Normalizer::fit(std::slice::from_ref(task))
}

pub fn context<'a>(task: &'a TaskDataset, idx: &[usize]) -> ContextSet<'a> {
    ContextSet::new(idx.iter().map(|&i| ContextPoint::from(&task.records[i])).collect())
}
