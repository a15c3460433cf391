use serde::{Deserialize, Serialize};

use crate::tasks::{AuxSequence, TaskDataset};

/// Benchmark-wide standardization of rewards and auxiliary channels,
/// estimated once on the training split and stored with every model.
///
/// Channels whose training values are all 0 or 1 (flags) pass through
/// unchanged. Designs are never rescaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub f_mean: f64,
    pub f_std: f64,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Normalizer {
            f_mean: 0.0,
            f_std: 1.0,
            channel_mean: vec![0.0; channels],
            channel_std: vec![1.0; channels],
        }
    }

    pub fn fit(tasks: &[TaskDataset]) -> Self {
        let channels = tasks.iter().find_map(TaskDataset::aux_channels).unwrap_or(1);
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        let mut cn = 0usize;
        let mut csum = vec![0.0; channels];
        let mut csq = vec![0.0; channels];
        let mut flag = vec![true; channels];
        for r in tasks.iter().flat_map(|t| &t.records) {
            n += 1;
            sum += r.f;
            sq += r.f * r.f;
            for step in r.h.steps() {
                cn += 1;
                for (c, &v) in step.iter().enumerate() {
                    csum[c] += v;
                    csq[c] += v * v;
                    flag[c] &= v == 0.0 || v == 1.0;
                }
            }
        }
        let stats = |count: usize, s: f64, s2: f64| {
            if count == 0 {
                return (0.0, 1.0);
            }
            let mean = s / count as f64;
            let var = (s2 / count as f64 - mean * mean).max(0.0);
            let std = var.sqrt();
            (mean, if std > 1e-12 { std } else { 1.0 })
        };
        let (f_mean, f_std) = stats(n, sum, sq);
        let mut channel_mean = vec![0.0; channels];
        let mut channel_std = vec![1.0; channels];
        for c in 0..channels {
            if !flag[c] {
                (channel_mean[c], channel_std[c]) = stats(cn, csum[c], csq[c]);
            }
        }
        Normalizer {
            f_mean,
            f_std,
            channel_mean,
            channel_std,
        }
    }

    pub fn channels(&self) -> usize {
        self.channel_mean.len()
    }

    pub fn reward(&self, f: f64) -> f64 {
        (f - self.f_mean) / self.f_std
    }

    pub fn reward_back(&self, f: f64) -> f64 {
        f * self.f_std + self.f_mean
    }

    /// Appends the standardized steps of `h` to `out`. An empty sequence
    /// becomes a single all-zero step whose last channel reads 1.
    pub(crate) fn push_steps(&self, h: &AuxSequence, out: &mut Vec<f64>) -> usize {
        let c = self.channels();
        if h.is_empty() {
            let mut step = vec![0.0; c];
            step[c - 1] = 1.0;
            out.extend(step.iter().enumerate().map(|(j, v)| (v - self.channel_mean[j]) / self.channel_std[j]));
            return 1;
        }
        for step in h.steps() {
            out.extend(step.iter().enumerate().map(|(j, v)| (v - self.channel_mean[j]) / self.channel_std[j]));
        }
        h.len()
    }
}
