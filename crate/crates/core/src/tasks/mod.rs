//! The disturbance-ramp task family: simulator, benchmark generation,
//! dataset files and the context/target sampler.

mod generate;
mod io;
mod sampler;
mod simulate;

pub(crate) use generate::derive_seed;
pub use generate::{generate_benchmark, task_seed, write_benchmark, Benchmark, BenchmarkConfig, Summary};
pub use io::{load_tasks, write_tasks};
pub use sampler::{high_threshold, sample_balanced, sample_context_target, Episode, SamplerConfig};
pub use simulate::{
    level_value, simulate_trial, simulate_trial_with_levels, AUX_CHANNELS, DESIGN_DIM, DT, LEVELS,
    STEPS_PER_LEVEL,
};

use std::fmt;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: field `{field}`: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl TaskError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TaskError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Hidden physical parameters of one task. Surrogates never see these.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub k: f64,
    pub c: f64,
    pub m: f64,
    pub g0: f64,
}

impl Theta {
    pub const K_RANGE: (f64, f64) = (0.5, 2.0);
    pub const C_RANGE: (f64, f64) = (0.05, 0.6);
    pub const M_RANGE: (f64, f64) = (0.5, 1.5);
    pub const G0_RANGE: (f64, f64) = (-0.3, 0.3);

    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut draw = |(lo, hi): (f64, f64)| rng.random_range(lo..hi);
        Theta {
            k: draw(Self::K_RANGE),
            c: draw(Self::C_RANGE),
            m: draw(Self::M_RANGE),
            g0: draw(Self::G0_RANGE),
        }
    }

    pub fn in_range(&self) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        within(self.k, Self::K_RANGE)
            && within(self.c, Self::C_RANGE)
            && within(self.m, Self::M_RANGE)
            && within(self.g0, Self::G0_RANGE)
    }
}

/// Variable-length multichannel observation sequence `h(x)`, stored flat.
///
/// When the last channel is a termination flag, `terminated_at` is the
/// first step at which it reads 1.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxSequence {
    channels: usize,
    data: Vec<f64>,
    terminated_at: Option<usize>,
}

impl AuxSequence {
    /// Builds a sequence and infers `terminated_at` from the last channel,
    /// provided it is a 0/1 flag that never drops back to 0.
    pub fn new(channels: usize, data: Vec<f64>) -> Self {
        assert!(channels > 0, "aux sequences need at least one channel");
        assert_eq!(data.len() % channels, 0, "ragged aux sequence");
        let flags = data.chunks(channels).map(|s| s[channels - 1]);
        let mut terminated_at = None;
        let mut is_flag = true;
        for (i, v) in flags.enumerate() {
            match (v, terminated_at) {
                (x, None) if x == 0.0 => {}
                (x, None) if x == 1.0 => terminated_at = Some(i),
                (x, Some(_)) if x == 1.0 => {}
                _ => {
                    is_flag = false;
                    break;
                }
            }
        }
        AuxSequence {
            channels,
            data,
            terminated_at: if is_flag { terminated_at } else { None },
        }
    }

    pub fn from_steps(channels: usize, steps: &[Vec<f64>]) -> Self {
        let mut data = Vec::with_capacity(steps.len() * channels);
        for s in steps {
            assert_eq!(s.len(), channels, "ragged aux sequence");
            data.extend_from_slice(s);
        }
        Self::new(channels, data)
    }

    pub fn empty(channels: usize) -> Self {
        Self::new(channels, Vec::new())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn step(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn steps(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn terminated_at(&self) -> Option<usize> {
        self.terminated_at
    }

    /// Same steps in reverse order.
    pub fn reversed(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for s in self.data.chunks(self.channels).rev() {
            data.extend_from_slice(s);
        }
        Self::new(self.channels, data)
    }
}

/// One evaluated design: `x`, its reward `f` and the feedback `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub x: Vec<f64>,
    pub f: f64,
    pub h: AuxSequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// All pre-evaluated designs of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: String,
    pub split: Split,
    pub theta: Option<Theta>,
    pub records: Vec<TrialRecord>,
    pub max_f: f64,
}

impl TaskDataset {
    /// Computes `max_f` from the records.
    pub fn new(task_id: String, split: Split, theta: Option<Theta>, records: Vec<TrialRecord>) -> Self {
        let max_f = records.iter().map(|r| r.f).fold(f64::NEG_INFINITY, f64::max);
        TaskDataset {
            task_id,
            split,
            theta,
            records,
            max_f,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.x.len())
    }

    pub fn aux_channels(&self) -> Option<usize> {
        self.records.first().map(|r| r.h.channels())
    }
}
