//! JSON-lines dataset files, one task per line.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

use super::{AuxSequence, Split, TaskDataset, TaskError, Theta, TrialRecord, AUX_CHANNELS};

#[derive(Deserialize)]
struct TaskLine {
    task_id: String,
    split: Split,
    #[serde(default)]
    theta: Option<Theta>,
    #[serde(default)]
    max_f: Option<f64>,
    designs: Vec<DesignLine>,
}

#[derive(Deserialize)]
struct DesignLine {
    x: Vec<f64>,
    f: f64,
    #[serde(default)]
    h: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct TaskOut<'a> {
    task_id: &'a str,
    split: Split,
    #[serde(skip_serializing_if = "Option::is_none")]
    theta: Option<Theta>,
    max_f: Option<f64>,
    designs: Vec<DesignOut<'a>>,
}

#[derive(Serialize)]
struct DesignOut<'a> {
    x: &'a [f64],
    f: f64,
    h: Steps<'a>,
}

struct Steps<'a>(&'a AuxSequence);

impl Serialize for Steps<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.0.len()))?;
        for step in self.0.steps() {
            seq.serialize_element(step)?;
        }
        seq.end()
    }
}

/// Writes one JSON object per task. Floats use shortest round-trip form, so
/// reading the file back reproduces every value exactly.
pub fn write_tasks(path: &Path, tasks: &[TaskDataset]) -> Result<(), TaskError> {
    let file = File::create(path).map_err(|e| TaskError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for task in tasks {
        let line = TaskOut {
            task_id: &task.task_id,
            split: task.split,
            theta: task.theta,
            max_f: task.max_f.is_finite().then_some(task.max_f),
            designs: task
                .records
                .iter()
                .map(|r| DesignOut {
                    x: &r.x,
                    f: r.f,
                    h: Steps(&r.h),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &line)
            .map_err(|e| TaskError::io(path, std::io::Error::other(e)))?;
        out.write_all(b"\n").map_err(|e| TaskError::io(path, e))?;
    }
    out.flush().map_err(|e| TaskError::io(path, e))
}

/// Reads a dataset file. Blank lines are skipped and unknown fields ignored.
pub fn load_tasks(path: &Path) -> Result<Vec<TaskDataset>, TaskError> {
    let text = fs::read_to_string(path).map_err(|e| TaskError::io(path, e))?;
    let mut tasks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        tasks.push(parse_line(path, i + 1, line)?);
    }
    Ok(tasks)
}

fn parse_line(path: &Path, line_no: usize, line: &str) -> Result<TaskDataset, TaskError> {
    let fail = |field: String, message: String| TaskError::Parse {
        path: path.to_path_buf(),
        line: line_no,
        field,
        message,
    };
    let mut de = serde_json::Deserializer::from_str(line);
    let raw: TaskLine = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        fail(field, e.into_inner().to_string())
    })?;
    de.end().map_err(|e| fail(".".into(), e.to_string()))?;

    let input_dim = raw.designs.first().map_or(0, |d| d.x.len());
    let channels = raw
        .designs
        .iter()
        .find_map(|d| d.h.first().map(Vec::len))
        .unwrap_or(AUX_CHANNELS);
    if channels == 0 {
        return Err(fail("designs.h".into(), "steps must have at least one channel".into()));
    }
    let mut records = Vec::with_capacity(raw.designs.len());
    for (d, design) in raw.designs.into_iter().enumerate() {
        if design.x.len() != input_dim {
            return Err(fail(
                format!("designs[{d}].x"),
                format!("expected {input_dim} coordinates, got {}", design.x.len()),
            ));
        }
        let mut data = Vec::with_capacity(design.h.len() * channels);
        for (s, step) in design.h.iter().enumerate() {
            if step.len() != channels {
                return Err(fail(
                    format!("designs[{d}].h[{s}]"),
                    format!("expected {channels} channels, got {}", step.len()),
                ));
            }
            data.extend_from_slice(step);
        }
        records.push(TrialRecord {
            x: design.x,
            f: design.f,
            h: AuxSequence::new(channels, data),
        });
    }
    let task = TaskDataset::new(raw.task_id, raw.split, raw.theta, records);
    if let Some(stated) = raw.max_f {
        if task.max_f.is_finite() && stated != task.max_f {
            return Err(fail(
                "max_f".into(),
                format!("stated {stated} but the designs reach {}", task.max_f),
            ));
        }
    }
    if let Some(theta) = task.theta {
        if !theta.in_range() {
            return Err(fail("theta".into(), format!("{theta:?} is outside the family's ranges")));
        }
    }
    Ok(task)
}
