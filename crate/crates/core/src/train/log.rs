//! Append-only JSON-lines metric log.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{TrainError, Validation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Step,
    Epoch,
}

/// One log line. Step entries carry `loss` and `lr`; epoch entries carry
/// the validation fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub run_id: String,
    pub kind: EntryKind,
    pub epoch: usize,
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metric: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub faithfulness: Option<f64>,
}

impl MetricEntry {
    pub fn step(run_id: &str, epoch: usize, step: usize, loss: f64, lr: f64) -> Self {
        Self {
            run_id: run_id.to_string(),
            kind: EntryKind::Step,
            epoch,
            step,
            loss: Some(loss),
            lr: Some(lr),
            metric: None,
            margin: None,
            faithfulness: None,
        }
    }

    pub fn epoch(run_id: &str, v: &Validation, step: usize) -> Self {
        Self {
            run_id: run_id.to_string(),
            kind: EntryKind::Epoch,
            epoch: v.epoch,
            step,
            loss: None,
            lr: None,
            metric: Some(v.metric),
            margin: Some(v.margin),
            faithfulness: v.faithfulness,
        }
    }
}

/// In-memory entries, mirrored to a file when a path is given.
#[derive(Debug)]
pub struct MetricLog {
    pub run_id: String,
    entries: Vec<MetricEntry>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl MetricLog {
    pub fn open(run_id: &str, path: Option<&Path>) -> Result<Self, TrainError> {
        let sink = match path {
            Some(p) => {
                let io = |source| TrainError::Io {
                    path: p.to_path_buf(),
                    source,
                };
                if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent).map_err(io)?;
                }
                let f = OpenOptions::new().create(true).append(true).open(p).map_err(io)?;
                Some((p.to_path_buf(), BufWriter::new(f)))
            }
            None => None,
        };
        Ok(Self {
            run_id: run_id.to_string(),
            entries: Vec::new(),
            sink,
        })
    }

    pub fn push(&mut self, entry: MetricEntry) -> Result<(), TrainError> {
        if let Some((path, w)) = &mut self.sink {
            let line = serde_json::to_string(&entry).expect("metric entries serialize");
            writeln!(w, "{line}")
                .and_then(|()| w.flush())
                .map_err(|source| TrainError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[MetricEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<MetricEntry> {
        self.entries
    }
}
