//! Per-iteration metrics files (CSV, one row per training iteration).
//!
//! Rows are flushed as they are written so a partial file is always
//! parseable. Floats use Rust's shortest round-trip formatting; missing
//! values are written as `NaN`.

use std::fs::File;
use std::path::{Path, PathBuf};

use crate::error::{DiceError, Result};
use crate::onpolicy::IterationMetrics;

/// Bumped whenever columns change.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Fixed leading columns; `agent_return_<k>` columns follow.
pub const FIXED_COLUMNS: [&str; 17] = [
    "seed",
    "iteration",
    "env_steps",
    "best_agent_return",
    "best_fixed_return",
    "mean_agent_return",
    "diversity_mean",
    "pairwise_diversity",
    "entropy",
    "ratio_mean",
    "ratio_max",
    "grad_cosine",
    "clip_fraction",
    "kl_mean",
    "task_objective",
    "value_loss",
    "status",
];

pub fn header(agents: usize) -> Vec<String> {
    FIXED_COLUMNS
        .iter()
        .map(|c| c.to_string())
        .chain((0..agents).map(|k| format!("agent_return_{k}")))
        .collect()
}

fn nan_mean(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().cloned().filter(|v| !v.is_nan()).collect();
    if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    writer: csv::Writer<File>,
    agents: usize,
    seed: u64,
    last_env_steps: u64,
}

impl MetricsWriter {
    pub fn create(path: &Path, agents: usize, seed: u64) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| DiceError::io(parent.display().to_string(), e))?;
        }
        let file = File::create(path).map_err(|e| DiceError::io(path.display().to_string(), e))?;
        let mut w = MetricsWriter {
            path: path.to_path_buf(),
            writer: csv::Writer::from_writer(file),
            agents,
            seed,
            last_env_steps: 0,
        };
        w.write_record(header(agents))?;
        Ok(w)
    }

    fn write_record(&mut self, record: Vec<String>) -> Result<()> {
        let to_io = |e: csv::Error| DiceError::io(self.path.display().to_string(), std::io::Error::other(e));
        self.writer.write_record(&record).map_err(to_io)?;
        self.writer
            .flush()
            .map_err(|e| DiceError::io(self.path.display().to_string(), e))
    }

    /// Appends one row. `status` is `ok` for normal rows.
    pub fn write(&mut self, m: &IterationMetrics, status: &str) -> Result<()> {
        if m.env_steps < self.last_env_steps {
            return Err(DiceError::Contract("env_steps must be monotone within a run".into()));
        }
        if m.agent_returns.len() != self.agents {
            return Err(DiceError::dim("metrics agent returns", self.agents, m.agent_returns.len()));
        }
        self.last_env_steps = m.env_steps;
        let f = |v: f64| v.to_string();
        let mut record = vec![
            self.seed.to_string(),
            m.iteration.to_string(),
            m.env_steps.to_string(),
            f(m.best_agent_return),
            f(m.best_fixed_return),
            f(nan_mean(&m.agent_returns)),
            f(m.diversity_mean),
            f(m.pairwise_diversity),
            f(m.entropy),
            f(m.ratio_mean),
            f(m.ratio_max),
            f(m.grad_cosine),
            f(m.clip_fraction),
            f(m.kl_mean),
            f(m.task_objective),
            f(m.value_loss),
            status.to_string(),
        ];
        record.extend(m.agent_returns.iter().map(|&v| f(v)));
        self.write_record(record)
    }
}

/// A metrics file read back as column name -> values.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MetricsTable {
    pub fn read(path: &Path) -> Result<Self> {
        let to_io = |e: csv::Error| DiceError::io(path.display().to_string(), std::io::Error::other(e));
        let mut reader = csv::Reader::from_path(path).map_err(to_io)?;
        let columns = reader.headers().map_err(to_io)?.iter().map(String::from).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|rec| rec.iter().map(String::from).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()
            .map_err(to_io)?;
        Ok(MetricsTable { columns, rows })
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| DiceError::Contract(format!("metrics file has no column {name:?}")))?;
        self.rows
            .iter()
            .map(|r| {
                r[idx]
                    .parse::<f64>()
                    .map_err(|e| DiceError::Contract(format!("bad value {:?} in column {name}: {e}", r[idx])))
            })
            .collect()
    }

    pub fn text_column(&self, name: &str) -> Result<Vec<String>> {
        let idx = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| DiceError::Contract(format!("metrics file has no column {name:?}")))?;
        Ok(self.rows.iter().map(|r| r[idx].clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(iteration: u64, env_steps: u64) -> IterationMetrics {
        IterationMetrics {
            iteration,
            env_steps,
            agent_returns: vec![1.5, f64::NAN],
            best_agent_return: 1.5,
            best_fixed_return: 1.5,
            diversity_mean: 0.1,
            pairwise_diversity: 0.2,
            entropy: 2.8,
            ratio_mean: 1.0,
            ratio_max: 1.3,
            grad_cosine: f64::NAN,
            clip_fraction: 0.0,
            kl_mean: 0.01,
            task_objective: -0.5,
            value_loss: 0.3,
        }
    }

    #[test]
    fn round_trip_and_monotone_steps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/seed_0.csv");
        let mut w = MetricsWriter::create(&path, 2, 0).unwrap();
        w.write(&metrics(1, 100), "ok").unwrap();
        // readable mid-run
        let t = MetricsTable::read(&path).unwrap();
        assert_eq!(t.rows.len(), 1);
        w.write(&metrics(2, 200), "ok").unwrap();
        assert!(w.write(&metrics(3, 150), "ok").is_err());
        let t = MetricsTable::read(&path).unwrap();
        assert_eq!(t.columns, header(2));
        assert_eq!(t.column("env_steps").unwrap(), vec![100.0, 200.0]);
        assert!(t.column("agent_return_1").unwrap()[0].is_nan());
        assert_eq!(t.column("mean_agent_return").unwrap()[0], 1.5);
        assert!(t.column("nope").is_err());
    }
}
