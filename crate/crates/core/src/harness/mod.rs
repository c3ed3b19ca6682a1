//! Experiment plumbing: configs, seeded runs, metrics files, presets.
//!
//! Output layout for a run set rooted at `output_dir`:
//!
//! ```text
//! <output_dir>/<variant>/seed_<s>.csv
//! <output_dir>/<variant>/manifest.json
//! <output_dir>/summary.csv          (written by `summarize`)
//! ```

pub mod config;
pub mod metrics;
pub mod seeding;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DiceError, Result};
use crate::offpolicy::{OffPolicyTrainer, ShareMode};
use crate::onpolicy::{IterationMetrics, OnPolicyTrainer};

pub use config::{ExperimentConfig, TrainerKind};
pub use metrics::{MetricsTable, MetricsWriter};

/// Either trainer behind one interface.
#[derive(Debug, Clone)]
pub enum Trainer {
    OnPolicy(Box<OnPolicyTrainer>),
    OffPolicy(Box<OffPolicyTrainer>),
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        Ok(match cfg.trainer {
            TrainerKind::Onpolicy => Trainer::OnPolicy(Box::new(OnPolicyTrainer::new(cfg.onpolicy.clone(), &cfg.env, seed)?)),
            TrainerKind::Offpolicy => {
                Trainer::OffPolicy(Box::new(OffPolicyTrainer::new(cfg.offpolicy.clone(), &cfg.env, seed)?))
            }
        })
    }

    pub fn train_iteration(&mut self) -> Result<IterationMetrics> {
        match self {
            Trainer::OnPolicy(t) => t.train_iteration(),
            Trainer::OffPolicy(t) => t.train_iteration(),
        }
    }

    pub fn env_steps(&self) -> u64 {
        match self {
            Trainer::OnPolicy(t) => t.env_steps(),
            Trainer::OffPolicy(t) => t.env_steps(),
        }
    }

    pub fn agents(&self) -> usize {
        match self {
            Trainer::OnPolicy(t) => t.agents().len(),
            Trainer::OffPolicy(t) => t.agents().len(),
        }
    }
}

/// How a single seeded run ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// The non-finite guard stopped training. This is an expected outcome
    /// for some ablations and is recorded as data.
    NonFiniteGuard {
        what: String,
        agent: Option<usize>,
        iteration: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub metrics_file: String,
    pub metrics_sha256: String,
    pub iterations: u64,
    pub env_steps: u64,
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub crate_version: String,
    pub metrics_schema_version: u32,
    pub variant: String,
    /// SHA-256 of the resolved config with git blob framing.
    pub config_sha256: String,
    pub resolved_config: String,
    pub runs: Vec<RunRecord>,
}

/// SHA-256 over `"blob <len>\0" + content`, as git computes object ids.
pub fn git_blob_sha256(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

fn guard_row(iteration: u64, env_steps: u64, agents: usize) -> IterationMetrics {
    IterationMetrics {
        iteration,
        env_steps,
        agent_returns: vec![f64::NAN; agents],
        best_agent_return: f64::NAN,
        best_fixed_return: f64::NAN,
        diversity_mean: f64::NAN,
        pairwise_diversity: f64::NAN,
        entropy: f64::NAN,
        ratio_mean: f64::NAN,
        ratio_max: f64::NAN,
        grad_cosine: f64::NAN,
        clip_fraction: f64::NAN,
        kl_mean: f64::NAN,
        task_objective: f64::NAN,
        value_loss: f64::NAN,
    }
}

/// Trains one seed until `max_env_steps` (or `max_iterations`), streaming
/// rows to `path`. A non-finite guard trip ends the run with a final
/// `non_finite_guard` row.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, path: &Path) -> Result<(u64, u64, RunStatus)> {
    let mut trainer = Trainer::new(cfg, seed)?;
    let mut writer = MetricsWriter::create(path, trainer.agents(), seed)?;
    let mut iteration = 0u64;
    while trainer.env_steps() < cfg.max_env_steps && cfg.max_iterations.map_or(true, |m| iteration < m) {
        match trainer.train_iteration() {
            Ok(m) => {
                iteration = m.iteration;
                writer.write(&m, "ok")?;
            }
            Err(DiceError::NonFinite { what, agent }) => {
                log::warn!("seed {seed}: non-finite guard tripped at iteration {} ({what})", iteration + 1);
                writer.write(&guard_row(iteration + 1, trainer.env_steps(), trainer.agents()), "non_finite_guard")?;
                return Ok((
                    iteration,
                    trainer.env_steps(),
                    RunStatus::NonFiniteGuard {
                        what,
                        agent,
                        iteration: iteration + 1,
                    },
                ));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((iteration, trainer.env_steps(), RunStatus::Completed))
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| DiceError::io(path.display().to_string(), e))
}

/// Runs every seed of `cfg` into `<output_dir>/<variant>/`.
pub fn run_variant(cfg: &ExperimentConfig, variant: &str) -> Result<Manifest> {
    cfg.validate()?;
    let dir = cfg.output_dir.join(variant);
    std::fs::create_dir_all(&dir).map_err(|e| DiceError::io(dir.display().to_string(), e))?;
    let resolved = cfg.to_toml_string();
    let mut manifest = Manifest {
        crate_version: env!("CARGO_PKG_VERSION").into(),
        metrics_schema_version: metrics::METRICS_SCHEMA_VERSION,
        variant: variant.into(),
        config_sha256: git_blob_sha256(resolved.as_bytes()),
        resolved_config: resolved,
        runs: Vec::new(),
    };
    write_manifest(&dir, &manifest)?;
    for &seed in &cfg.seeds {
        let file = format!("seed_{seed}.csv");
        let path = dir.join(&file);
        log::info!("{variant}: seed {seed} -> {}", path.display());
        let (iterations, env_steps, status) = run_seed(cfg, seed, &path)?;
        let bytes = std::fs::read(&path).map_err(|e| DiceError::io(path.display().to_string(), e))?;
        manifest.runs.push(RunRecord {
            seed,
            metrics_file: file,
            metrics_sha256: git_blob_sha256(&bytes),
            iterations,
            env_steps,
            status,
        });
        write_manifest(&dir, &manifest)?;
    }
    Ok(manifest)
}

/// `run <config>`: the config's own label is the variant name.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<Manifest>> {
    Ok(vec![run_variant(cfg, &cfg.label)?])
}

/// One config per team size with the total batch held fixed. Variants are
/// named `k<K>`.
pub fn sweep_configs(base: &ExperimentConfig, ks: &[usize]) -> Result<Vec<(String, ExperimentConfig)>> {
    ks.iter()
        .map(|&k| {
            if k == 0 {
                return Err(DiceError::Config("team sizes must be >= 1".into()));
            }
            let mut cfg = base.clone();
            cfg.set_agents(k);
            cfg.validate()?;
            Ok((format!("k{k}"), cfg))
        })
        .collect()
}

pub fn sweep(base: &ExperimentConfig, ks: &[usize]) -> Result<Vec<Manifest>> {
    sweep_configs(base, ks)?
        .iter()
        .map(|(name, cfg)| run_variant(cfg, name))
        .collect()
}

/// Ablation variant labels, in matrix order.
pub const ABLATION_LABELS: [&str; 7] = ["full", "no_ce", "no_dr", "dvn", "na", "no_tsc", "no_du"];

/// The seven ablation variants of an on-policy base config:
///
/// | label    | change            |
/// |----------|-------------------|
/// | `full`   | none              |
/// | `no_ce`  | `use_ce = false`  |
/// | `no_dr`  | `use_dr = false`  |
/// | `dvn`    | `use_dvn = true`  |
/// | `na`     | `use_na = true`   |
/// | `no_tsc` | `use_tsc = false` |
/// | `no_du`  | `use_du = false`  |
///
/// For the off-policy trainer only `full`, `no_ce` (independent buffers),
/// `no_dr` and `no_du` exist.
pub fn ablation_configs(base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    let mut out = Vec::new();
    for label in ABLATION_LABELS {
        let mut cfg = base.clone();
        let applies = match cfg.trainer {
            TrainerKind::Onpolicy => {
                let p = &mut cfg.onpolicy;
                match label {
                    "no_ce" => p.use_ce = false,
                    "no_dr" => p.use_dr = false,
                    "dvn" => p.use_dvn = true,
                    "na" => p.use_na = true,
                    "no_tsc" => p.use_tsc = false,
                    "no_du" => p.use_du = false,
                    _ => {}
                }
                true
            }
            TrainerKind::Offpolicy => {
                let p = &mut cfg.offpolicy;
                match label {
                    "no_ce" => p.mode = ShareMode::Independent,
                    "no_dr" => p.use_dr = false,
                    "no_du" => p.use_du = false,
                    "full" => {}
                    _ => {}
                }
                matches!(label, "full" | "no_ce" | "no_dr" | "no_du")
            }
        };
        if applies {
            cfg.validate()?;
            out.push((label.to_string(), cfg));
        }
    }
    Ok(out)
}

pub fn ablate(base: &ExperimentConfig) -> Result<Vec<Manifest>> {
    ablation_configs(base)?
        .iter()
        .map(|(name, cfg)| run_variant(cfg, name))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub seeds: usize,
    /// Mean over seeds of the final best-agent return.
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub guard_terminations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

/// Final best-agent return of a metrics file: the last row that is not a
/// guard row.
pub fn final_best_return(table: &MetricsTable) -> Result<(f64, bool)> {
    let best = table.column("best_agent_return")?;
    let status = table.text_column("status")?;
    let guarded = status.iter().any(|s| s != "ok");
    let last = best
        .iter()
        .zip(&status)
        .filter(|(_, s)| s.as_str() == "ok")
        .map(|(b, _)| *b)
        .last()
        .unwrap_or(f64::NAN);
    Ok((last, guarded))
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn seed_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DiceError::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension().is_some_and(|x| x == "csv")
                && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed_"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Collects every `<variant>/seed_*.csv` under `dir` (or `dir` itself when
/// it holds seed files), writes `summary.csv` into `dir` and returns the rows
/// sorted by variant name.
pub fn summarize(dir: &Path) -> Result<Summary> {
    let mut variant_dirs: Vec<PathBuf> = vec![dir.to_path_buf()];
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DiceError::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    variant_dirs.extend(subdirs);

    let mut rows = Vec::new();
    for vdir in variant_dirs {
        let files = seed_files(&vdir)?;
        if files.is_empty() {
            continue;
        }
        let mut finals = Vec::new();
        let mut guards = 0;
        for f in &files {
            let (best, guarded) = final_best_return(&MetricsTable::read(f)?)?;
            finals.push(best);
            guards += usize::from(guarded);
        }
        let (mean, std) = mean_std(&finals);
        rows.push(SummaryRow {
            variant: vdir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("run")
                .to_string(),
            seeds: files.len(),
            mean,
            std,
            guard_terminations: guards,
        });
    }
    if rows.is_empty() {
        return Err(DiceError::Contract(format!("no metrics files under {}", dir.display())));
    }
    let summary = Summary { rows };
    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| DiceError::io(path.display().to_string(), std::io::Error::other(e)))?;
    let to_io = |e: csv::Error| DiceError::io(path.display().to_string(), std::io::Error::other(e));
    w.write_record(["variant", "seeds", "mean_best_agent_return", "std_best_agent_return", "guard_terminations"])
        .map_err(to_io)?;
    for r in &summary.rows {
        w.write_record([
            r.variant.clone(),
            r.seeds.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.guard_terminations.to_string(),
        ])
        .map_err(to_io)?;
    }
    w.flush().map_err(|e| DiceError::io(path.display().to_string(), e))?;
    Ok(summary)
}

impl Summary {
    /// Aligned text table.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
        let mut out = format!("{:<width$}  {:>5}  {:>22}  {:>6}\n", "variant", "seeds", "best-agent return", "guard");
        for r in &self.rows {
            let cell = format!("{:.4} ± {:.4}", r.mean, r.std);
            out.push_str(&format!(
                "{:<width$}  {:>5}  {:>22}  {:>6}\n",
                r.variant, r.seeds, cell, r.guard_terminations
            ));
        }
        out
    }
}
