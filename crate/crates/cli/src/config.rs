//! Experiment configuration: a TOML file with dotted section keys, command
//! line overrides, and the resolved snapshot written into each run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chns::encoder::TrainConfig;
use chns::evalkit::{DcfParams, TrialPolicy};
use chns::synthdata::CorpusSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run seed. Drives corpus draws, training, trials and grid cells.
    pub seed: u64,
    /// Generator settings; `corpus.seed` fixes the family means and channel.
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub paths: PathsConfig,
    pub eval: EvalConfig,
    pub grid: GridConfig,
    pub report: ReportConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusSpec::default(),
            train: TrainConfig::default(),
            paths: PathsConfig::default(),
            eval: EvalConfig::default(),
            grid: GridConfig::default(),
            report: ReportConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Inputs produced by earlier runs. Unset paths default to the run
/// directory's own artifacts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub cluster_map: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub policy: TrialPolicy,
    pub n_target: usize,
    pub n_nontarget: usize,
    /// Held-out speakers per family written by `gen-data`.
    pub speakers_per_family: usize,
    pub dcf: DcfParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            policy: TrialPolicy::Hard,
            n_target: 2000,
            n_nontarget: 2000,
            speakers_per_family: 5,
            dcf: DcfParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub k: Vec<usize>,
    pub hard_ratio: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            k: vec![10, 20, 50, 100],
            hard_ratio: vec![0.2, 0.5, 0.8, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub bins: usize,
    /// Batches per sampler mode behind each histogram.
    pub batches: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { bins: 40, batches: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanExport {
    None,
    /// The first epoch and every epoch whose sampler differs from the last.
    #[default]
    Changes,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub batch_plans: PlanExport,
    /// Keep a checkpoint for every epoch besides the final one.
    pub epoch_checkpoints: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            batch_plans: PlanExport::Changes,
            epoch_checkpoints: true,
        }
    }
}

/// Parses `key=value`; the value is read as a TOML literal and falls back to
/// a plain string.
fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {raw:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Config(format!("bad override key {key:?}")).into());
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{p} is not a section")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// File values, then `--set` overrides, then `--seed`.
pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut table = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|_| CliError::Missing(p.to_path_buf()))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for raw in overrides {
        let (path, value) = parse_override(raw)?;
        set_path(&mut table, &path, value)?;
    }
    let mut cfg: ExperimentConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    cfg.train
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    cfg.corpus.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).context("serializing config")
}

pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()).into())
}
