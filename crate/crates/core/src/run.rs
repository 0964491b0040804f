//! Run directories: everything `train` writes and `eval`/`plot` read back.
//!
//! Layout of a run directory:
//!
//! | file | content |
//! |---|---|
//! | `config.json` | the configuration, byte-for-byte as given |
//! | `data.tsr` | the materialised task sequence |
//! | `checkpoint/` | registry checkpoint (`manifest.json`, `global.tsr`, `task_<t>.tsr`) |
//! | `metrics.csv` | one row per optimizer step |
//! | `matrix_til.csv`, `matrix_cil.csv`, `matrix_task.csv` | accuracy matrices |
//! | `probes.tsr` | end-of-task probe inputs and logits |
//! | `run_manifest.json` | digests and headline numbers |

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{load_cache, save_cache};
use crate::error::{EftError, Result};
use crate::registry::Registry;
use crate::trainer::{
    read_probes, recompute_matrices, replay_probes, run_sequence, write_metrics, write_probes, AccuracyMatrix,
    SequenceResult, TaskSummary,
};

pub const CONFIG_FILE: &str = "config.json";
pub const DATA_FILE: &str = "data.tsr";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PROBES_FILE: &str = "probes.tsr";
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Til,
    Cil,
    /// Task-identification accuracy.
    Task,
}

impl EvalMode {
    pub fn matrix_file(&self) -> &'static str {
        match self {
            EvalMode::Til => "matrix_til.csv",
            EvalMode::Cil => "matrix_cil.csv",
            EvalMode::Task => "matrix_task.csv",
        }
    }
}

impl FromStr for EvalMode {
    type Err = EftError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "til" => Ok(EvalMode::Til),
            "cil" => Ok(EvalMode::Cil),
            "task" => Ok(EvalMode::Task),
            other => Err(EftError::Config(format!("unknown eval mode `{other}` (til, cil, task)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub data_digest: String,
    pub probes_digest: String,
    pub global_digest: String,
    pub task_digests: Vec<String>,
    pub til_averages: Vec<f64>,
    pub cil_averages: Vec<f64>,
    pub task_averages: Vec<f64>,
    pub summaries: Vec<TaskSummary>,
    pub package_version: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn output<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.into_output_error(path))
}

/// Trains the configured sequence and writes the run directory.
pub fn train_run(cfg: &RunConfig, config_text: &str) -> Result<(RunManifest, SequenceResult)> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|source| EftError::OutputNotWritable { path: dir.clone(), source })?;
    let cfg_path = dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, config_text).map_err(|source| EftError::OutputNotWritable { path: cfg_path, source })?;

    let data = cfg.materialize()?;
    let data_path = dir.join(DATA_FILE);
    let data_digest = output(&data_path, save_cache(&data_path, &data))?;
    let result = run_sequence(&data, &cfg.arch_spec()?, cfg.spec()?, &cfg.train_config())?;

    let ckpt = dir.join(CHECKPOINT_DIR);
    output(&ckpt, result.registry.save(&ckpt))?;
    let p = dir.join(METRICS_FILE);
    output(&p, write_metrics(&p, &result.metrics))?;
    for (mode, m) in [(EvalMode::Til, &result.til), (EvalMode::Cil, &result.cil), (EvalMode::Task, &result.task_pred)] {
        let p = dir.join(mode.matrix_file());
        output(&p, m.write_csv(&p))?;
    }
    let p = dir.join(PROBES_FILE);
    let probes_digest = output(&p, write_probes(&p, &result.probes))?;

    let reg = &result.registry;
    let manifest = RunManifest {
        config_sha256: sha256_hex(config_text.as_bytes()),
        data_digest,
        probes_digest,
        global_digest: reg.global_digest().unwrap_or_default().to_string(),
        task_digests: (1..=reg.num_tasks()).map(|t| reg.task_digest(t).unwrap_or_default().to_string()).collect(),
        til_averages: result.til.averages(),
        cil_averages: result.cil.averages(),
        task_averages: result.task_pred.averages(),
        summaries: result.summaries.clone(),
        package_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let p = dir.join(RUN_MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&p, json).map_err(|source| EftError::OutputNotWritable { path: p, source })?;
    Ok((manifest, result))
}

/// Result of re-evaluating a finished run from its checkpoint.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub recomputed: AccuracyMatrix,
    /// The matrix written at training time, if present.
    pub stored: Option<AccuracyMatrix>,
    /// End-of-task probe logits replayed bit-identically.
    pub probes_replay: bool,
}

impl EvalReport {
    /// Recomputed and stored matrices agree cell for cell, bit for bit.
    pub fn matches_training(&self) -> bool {
        let Some(stored) = &self.stored else { return false };
        let n = self.recomputed.num_tasks();
        stored.num_tasks() == n
            && (1..=n).all(|t| {
                (1..=n).all(|i| {
                    self.recomputed.get(i, t).map(f64::to_bits) == stored.get(i, t).map(f64::to_bits)
                })
            })
    }
}

pub fn load_run_registry(dir: &Path) -> Result<Registry> {
    Registry::load(&dir.join(CHECKPOINT_DIR))
}

/// Recomputes the accuracy matrix of `mode` from the checkpoint and cached
/// data. Reads only; nothing in the run directory is modified.
pub fn eval_run(dir: &Path, mode: EvalMode) -> Result<EvalReport> {
    let registry = load_run_registry(dir)?;
    let data_path = dir.join(DATA_FILE);
    if !data_path.exists() {
        return Err(EftError::MissingCheckpoint(data_path));
    }
    let data = load_cache(&data_path)?;
    let (til, cil, task) = recompute_matrices(&registry, &data)?;
    let recomputed = match mode {
        EvalMode::Til => til,
        EvalMode::Cil => cil,
        EvalMode::Task => task,
    };
    let stored_path = dir.join(mode.matrix_file());
    let stored = stored_path.exists().then(|| AccuracyMatrix::read_csv(&stored_path)).transpose()?;
    let probes_path = dir.join(PROBES_FILE);
    let probes_replay = probes_path.exists() && replay_probes(&registry, &read_probes(&probes_path)?)?;
    Ok(EvalReport { mode, recomputed, stored, probes_replay })
}

/// Average-accuracy curves read from a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Curves {
    pub til: Vec<f64>,
    pub cil: Vec<f64>,
}

pub fn read_curves(dir: &Path) -> Result<Curves> {
    let read = |mode: EvalMode| -> Result<Vec<f64>> {
        let p: PathBuf = dir.join(mode.matrix_file());
        if !p.exists() {
            return Err(EftError::MissingCheckpoint(p));
        }
        Ok(AccuracyMatrix::read_csv(&p)?.averages())
    };
    Ok(Curves {
        til: read(EvalMode::Til)?,
        cil: read(EvalMode::Cil)?,
    })
}
