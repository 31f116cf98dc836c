//! Artifact files: every report carries the config hash and seed in a
//! header line, every checkpoint in its container metadata, so `verify` can
//! re-derive and confirm them.

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use gazecloak_core::checkpoint::ContainerMeta;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub fn meta_for(cfg: &ExperimentConfig) -> ContainerMeta {
    ContainerMeta::generic(cfg.seed, cfg.hash())
}

/// Which slice of the config a checkpoint depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Training,
    Agent,
    Iteration,
}

pub fn stage_hash(cfg: &ExperimentConfig, stage: Stage) -> [u8; 32] {
    match stage {
        Stage::Training => cfg.training_hash(),
        Stage::Agent => cfg.agent_hash(),
        Stage::Iteration => cfg.iter_hash(),
    }
}

pub fn stage_meta(cfg: &ExperimentConfig, stage: Stage) -> ContainerMeta {
    ContainerMeta::generic(cfg.seed, stage_hash(cfg, stage))
}

/// A checkpoint is current when its metadata carries this config's seed and
/// the hash of the stage it belongs to.
pub fn stage_checkpoint_current(path: &Path, cfg: &ExperimentConfig, stage: Stage) -> bool {
    if !path.exists() {
        return false;
    }
    match gazecloak_core::checkpoint::read_container(BufReader::new(match File::open(path) {
        Ok(f) => f,
        Err(_) => return false,
    })) {
        Ok((meta, _)) => meta.config_hash == stage_hash(cfg, stage) && meta.seed == cfg.seed,
        Err(_) => false,
    }
}

/// Create a text artifact starting with the standard header comment.
pub fn create_report(path: &Path, cfg: &ExperimentConfig) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# config_hash={} seed={}", cfg.hash_hex(), cfg.seed)?;
    Ok(w)
}

/// Read the header of a text artifact.
pub fn read_report_header(path: &Path) -> CliResult<Option<(String, u64)>> {
    let file = File::open(path)?;
    let mut line = String::new();
    BufReader::new(file).read_line(&mut line)?;
    let line = line.trim();
    let Some(rest) = line.strip_prefix("# config_hash=") else {
        return Ok(None);
    };
    let mut parts = rest.split_whitespace();
    let hash = parts.next().unwrap_or("").to_string();
    let seed = parts
        .next()
        .and_then(|s| s.strip_prefix("seed="))
        .and_then(|s| s.parse().ok());
    Ok(seed.map(|s| (hash, s)))
}

/// Check whether a checkpoint exists and was produced under this config.

pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("config.resolved.toml")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn autoencoder(&self) -> PathBuf {
        self.checkpoints().join("autoencoder.gzck")
    }

    pub fn classifier(&self, task: &str) -> PathBuf {
        self.checkpoints().join(format!("classifier_{task}.gzck"))
    }

    pub fn agent_init(&self) -> PathBuf {
        self.checkpoints().join("agent_init")
    }

    pub fn iter_dir(&self, iteration: u32) -> PathBuf {
        self.root.join("iters").join(format!("iter_{iteration:02}"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn iterations_jsonl(&self) -> PathBuf {
        self.reports().join("iterations.jsonl")
    }

    pub fn adaptation_jsonl(&self) -> PathBuf {
        self.reports().join("adaptation.jsonl")
    }

    pub fn accuracy_csv(&self) -> PathBuf {
        self.reports().join("accuracy_table.csv")
    }

    pub fn accuracy_txt(&self) -> PathBuf {
        self.reports().join("accuracy_table.txt")
    }

    pub fn channel_importance_csv(&self) -> PathBuf {
        self.reports().join("channel_importance.csv")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

/// Write the resolved configuration with its hash header.
pub fn write_resolved_config(paths: &RunPaths, cfg: &ExperimentConfig) -> CliResult<()> {
    std::fs::create_dir_all(&paths.root)?;
    let mut w = create_report(&paths.resolved_config(), cfg)?;
    w.write_all(cfg.canonical_toml().as_bytes())?;
    Ok(())
}

/// Load a run directory's resolved config (for dp/transfer/report/verify).
pub fn load_resolved_config(root: &Path) -> CliResult<ExperimentConfig> {
    let path = RunPaths::new(root).resolved_config();
    let text = std::fs::read_to_string(&path).map_err(|e| {
        CliError::Config(format!(
            "no resolved config at {} ({e}); run `gazecloak run` first",
            path.display()
        ))
    })?;
    let body: String = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n");
    toml::from_str(&body).map_err(|e| CliError::Config(format!("invalid resolved config: {e}")))
}
