use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::settings::{Resolved, Settings};
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESOLVED_FILE: &str = "resolved.conf";

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Description of one run, written when it starts and rewritten when it ends.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub seed: Option<u64>,
    pub config_file: Option<PathBuf>,
    pub config: BTreeMap<String, Resolved>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub timings: Vec<StageTiming>,
    /// `running`, `ok` or the error message.
    pub status: String,
    /// Peak resident memory of the process, when the platform reports it.
    pub peak_rss_bytes: Option<u64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, serde_json::Value>,
}

pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    stage_start: Option<(String, Instant)>,
}

impl Run {
    pub fn start(command: &str, argv: &[String], dir: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(|e| CliError::Validation(format!("cannot create {}: {e}", dir.display())))?;
        let run = Self {
            dir,
            manifest: RunManifest {
                command: command.to_string(),
                argv: argv.to_vec(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed: None,
                config_file: None,
                config: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                timings: Vec::new(),
                status: "running".into(),
                peak_rss_bytes: None,
                notes: BTreeMap::new(),
            },
            stage_start: None,
        };
        run.write()?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.manifest.inputs.insert(name.into(), path.to_path_buf());
    }

    pub fn output(&mut self, name: &str, file: &str) -> PathBuf {
        let p = self.path(file);
        self.manifest.outputs.insert(name.into(), p.clone());
        p
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        if let Ok(v) = serde_json::to_value(value) {
            self.manifest.notes.insert(key.into(), v);
        }
    }

    /// Starts timing `stage`, closing the previous one.
    pub fn stage(&mut self, stage: &str) {
        self.end_stage();
        self.stage_start = Some((stage.to_string(), Instant::now()));
    }

    fn end_stage(&mut self) {
        if let Some((stage, t)) = self.stage_start.take() {
            self.manifest.timings.push(StageTiming {
                stage,
                seconds: t.elapsed().as_secs_f64(),
            });
        }
    }

    pub fn record_settings(&mut self, settings: &Settings) -> Result<(), CliError> {
        self.manifest.config = settings.resolved().clone();
        self.manifest.config_file = settings.config_path.clone();
        write_file(&self.path(RESOLVED_FILE), settings.to_config_text().as_bytes())?;
        self.write()
    }

    pub fn write(&self) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Validation(e.to_string()))?;
        write_file(&self.path(MANIFEST_FILE), json.as_bytes())
    }

    pub fn finish(mut self, outcome: &Result<(), CliError>) -> Result<(), CliError> {
        self.end_stage();
        self.manifest.status = match outcome {
            Ok(()) => "ok".into(),
            Err(e) => e.to_string(),
        };
        self.manifest.peak_rss_bytes = peak_rss_bytes();
        self.write()
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
}

/// High-water mark of resident memory, from `/proc/self/status` on Linux.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}
