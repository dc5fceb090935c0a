//! Where artifacts live under the artifact root.

use std::path::{Path, PathBuf};

use teso_core::synthdata::Split;

/// Environment variable naming the artifact root.
pub const ROOT_ENV: &str = "TESO_HOME";
pub const DEFAULT_ROOT: &str = "artifacts";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn from_env() -> Self {
        Self::new(std::env::var_os(ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT)))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data_dir().join("manifest.json")
    }

    pub fn split_dir(&self, split: Split) -> PathBuf {
        self.data_dir().join(split.name())
    }

    pub fn cues_dir(&self) -> PathBuf {
        self.root.join("cues")
    }

    pub fn templates_dir(&self) -> PathBuf {
        self.root.join("templates")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.runs_dir().join(name)
    }

    pub fn log_file(&self) -> PathBuf {
        self.root.join("teso.log")
    }
}

/// Checkpoint file inside a run directory.
pub fn checkpoint_path(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoint.json")
}
