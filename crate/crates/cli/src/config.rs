use std::fs;
use std::path::{Path, PathBuf};

use prunenet::pruning::DEFAULT_THRESHOLD;
use prunenet::training::Hyperparams;
use serde::{Deserialize, Serialize};

use crate::PipelineError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl DataPaths {
    /// The four standard MNIST file names under `dir`.
    pub fn mnist_dir(dir: &Path) -> Self {
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    fn all(&self) -> [&PathBuf; 4] {
        [
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ]
    }

    fn all_mut(&mut self) -> [&mut PathBuf; 4] {
        [
            &mut self.train_images,
            &mut self.train_labels,
            &mut self.test_images,
            &mut self.test_labels,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ReviewMode {
    /// Remove every intersection-flagged image without asking.
    Auto,
    /// Block on the review service until a human finalizes.
    Serve,
}

/// Caps applied by `--smoke`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmokeLimits {
    pub pool_size: usize,
    pub test_size: usize,
    pub max_epochs: usize,
    pub k: usize,
}

impl Default for SmokeLimits {
    fn default() -> Self {
        Self {
            pool_size: 200,
            test_size: 200,
            max_epochs: 2,
            k: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReviewSettings {
    pub mode: ReviewMode,
    pub listen: String,
    /// Built review UI to serve at `/`.
    pub ui_dir: Option<PathBuf>,
    pub force_remove_undecided: bool,
}

impl Default for ReviewSettings {
    fn default() -> Self {
        Self {
            mode: ReviewMode::Auto,
            listen: "127.0.0.1:8080".to_string(),
            ui_dir: None,
            force_remove_undecided: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub data: DataPaths,
    pub output_dir: PathBuf,
    #[serde(flatten)]
    pub hyperparams: Hyperparams,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_threshold")]
    pub confidence_threshold: f64,
    #[serde(default)]
    pub review: ReviewSettings,
    #[serde(default)]
    pub smoke: SmokeLimits,
}

fn default_k() -> usize {
    5
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl PipelineConfig {
    pub fn new(data: DataPaths, output_dir: PathBuf) -> Self {
        Self {
            data,
            output_dir,
            hyperparams: Hyperparams::default(),
            k: default_k(),
            confidence_threshold: default_threshold(),
            review: ReviewSettings::default(),
            smoke: SmokeLimits::default(),
        }
    }

    /// Parses JSON, resolving relative paths against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig = serde_json::from_str(text)
            .map_err(|e| PipelineError::Config(format!("invalid config: {e}")))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in cfg.data.all_mut() {
            resolve(p);
        }
        resolve(&mut cfg.output_dir);
        if let Some(ui) = &mut cfg.review.ui_dir {
            resolve(ui);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        Self::from_json(&text, base)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.hyperparams
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.k < 2 {
            return Err(PipelineError::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(PipelineError::Config(format!(
                "confidence_threshold must lie in (0, 1], got {}",
                self.confidence_threshold
            )));
        }
        if self.smoke.k < 2 || self.smoke.max_epochs == 0 || self.smoke.pool_size < self.smoke.k {
            return Err(PipelineError::Config("smoke limits are unusable".to_string()));
        }
        Ok(())
    }

    /// Fails with the first data file that does not exist.
    pub fn check_data(&self) -> Result<(), PipelineError> {
        for p in self.data.all() {
            if !p.is_file() {
                return Err(PipelineError::Config(format!(
                    "data file not found: {}",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The settings that determine artifact contents.
    pub fn fingerprint(&self, smoke: bool) -> serde_json::Value {
        serde_json::json!({
            "data": self.data,
            "hyperparams": self.hyperparams,
            "k": self.k,
            "confidence_threshold": self.confidence_threshold,
            "smoke": if smoke { Some(&self.smoke) } else { None },
        })
    }
}
