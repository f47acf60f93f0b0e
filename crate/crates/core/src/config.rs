//! Pipeline configuration file and run provenance.
//!
//! One TOML file drives every subcommand. Relative paths in it are resolved
//! against the file's directory. A run writes `provenance.toml` next to its
//! outputs: the fully resolved config plus a `[run]` table, which is itself a
//! valid config for repeating the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compositor::{CompositionConfig, Preset};
use crate::emitters::{ClassOrder, DatasetFormat};

pub const PROVENANCE_FILE: &str = "provenance.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Source manifest (JSON).
    pub manifest: Option<PathBuf>,
    /// Center annotations as CSV, attached to the manifest.
    pub centers_csv: Option<PathBuf>,
    /// Box annotations as CSV, attached to the manifest.
    pub boxes_csv: Option<PathBuf>,
    /// Root for image paths in the manifest; defaults to its directory.
    pub images_root: Option<PathBuf>,
    pub size_table: Option<PathBuf>,
    pub pool_cache: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmitterConfig {
    pub format: DatasetFormat,
    pub class_order: ClassOrder,
}

impl Default for EmitterConfig {
    fn default() -> Self {
        EmitterConfig {
            format: DatasetFormat::YoloTxt,
            class_order: ClassOrder::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { test_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    pub synthetic: Option<PathBuf>,
    pub real: Option<PathBuf>,
    pub real_fraction: Option<f64>,
}

/// What produced a provenance file. Ignored when the file is used as input,
/// except that `count` fills in a missing top-level count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every random stream of the run derives from it.
    pub seed: u64,
    /// Number of images for `synth`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub count: Option<u64>,
    /// Used when `[composition]` is absent.
    pub preset: Preset,
    #[serde(default)]
    pub paths: Paths,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub composition: Option<CompositionConfig>,
    #[serde(default)]
    pub emitter: EmitterConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub mix: MixConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub run: Option<RunRecord>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            count: None,
            preset: Preset::Detect416,
            paths: Paths::default(),
            composition: None,
            emitter: EmitterConfig::default(),
            split: SplitConfig::default(),
            mix: MixConfig::default(),
            run: None,
        }
    }
}

fn absolutize(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Parse a config file, making its paths absolute.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text, path)?;
        let base = std::fs::canonicalize(path)
            .ok()
            .and_then(|p| p.parent().map(Path::to_path_buf))
            .unwrap_or_default();
        config.resolve_paths(&base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.manifest,
            &mut p.centers_csv,
            &mut p.boxes_csv,
            &mut p.images_root,
            &mut p.size_table,
            &mut p.pool_cache,
            &mut p.output,
            &mut self.mix.synthetic,
            &mut self.mix.real,
        ] {
            absolutize(base, slot);
        }
    }

    pub fn composition(&self) -> CompositionConfig {
        self.composition
            .clone()
            .unwrap_or_else(|| CompositionConfig::preset(self.preset))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.composition()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("composition: {e}")))?;
        if !(0.0..=1.0).contains(&self.split.test_fraction) {
            return Err(ConfigError::Invalid(format!(
                "split.test_fraction {} outside [0, 1]",
                self.split.test_fraction
            )));
        }
        if let Some(f) = self.mix.real_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(ConfigError::Invalid(format!(
                    "mix.real_fraction {f} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn require<'a>(
        &self,
        path: &'a Option<PathBuf>,
        key: &str,
    ) -> Result<&'a Path, ConfigError> {
        path.as_deref().ok_or_else(|| {
            ConfigError::Invalid(format!("missing {key} (set it in the config or by flag)"))
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Resolved config with a run record, for writing beside outputs.
    pub fn provenance(&self, subcommand: &str, workers: usize) -> String {
        let mut p = self.clone();
        if p.composition.is_none() {
            p.composition = Some(self.composition());
        }
        p.run = Some(RunRecord {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            workers,
        });
        p.to_toml()
    }
}
