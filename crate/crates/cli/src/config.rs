use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use stalkfusion::datapipe::{SplitSpec, SynthConfig};
use stalkfusion::model::{ArchitectureConfig, Variant};
use stalkfusion::pipeline::ScalerFit;
use stalkfusion::trainer::TrainConfig;

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "STALKFUSION_DATA_DIR";
pub const CONFIG_ECHO: &str = "config.toml";

/// Everything a command needs. File values are overridden by flags; the
/// top-level seed and image size are fanned out to every section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Falls back to `$STALKFUSION_DATA_DIR`, then `data`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub run_dir: PathBuf,
    pub seed: u64,
    /// Frame extent S; when unset it is read from the first frame on disk.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    pub variant: Variant,
    pub scaler_fit: ScalerFit,
    pub synth: SynthConfig,
    pub split: SplitSpec,
    pub model: ArchitectureConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: None,
            run_dir: PathBuf::from("runs/latest"),
            seed: 7,
            image_size: None,
            variant: Variant::Full,
            scaler_fit: ScalerFit::TrainOnly,
            synth: SynthConfig::default(),
            split: SplitSpec::default(),
            model: ArchitectureConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Resolves the data directory and pushes the shared seed and image size into each section.
    pub fn finalize(mut self) -> Self {
        if self.data_dir.is_none() {
            let dir = std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from);
            self.data_dir = Some(dir);
        }
        self.synth.seed = self.seed;
        self.split.seed = self.seed;
        self.train.seed = self.seed;
        if let Some(s) = self.image_size {
            self.synth.image_size = s;
            self.model.image_size = s;
        }
        self
    }

    pub fn data_dir(&self) -> &Path {
        self.data_dir.as_deref().unwrap_or(Path::new("data"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.data_dir().join("manifest.jsonl")
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let text = toml::to_string_pretty(self).context("serializing config")?;
        fs::write(dir.join(CONFIG_ECHO), text).with_context(|| format!("writing config into {}", dir.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_roundtrips() {
        let mut c = RunConfig {
            data_dir: Some("d".into()),
            image_size: Some(32),
            ..Default::default()
        }
        .finalize();
        c.train.patience = None;
        let text = toml::to_string_pretty(&c).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn seed_fans_out() {
        let c = RunConfig { seed: 11, ..Default::default() }.finalize();
        assert_eq!((c.synth.seed, c.split.seed, c.train.seed), (11, 11, 11));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
    }
}
