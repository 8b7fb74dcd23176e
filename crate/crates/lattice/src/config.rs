//! Run configuration: one TOML file covering the model, the dataset, the
//! training schedule, metric settings, and the output directory.
//!
//! Every field has a default (the bundled quickstart values), so a config
//! file only states what it overrides. `RunConfig::resolve` fills the
//! remaining derived pieces (LoRA spec, tap blocks) and validates the
//! whole config before any work starts; unknown keys are rejected so
//! typos fail fast instead of silently using a default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::AdapterConfig;
use crate::encoder::{EncoderConfig, LoraSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Environment variable naming the dataset/artifact cache directory.
pub const CACHE_DIR_ENV: &str = "LATTICE_CACHE_DIR";

/// Cache directory: `$LATTICE_CACHE_DIR`, or `.lattice-cache` under the
/// current directory.
pub fn cache_dir() -> PathBuf {
    match std::env::var_os(CACHE_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(".lattice-cache"),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// "synthetic" (generated shapes) or "manifest" (external files).
    pub source: String,
    pub num_samples: usize,
    pub num_classes: usize,
    pub image_size: usize,
    /// Seed for generation and splitting, independent of the training
    /// seed so the same data serves several training runs.
    pub seed: u64,
    /// Manifest path when source = "manifest".
    pub manifest: Option<PathBuf>,
    pub fractions: (f64, f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "synthetic".into(),
            num_samples: 800,
            num_classes: 4,
            image_size: 32,
            seed: 7,
            manifest: None,
            fractions: (0.75, 0.125, 0.125),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match self.source.as_str() {
            "synthetic" => {
                if self.num_samples < 10 {
                    return Err(Error::Config(format!(
                        "data.num_samples must be at least 10, got {}",
                        self.num_samples
                    )));
                }
            }
            "manifest" => {
                if self.manifest.is_none() {
                    return Err(Error::Config(
                        "data.manifest is required when data.source = \"manifest\"".into(),
                    ));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "data.source must be \"synthetic\" or \"manifest\", got \"{other}\""
                )))
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "data.num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "data.image_size must be at least 16, got {}",
                self.image_size
            )));
        }
        let (a, b, c) = self.fractions;
        if (a + b + c - 1.0).abs() > 1e-9 || a <= 0.0 || b <= 0.0 || c <= 0.0 {
            return Err(Error::Config(format!(
                "data.fractions must be positive and sum to 1, got ({a}, {b}, {c})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Binarization threshold for IoU.
    pub theta: f64,
    /// Insertion/deletion curve segments ("exhaustive" on the CLI maps to
    /// the pixel count).
    pub num_steps: usize,
    /// Riemann steps for integrated gradients.
    pub ig_steps: usize,
    /// Seed for the random-map control explainer.
    pub random_seed: u64,
    pub explainers: Vec<String>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            theta: 0.5,
            num_steps: 100,
            ig_steps: 16,
            random_seed: 1234,
            explainers: vec!["ala".into(), "uniform".into(), "random".into()],
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!(
                "metrics.theta must be in (0,1), got {}",
                self.theta
            )));
        }
        if self.num_steps < 2 {
            return Err(Error::Config(format!(
                "metrics.num_steps must be at least 2, got {}",
                self.num_steps
            )));
        }
        if self.ig_steps == 0 {
            return Err(Error::Config("metrics.ig_steps must be at least 1".into()));
        }
        if self.explainers.is_empty() {
            return Err(Error::Config("metrics.explainers must name at least one explainer".into()));
        }
        for name in &self.explainers {
            crate::saliency::Explainer::parse(name, self.ig_steps, self.random_seed)
                .map_err(|e| Error::Config(format!("metrics.explainers: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs/quickstart") }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a TOML file, fill derived defaults, and validate.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.resolve()
    }

    /// Fill derived fields (tap blocks, LoRA spec under the ablation
    /// toggles) and validate everything, returning the resolved config.
    pub fn resolve(mut self) -> Result<RunConfig> {
        if self.adapter.tap_blocks.is_empty() {
            self.adapter.tap_blocks = AdapterConfig::default_tap_blocks(
                self.adapter.num_taps,
                self.encoder.num_blocks,
            );
        }
        if self.train.ablation.use_lora {
            let mut lora = self
                .encoder
                .lora
                .take()
                .unwrap_or_else(|| LoraSpec::default_for(self.encoder.num_blocks));
            if lora.target_blocks.is_empty() {
                lora.target_blocks =
                    LoraSpec::default_for(self.encoder.num_blocks).target_blocks;
            }
            self.encoder.lora = Some(lora);
        } else {
            self.encoder.lora = None;
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.metrics.validate()?;
        if self.encoder.image_size != (self.data.image_size, self.data.image_size) {
            return Err(Error::Config(format!(
                "encoder.image_size {:?} must match data.image_size {} (square)",
                self.encoder.image_size, self.data.image_size
            )));
        }
        self.model_config()?.validate()?;
        if self.output.dir.as_os_str().is_empty() {
            return Err(Error::Config("output.dir must not be empty".into()));
        }
        Ok(())
    }

    /// The model built by this config, with the ablation toggles applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            encoder: self.encoder.clone(),
            adapter: self.adapter.clone(),
            num_classes: self.data.num_classes,
            inject_taps: self.train.ablation.use_taps,
        })
    }

    /// The resolved config as pretty TOML (what `--print-config` shows).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("cannot render config: {e}")))
    }

    /// Hash of the resolved config, recorded in artifact provenance.
    pub fn sha256(&self) -> Result<String> {
        let json = serde_json::to_vec(self)
            .map_err(|e| Error::Internal(format!("cannot encode config: {e}")))?;
        Ok(crate::params::hex(&Sha256::digest(&json)))
    }

    /// Generate or load the configured dataset and split it.
    pub fn load_dataset(&self) -> Result<crate::data::DatasetSplit> {
        let samples = match self.data.source.as_str() {
            "synthetic" => crate::data::synth_shapes(
                self.data.num_samples,
                self.data.num_classes,
                self.data.image_size,
                self.data.seed,
            )?,
            "manifest" => {
                let manifest = self.data.manifest.as_ref().expect("validated");
                let (samples, report) =
                    crate::data::load_external(manifest, self.data.image_size)?;
                for (line, err) in &report.failures {
                    log::warn!("manifest line {line}: {err}");
                }
                let found = crate::data::num_classes_of(&samples);
                if found > self.data.num_classes {
                    return Err(Error::Input(format!(
                        "manifest labels imply {found} classes but data.num_classes is {}",
                        self.data.num_classes
                    )));
                }
                samples
            }
            _ => unreachable!("validated"),
        };
        crate::data::split(samples, self.data.fractions, self.data.seed)
    }
}

/// The bundled quickstart configuration (also shipped as a TOML file at
/// the repository root).
pub fn quickstart() -> RunConfig {
    RunConfig::default().resolve().expect("quickstart config is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quickstart_resolves_and_builds_a_model() {
        let cfg = quickstart();
        assert!(!cfg.adapter.tap_blocks.is_empty());
        assert!(cfg.encoder.lora.is_some());
        let model_cfg = cfg.model_config().unwrap();
        model_cfg.validate().unwrap();
        assert_eq!(model_cfg.num_classes, 4);
        assert!(model_cfg.inject_taps);
    }

    #[test]
    fn empty_toml_equals_quickstart() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.sha256().unwrap(), quickstart().sha256().unwrap());
    }

    #[test]
    fn toml_round_trip_preserves_the_config() {
        let cfg = quickstart();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.sha256().unwrap(), back.sha256().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[train]\nlerning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("lerning_rate"), "{err}");
    }

    #[test]
    fn field_level_validation_messages() {
        let err = RunConfig::from_toml("[data]\nnum_classes = 1\n").unwrap_err();
        assert!(err.to_string().contains("num_classes"), "{err}");
        let err = RunConfig::from_toml("[metrics]\ntheta = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
        let err = RunConfig::from_toml("[data]\nsource = \"webdataset\"\n").unwrap_err();
        assert!(err.to_string().contains("source"), "{err}");
        let err =
            RunConfig::from_toml("[data]\nimage_size = 48\n").unwrap_err();
        assert!(err.to_string().contains("image_size"), "{err}");
    }

    #[test]
    fn ablation_toggles_reshape_the_model_config() {
        let cfg = RunConfig::from_toml(
            "[train.ablation]\nuse_lora = false\nuse_taps = false\n",
        )
        .unwrap();
        assert!(cfg.encoder.lora.is_none());
        let model_cfg = cfg.model_config().unwrap();
        assert!(!model_cfg.inject_taps);
        assert!(model_cfg.encoder.lora.is_none());

        let on = RunConfig::from_toml("").unwrap();
        assert!(on.model_config().unwrap().encoder.lora.is_some());
    }

    #[test]
    fn lora_override_survives_resolution() {
        let cfg = RunConfig::from_toml(
            "[encoder.lora]\nrank = 2\ntarget_blocks = [1, 3]\ntarget_projections = [\"query\"]\nscaling = 0.5\n",
        )
        .unwrap();
        let lora = cfg.encoder.lora.as_ref().unwrap();
        assert_eq!(lora.rank, 2);
        assert_eq!(lora.target_blocks, vec![1, 3]);
        assert_eq!(lora.scaling, 0.5);
    }

    #[test]
    fn synthetic_dataset_loads_with_configured_split() {
        let mut cfg = quickstart();
        cfg.data.num_samples = 40;
        let split = cfg.load_dataset().unwrap();
        assert_eq!(split.train.len(), 30);
        assert_eq!(split.val.len(), 5);
        assert_eq!(split.test.len(), 5);
    }

    #[test]
    fn cache_dir_respects_environment() {
        // No other test touches this variable, so the mutation is safe
        // even under the parallel test runner.
        std::env::set_var(CACHE_DIR_ENV, "/tmp/lattice-test-cache");
        assert_eq!(cache_dir(), PathBuf::from("/tmp/lattice-test-cache"));
        std::env::remove_var(CACHE_DIR_ENV);
        assert_eq!(cache_dir(), PathBuf::from(".lattice-cache"));
    }
}
