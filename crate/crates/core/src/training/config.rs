//! Run configuration: one TOML document with `[audio]`, `[degradation]`,
//! `[conditioning]`, `[model]`, `[optimizer]` and `[run]` sections. Every field
//! has a default; the echoed form written into a run directory spells all of
//! them out.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::Interpolation;
use crate::audio::MelConfig;
use crate::degradation::SnrSpec;
use crate::error::{CdtError, Result};
use crate::vcmodel::{ModelConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationConfig {
    pub snr_low_db: f64,
    pub snr_high_db: f64,
    /// Train on clean sources (plain autoencoding); overrides the SNR range.
    pub clean: bool,
    /// Noise manifests (`id <TAB> path`); empty means the built-in synthetic banks.
    pub train_noise_manifest: String,
    pub eval_noise_manifest: String,
    /// Length of each built-in synthetic noise.
    pub noise_seconds: f64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            snr_low_db: 0.0,
            snr_high_db: 20.0,
            clean: false,
            train_noise_manifest: String::new(),
            eval_noise_manifest: String::new(),
            noise_seconds: 4.0,
        }
    }
}

impl DegradationConfig {
    pub fn snr_spec(&self) -> Result<SnrSpec> {
        if self.clean {
            return Ok(SnrSpec::clean());
        }
        SnrSpec::new(self.snr_low_db, self.snr_high_db)
            .map_err(|e| CdtError::config("degradation.snr_low_db", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditioningConfig {
    pub variant: Variant,
    pub interpolation: Interpolation,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Conditioned {
                quality: crate::conditioning::CondMode::Frame,
                scene: crate::conditioning::CondMode::Frame,
            },
            interpolation: Interpolation::Nearest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            batch_size: 6,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(CdtError::config("optimizer.lr", "must be finite and non-negative"));
        }
        for (field, b) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(CdtError::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(CdtError::config("optimizer.weight_decay", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(CdtError::config("optimizer.batch_size", "must be positive"));
        }
        if !(self.eps > 0.0) {
            return Err(CdtError::config("optimizer.eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub train_manifest: String,
    pub valid_manifest: String,
    pub max_steps: u64,
    pub valid_every: u64,
    /// Validations without an improvement of at least `min_delta` before stopping.
    pub patience: u32,
    pub min_delta: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            train_manifest: String::new(),
            valid_manifest: String::new(),
            max_steps: 20_000,
            valid_every: 200,
            patience: 10,
            min_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub audio: MelConfig,
    pub degradation: DegradationConfig,
    pub conditioning: ConditioningConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub run: RunSection,
}

/// Deserializes one section. On failure each key is tried alone against the
/// defaults, so the error can name the offending `section.key`.
fn section<T: serde::de::DeserializeOwned + Default>(table: &toml::Table, name: &str) -> Result<T> {
    let Some(value) = table.get(name) else {
        return Ok(T::default());
    };
    let whole = value.clone().try_into::<T>();
    match whole {
        Ok(v) => Ok(v),
        Err(e) => {
            let mut field = name.to_string();
            if let toml::Value::Table(t) = value {
                for (k, v) in t {
                    let mut single = toml::Table::new();
                    single.insert(k.clone(), v.clone());
                    if toml::Value::Table(single).try_into::<T>().is_err() {
                        field = format!("{name}.{k}");
                        break;
                    }
                }
            }
            Err(CdtError::config(field, e.to_string().trim().to_string()))
        }
    }
}

const SECTIONS: [&str; 6] = ["audio", "degradation", "conditioning", "model", "optimizer", "run"];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CdtError::config("config", e.to_string().trim().to_string()))?;
        if let Some(k) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(CdtError::config(k.clone(), "unknown section"));
        }
        let cfg = RunConfig {
            audio: section(&table, "audio")?,
            degradation: section(&table, "degradation")?,
            conditioning: section(&table, "conditioning")?,
            model: section(&table, "model")?,
            optimizer: section(&table, "optimizer")?,
            run: section(&table, "run")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CdtError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| CdtError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.audio.validate()?;
        self.degradation.snr_spec()?;
        if !(self.degradation.noise_seconds > 0.0) {
            return Err(CdtError::config("degradation.noise_seconds", "must be positive"));
        }
        self.model_config().validate()?;
        self.optimizer.validate()?;
        if self.model.n_mels != self.audio.n_mels {
            return Err(CdtError::config(
                "model.n_mels",
                format!("{} differs from audio.n_mels {}", self.model.n_mels, self.audio.n_mels),
            ));
        }
        if self.run.valid_every == 0 {
            return Err(CdtError::config("run.valid_every", "must be positive"));
        }
        if !(self.run.min_delta >= 0.0) {
            return Err(CdtError::config("run.min_delta", "must be non-negative"));
        }
        Ok(())
    }

    /// Model configuration with the variant from `[conditioning]`.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.conditioning.variant,
            ..self.model.clone()
        }
    }

    pub fn variant(&self) -> Variant {
        self.conditioning.variant
    }

    /// Resolves manifest paths relative to `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |s: &mut String| {
            if !s.is_empty() && Path::new(s.as_str()).is_relative() {
                *s = base.join(&*s).to_string_lossy().into_owned();
            }
        };
        fix(&mut self.run.train_manifest);
        fix(&mut self.run.valid_manifest);
        fix(&mut self.degradation.train_noise_manifest);
        fix(&mut self.degradation.eval_noise_manifest);
    }

    pub fn train_manifest(&self) -> Result<PathBuf> {
        if self.run.train_manifest.is_empty() {
            return Err(CdtError::config("run.train_manifest", "is required"));
        }
        Ok(PathBuf::from(&self.run.train_manifest))
    }

    pub fn valid_manifest(&self) -> Result<PathBuf> {
        if self.run.valid_manifest.is_empty() {
            return Err(CdtError::config("run.valid_manifest", "is required"));
        }
        Ok(PathBuf::from(&self.run.valid_manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips_with_every_section() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        for section in ["[audio]", "[degradation]", "[conditioning]", "[model]", "[optimizer]", "[run]"] {
            assert!(text.contains(section), "{section} missing from\n{text}");
        }
        assert!(text.contains("lr = 5e-5") || text.contains("lr = 0.00005"), "{text}");
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_toml("[conditioning]\nvariant = \"none-none\"\n[optimizer]\nlr = 1e-3\n").unwrap();
        assert_eq!(cfg.variant(), Variant::Unconditioned);
        assert_eq!(cfg.optimizer.lr, 1e-3);
        assert_eq!(cfg.optimizer.batch_size, 6);
        assert_eq!(cfg.run.patience, 10);
    }

    #[test]
    fn errors_name_the_field() {
        let field = |t: &str| match RunConfig::from_toml(t) {
            Err(CdtError::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(field("[conditioning]\nvariant = \"fw-xx\"\n"), "conditioning.variant");
        assert_eq!(field("[optimizer]\nbeta1 = 1.5\n"), "optimizer.beta1");
        assert_eq!(field("[model]\nd_model = 30\nn_heads = 4\n"), "model.n_heads");
        assert_eq!(field("[optimizer]\nlearning_rate = 1.0\n"), "optimizer.learning_rate");
        assert_eq!(field("[model]\nd_model = \"big\"\n"), "model.d_model");
        assert_eq!(field("[trainer]\n"), "trainer");
        assert_eq!(field("[degradation]\nsnr_low_db = 30.0\n"), "degradation.snr_low_db");
    }
}
