use std::path::{Path, PathBuf};

use cotn::activation::ActivationMode;
use cotn::data::{CleanConfig, FeatureConfig, PipelineConfig, Schema, SplitRatios, WindowSpec};
use cotn::model::{AutoencoderConfig, ModelConfig};
use cotn::training::{LrSchedule, StagePlan, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// CSV input; the synthetic benchmark is generated when absent.
    pub path: Option<PathBuf>,
    pub schema: Schema,
    pub synthetic_len: usize,
    /// Spikes injected into the synthetic series, in standard deviations.
    pub spikes: usize,
    pub spike_magnitude: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            schema: Schema::Ett,
            synthetic_len: 2000,
            spikes: 0,
            spike_magnitude: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSection {
    pub enc_len: usize,
    /// Defaults to half the encoder length.
    pub label_len: Option<usize>,
    pub horizon: usize,
    pub stride: usize,
}

impl Default for WindowSection {
    fn default() -> Self {
        Self {
            enc_len: 96,
            label_len: None,
            horizon: 24,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    /// `gelu`, `gated:T` or `gated:T:lambda`.
    pub activation: String,
    pub distill: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_enc_layers: m.n_enc_layers,
            n_dec_layers: m.n_dec_layers,
            d_ff: m.d_ff,
            activation: m.activation.to_key(),
            distill: m.distill,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub w_forecast: f64,
    pub w_distill: f64,
    pub patience: usize,
    /// GELU epochs before switching to `model.activation`; 0 trains directly.
    pub pretrain_epochs: usize,
    /// Seeds 1..=trials; more than one writes a statistics summary.
    pub trials: usize,
    /// Activation of a paired baseline run over the same seeds.
    pub baseline: Option<String>,
    /// Down-weights windows the autoencoder reconstructs badly.
    pub anomaly_weighting: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            schedule: t.schedule,
            w_forecast: t.w_forecast,
            w_distill: t.w_distill,
            patience: t.patience,
            pretrain_epochs: 0,
            trials: 1,
            baseline: None,
            anomaly_weighting: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub lambda: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { lambda: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub data: DataSection,
    pub window: WindowSection,
    pub clean: CleanConfig,
    pub features: FeatureConfig,
    pub split: SplitRatios,
    pub model: ModelSection,
    pub train: TrainSection,
    pub anomaly: AutoencoderConfig,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            jobs: 1,
            data: DataSection::default(),
            window: WindowSection::default(),
            clean: CleanConfig::default(),
            features: FeatureConfig::default(),
            split: SplitRatios::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            anomaly: AutoencoderConfig::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Core settings derived from a validated [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Resolved {
    pub pipeline: PipelineConfig,
    pub spec: WindowSpec,
    pub activation: ActivationMode,
    pub train: TrainConfig,
    pub baseline: Option<TrainConfig>,
}

fn cfg_err(key: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("invalid `{key}`: {e}"))
}

fn parse_mode(key: &str, s: &str) -> Result<ActivationMode, CliError> {
    s.parse().map_err(|e| cfg_err(key, e))
}

impl RunConfig {
    /// Reads `path` (or defaults), applies `key.path=value` overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Runtime(anyhow::anyhow!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn spec(&self) -> WindowSpec {
        WindowSpec {
            enc_len: self.window.enc_len,
            label_len: self.window.label_len.unwrap_or(self.window.enc_len / 2),
            horizon: self.window.horizon,
            stride: self.window.stride,
        }
    }

    /// Model configuration for inputs with `n_features` columns.
    pub fn model_config(&self, n_features: usize, activation: ActivationMode) -> ModelConfig {
        let spec = self.spec();
        let m = &self.model;
        ModelConfig {
            n_features,
            n_targets: 1,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_enc_layers: m.n_enc_layers,
            n_dec_layers: m.n_dec_layers,
            d_ff: m.d_ff,
            enc_len: spec.enc_len,
            label_len: spec.label_len,
            horizon: spec.horizon,
            activation,
            distill: m.distill,
            ae_bottleneck: self.anomaly.bottleneck,
        }
    }

    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let spec = self.spec();
        spec.validate().map_err(|e| cfg_err("window", e))?;
        self.clean.validate().map_err(|e| cfg_err("clean", e))?;
        self.split.validate().map_err(|e| cfg_err("split", e))?;
        self.anomaly.validate().map_err(|e| cfg_err("anomaly", e))?;
        if self.data.path.is_none() && self.data.synthetic_len < 2 {
            return Err(cfg_err("data.synthetic_len", "need at least 2 rows"));
        }
        if self.data.spikes > 0 && self.data.path.is_some() {
            return Err(cfg_err("data.spikes", "only applies to the synthetic series"));
        }
        if self.train.trials == 0 {
            return Err(cfg_err("train.trials", "must be at least 1"));
        }
        if self.train.baseline.is_some() && self.train.trials < 2 {
            return Err(cfg_err("train.baseline", "needs train.trials >= 2"));
        }
        if !(0.0..=1.0).contains(&self.sweep.lambda) {
            return Err(cfg_err("sweep.lambda", "must lie in [0, 1]"));
        }
        let activation = parse_mode("model.activation", &self.model.activation)?;
        // the real feature count is only known after loading; 1 is enough for the shape checks
        self.model_config(1, activation)
            .validate()
            .map_err(|e| cfg_err("model", e))?;
        let plan = |mode| {
            if self.train.pretrain_epochs > 0 {
                StagePlan::WarmStart {
                    pretrain_epochs: self.train.pretrain_epochs,
                    final_mode: mode,
                }
            } else {
                StagePlan::Direct { activation: mode }
            }
        };
        let t = &self.train;
        let train = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            schedule: t.schedule,
            seed: self.seed,
            w_forecast: t.w_forecast,
            w_distill: t.w_distill,
            patience: t.patience,
            plan: plan(activation),
        };
        train.validate().map_err(|e| cfg_err("train", e))?;
        let baseline = match &t.baseline {
            Some(s) => Some(TrainConfig {
                plan: plan(parse_mode("train.baseline", s)?),
                ..train.clone()
            }),
            None => None,
        };
        Ok(Resolved {
            pipeline: PipelineConfig {
                clean: self.clean.clone(),
                features: self.features.clone(),
                split: self.split,
            },
            spec,
            activation,
            train,
            baseline,
        })
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_owned()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Usage(format!("empty key in `{spec}`")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_owned(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!(c.seed, 1);
        assert_eq!(c.spec().label_len, 48);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = RunConfig::load(None, &["train.epochs=3".into(), "model.activation=gelu".into()]).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.resolve().unwrap().activation, ActivationMode::Gelu);
        let e = RunConfig::load(None, &["train.epoch=3".into()]).unwrap_err();
        assert!(matches!(&e, CliError::Usage(m) if m.contains("epoch")), "{e:?}");
        assert!(matches!(RunConfig::load(None, &["model.activation=gated:9".into()]), Err(CliError::Usage(_))));
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::load(None, &["data.path=\"x.csv\"".into(), "window.label_len=10".into()]).unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}
