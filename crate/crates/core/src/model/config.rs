use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::activation::ActivationMode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_features: usize,
    pub n_targets: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub enc_len: usize,
    pub label_len: usize,
    pub horizon: usize,
    pub activation: ActivationMode,
    pub distill: bool,
    pub ae_bottleneck: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_features: 1,
            n_targets: 1,
            d_model: 32,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 1,
            d_ff: 64,
            enc_len: 96,
            label_len: 48,
            horizon: 24,
            activation: ActivationMode::gated(1),
            distill: true,
            ae_bottleneck: 8,
        }
    }
}

const KEYS: [&str; 13] = [
    "n_features",
    "n_targets",
    "d_model",
    "n_heads",
    "n_enc_layers",
    "n_dec_layers",
    "d_ff",
    "enc_len",
    "label_len",
    "horizon",
    "activation",
    "distill",
    "ae_bottleneck",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_features", self.n_features),
            ("n_targets", self.n_targets),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_ff", self.d_ff),
            ("enc_len", self.enc_len),
            ("horizon", self.horizon),
            ("ae_bottleneck", self.ae_bottleneck),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Argument(format!("{k} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Argument(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.label_len > self.enc_len {
            return Err(Error::Argument(format!(
                "label_len {} exceeds enc_len {}",
                self.label_len, self.enc_len
            )));
        }
        if self.distill && self.n_enc_layers > 1 {
            let need = 1usize
                .checked_shl((self.n_enc_layers - 1) as u32)
                .filter(|&n| n <= self.enc_len);
            if need.is_none() {
                return Err(Error::Argument(format!(
                    "enc_len {} is too short for {} distilled encoder layers",
                    self.enc_len, self.n_enc_layers
                )));
            }
        }
        self.activation.validate()
    }

    pub fn num_distill_layers(&self) -> usize {
        if self.distill {
            self.n_enc_layers - 1
        } else {
            0
        }
    }

    /// Encoder memory length: `ceil(L / 2^k)` after `k` distill layers.
    pub fn memory_len(&self) -> usize {
        (0..self.num_distill_layers()).fold(self.enc_len, |l, _| l.div_ceil(2))
    }

    pub fn dec_len(&self) -> usize {
        self.label_len + self.horizon
    }

    /// One `key=value` line per field, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let v = match k {
                "n_features" => self.n_features.to_string(),
                "n_targets" => self.n_targets.to_string(),
                "d_model" => self.d_model.to_string(),
                "n_heads" => self.n_heads.to_string(),
                "n_enc_layers" => self.n_enc_layers.to_string(),
                "n_dec_layers" => self.n_dec_layers.to_string(),
                "d_ff" => self.d_ff.to_string(),
                "enc_len" => self.enc_len.to_string(),
                "label_len" => self.label_len.to_string(),
                "horizon" => self.horizon.to_string(),
                "activation" => self.activation.to_key(),
                "distill" => self.distill.to_string(),
                _ => self.ae_bottleneck.to_string(),
            };
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Parses [`ModelConfig::to_text`] output; every key must be present exactly once.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("unknown key `{k}`"),
                });
            }
            if map.insert(k.to_owned(), (i + 1, v.trim().to_owned())).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate key `{k}`"),
                });
            }
        }
        let get = |k: &str| {
            map.get(k).ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("missing key `{k}`"),
            })
        };
        let num = |k: &str| -> Result<usize> {
            let (line, v) = get(k)?;
            v.parse().map_err(|_| Error::Parse {
                line: *line,
                msg: format!("`{k}`: `{v}` is not a count"),
            })
        };
        let (dl, dv) = get("distill")?;
        let distill = dv.parse().map_err(|_| Error::Parse {
            line: *dl,
            msg: format!("`distill`: `{dv}` is not a boolean"),
        })?;
        let cfg = ModelConfig {
            n_features: num("n_features")?,
            n_targets: num("n_targets")?,
            d_model: num("d_model")?,
            n_heads: num("n_heads")?,
            n_enc_layers: num("n_enc_layers")?,
            n_dec_layers: num("n_dec_layers")?,
            d_ff: num("d_ff")?,
            enc_len: num("enc_len")?,
            label_len: num("label_len")?,
            horizon: num("horizon")?,
            activation: get("activation")?.1.parse()?,
            distill,
            ae_bottleneck: num("ae_bottleneck")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::default();
        c.activation = ActivationMode::Gated {
            type_id: 3,
            lambda: 0.3,
        };
        let back = ModelConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(ModelConfig::from_text("d_model=4\n").is_err());
        let bad = c.to_text().replace("d_model=32", "d_model=30");
        assert!(ModelConfig::from_text(&bad).is_err());
        let unknown = format!("{}colour=blue\n", c.to_text());
        assert!(ModelConfig::from_text(&unknown).is_err());
    }

    #[test]
    fn validation_rules() {
        let mut c = ModelConfig::default();
        c.validate().unwrap();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.horizon = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig {
            enc_len: 3,
            label_len: 1,
            n_enc_layers: 3,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        c.enc_len = 4;
        c.validate().unwrap();
        c.distill = false;
        c.enc_len = 1;
        c.validate().unwrap();
    }

    #[test]
    fn memory_lengths() {
        let c = |l, n| ModelConfig {
            enc_len: l,
            label_len: 1,
            n_enc_layers: n,
            ..ModelConfig::default()
        };
        assert_eq!(c(96, 3).memory_len(), 24);
        assert_eq!(c(7, 2).memory_len(), 4);
        assert_eq!(c(7, 3).memory_len(), 2);
        assert_eq!(c(48, 1).memory_len(), 48);
    }
}
