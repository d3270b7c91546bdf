use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use crate::activation::{Gelu, ScalarActivation};
use crate::error::{Error, Result};
use crate::tensor::{Adam, Graph, ParamStore, Tensor, Var};

pub const AE_PARAMS_FILE: &str = "ae.bin";
pub const AE_META_FILE: &str = "ae.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Percentile of training step errors used as the weighting threshold.
    pub percentile: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            bottleneck: 8,
            epochs: 150,
            lr: 3e-3,
            batch_size: 32,
            percentile: 95.0,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.bottleneck == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Argument("autoencoder sizes, epochs and batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..=100.0).contains(&self.percentile) {
            return Err(Error::Argument("autoencoder lr must be positive and percentile in [0, 100]".into()));
        }
        Ok(())
    }
}

/// Per-step reconstruction errors of one window and the derived sample weight.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyScore {
    pub errors: Vec<f64>,
    pub weight: f64,
}

impl AnomalyScore {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    /// Step with the largest error; the first one on ties.
    pub fn argmax_step(&self) -> usize {
        let m = self.max_error();
        self.errors.iter().position(|&e| e == m).unwrap_or(0)
    }
}

/// `1 / (1 + max_error / tau)`.
pub fn sample_weight(max_error: f64, tau: f64) -> f64 {
    1.0 / (1.0 + max_error / tau)
}

/// Linear-interpolated percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Two dense layers down to the bottleneck and two back up, over flattened windows.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    steps: usize,
    features: usize,
    cfg: AutoencoderConfig,
    store: ParamStore,
    layers: [Linear; 4],
    tau: Option<f64>,
}

impl Autoencoder {
    pub fn new(steps: usize, features: usize, cfg: AutoencoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if steps == 0 || features == 0 {
            return Err(Error::Argument("autoencoder input must be non-empty".into()));
        }
        let n = steps * features;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layers = [
            Linear::init(&mut store, &mut rng, "ae.enc1", n, cfg.hidden),
            Linear::init(&mut store, &mut rng, "ae.enc2", cfg.hidden, cfg.bottleneck),
            Linear::init(&mut store, &mut rng, "ae.dec1", cfg.bottleneck, cfg.hidden),
            Linear::init(&mut store, &mut rng, "ae.dec2", cfg.hidden, n),
        ];
        Ok(Self {
            steps,
            features,
            cfg,
            store,
            layers,
            tau: None,
        })
    }

    pub fn tau(&self) -> Option<f64> {
        self.tau
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn input_shape(&self) -> [usize; 2] {
        [self.steps, self.features]
    }

    fn reconstruct_on(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let act: Arc<dyn ScalarActivation> = Arc::new(Gelu);
        let h = self.layers[0].forward(g, &self.store, x)?;
        let h = g.activation(h, &act);
        let z = self.layers[1].forward(g, &self.store, h)?;
        let h = self.layers[2].forward(g, &self.store, z)?;
        let h = g.activation(h, &act);
        self.layers[3].forward(g, &self.store, h)
    }

    fn flatten(&self, windows: &[&Tensor]) -> Result<Tensor> {
        let n = self.steps * self.features;
        let mut data = Vec::with_capacity(windows.len() * n);
        for w in windows {
            if w.shape() != self.input_shape() {
                return Err(Error::shape(
                    "autoencoder",
                    format!("expected {:?}, got {:?}", self.input_shape(), w.shape()),
                ));
            }
            data.extend_from_slice(w.data());
        }
        Tensor::matrix(windows.len(), n, data)
    }

    /// Trains on `windows` and fixes the threshold from their step errors.
    /// Returns the mean training loss of every epoch.
    pub fn fit(&mut self, windows: &[&Tensor], seed: u64) -> Result<Vec<f64>> {
        if windows.is_empty() {
            return Err(Error::Argument("autoencoder needs at least one training window".into()));
        }
        let x_all = self.flatten(windows)?;
        let n = self.steps * self.features;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt = Adam::new(&self.store);
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let mut history = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            let lr = crate::tensor::cosine_lr(self.cfg.lr, epoch, self.cfg.epochs);
            let mut total = 0.0;
            for chunk in order.chunks(self.cfg.batch_size) {
                let mut data = Vec::with_capacity(chunk.len() * n);
                for &i in chunk {
                    data.extend_from_slice(x_all.row(i));
                }
                let xb = Tensor::matrix(chunk.len(), n, data)?;
                let mut g = Graph::new();
                let x = g.constant(xb);
                let y = self.reconstruct_on(&mut g, x)?;
                let loss = g.mse(y, x)?;
                let lv = g.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::Diverged { epoch, loss: lv });
                }
                total += lv * chunk.len() as f64;
                let grads = g.backward(loss)?.for_store(&self.store);
                opt.step(&mut self.store, &grads, lr)?;
            }
            history.push(total / windows.len() as f64);
        }
        let mut errs = Vec::with_capacity(windows.len() * self.steps);
        for w in windows {
            errs.extend(self.raw_step_errors(w)?);
        }
        self.tau = Some(percentile(&errs, self.cfg.percentile).max(f64::MIN_POSITIVE));
        Ok(history)
    }

    fn raw_step_errors(&self, x: &Tensor) -> Result<Vec<f64>> {
        let xb = self.flatten(&[x])?;
        let mut g = Graph::new();
        let xv = g.constant(xb);
        let y = self.reconstruct_on(&mut g, xv)?;
        let r = g.value(y).data();
        let f = self.features;
        Ok((0..self.steps)
            .map(|t| {
                (0..f)
                    .map(|c| {
                        let d = r[t * f + c] - x.data()[t * f + c];
                        d * d
                    })
                    .sum::<f64>()
                    / f as f64
            })
            .collect())
    }

    /// Per-step squared error (feature mean) and the sample weight.
    pub fn score(&self, x: &Tensor) -> Result<AnomalyScore> {
        let tau = self
            .tau
            .ok_or_else(|| Error::State("autoencoder has not been trained".into()))?;
        let errors = self.raw_step_errors(x)?;
        let m = errors.iter().copied().fold(0.0, f64::max);
        Ok(AnomalyScore {
            errors,
            weight: sample_weight(m, tau),
        })
    }

    /// Writes `ae.bin` and a `key=value` metadata file into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tau = self
            .tau
            .ok_or_else(|| Error::State("autoencoder has not been trained".into()))?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join(AE_PARAMS_FILE))?;
        let meta = format!(
            "steps={}\nfeatures={}\nhidden={}\nbottleneck={}\ntau={:.16e}\n",
            self.steps, self.features, self.cfg.hidden, self.cfg.bottleneck, tau
        );
        let p = dir.join(AE_META_FILE);
        fs::write(&p, meta).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(AE_META_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut kv = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            kv.insert(k.trim().to_owned(), v.trim().to_owned());
        }
        let get = |k: &str| -> Result<&String> {
            kv.get(k).ok_or_else(|| Error::Format(format!("autoencoder metadata lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Format(format!("autoencoder `{k}` is not a count")))
        };
        let tau: f64 = get("tau")?
            .parse()
            .map_err(|_| Error::Format("autoencoder `tau` is not a number".into()))?;
        let cfg = AutoencoderConfig {
            hidden: num("hidden")?,
            bottleneck: num("bottleneck")?,
            ..AutoencoderConfig::default()
        };
        let mut ae = Autoencoder::new(num("steps")?, num("features")?, cfg, 0)?;
        let stored = ParamStore::load(&dir.join(AE_PARAMS_FILE))?;
        ae.store
            .copy_from(&stored)
            .map_err(|_| Error::Format("autoencoder parameters do not match its metadata".into()))?;
        ae.tau = Some(tau);
        Ok(ae)
    }
}
