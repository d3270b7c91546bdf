//! Training loops, forecast metrics, the oscillator-type sweep and multi-trial statistics.

mod metrics;
mod stats;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{evaluate, mae, mse, SplitMetrics};
pub use stats::{
    multi_trial, paired_trials, summarize, sweep_types, MetricSummary, PairedComparison, StatsSummary, SweepEntry,
    SweepResult,
};

use crate::activation::ActivationMode;
use crate::data::{NormStats, Prepared, Window};
use crate::error::{Error, Result};
use crate::model::{Autoencoder, AutoencoderConfig, AnomalyScore, Cotn, ModelConfig};
use crate::tensor::{cosine_lr, Adam, Graph, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StagePlan {
    Direct { activation: ActivationMode },
    WarmStart { pretrain_epochs: usize, final_mode: ActivationMode },
}

impl StagePlan {
    pub fn final_mode(&self) -> ActivationMode {
        match *self {
            StagePlan::Direct { activation } => activation,
            StagePlan::WarmStart { final_mode, .. } => final_mode,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            StagePlan::Direct { activation } => format!("direct:{}", activation.to_key()),
            StagePlan::WarmStart {
                pretrain_epochs,
                final_mode,
            } => format!("warm_start:{pretrain_epochs}:{}", final_mode.to_key()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Epochs of the final stage.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub w_forecast: f64,
    pub w_distill: f64,
    /// Epochs without a new best validation loss before a stage stops.
    pub patience: usize,
    pub plan: StagePlan,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            schedule: LrSchedule::Cosine,
            seed: 1,
            w_forecast: 1.0,
            w_distill: 0.05,
            patience: 10,
            plan: StagePlan::Direct {
                activation: ActivationMode::gated(1),
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Argument("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Argument(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.w_forecast >= 0.0) || !(self.w_distill >= 0.0) || self.w_forecast + self.w_distill == 0.0 {
            return Err(Error::Argument("loss weights must be non-negative and not both zero".into()));
        }
        if self.patience == 0 {
            return Err(Error::Argument("patience must be at least 1".into()));
        }
        self.plan.final_mode().validate()
    }
}

/// Windowed splits plus the statistics needed to undo normalization.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
    pub stats: NormStats,
}

impl From<Prepared> for TrainData {
    fn from(p: Prepared) -> Self {
        Self {
            train: p.splits.train.windows,
            val: p.splits.val.windows,
            test: p.splits.test.windows,
            stats: p.stats,
        }
    }
}

impl TrainData {
    fn check(&self) -> Result<()> {
        for (name, s) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if s.is_empty() {
                return Err(Error::Argument(format!("{name} split has no windows")));
            }
        }
        Ok(())
    }
}

/// Fits the reconstruction scorer on the training encoder windows and
/// stores each training window's weight. Returns the scorer and the scores.
pub fn apply_anomaly_weights(
    data: &mut TrainData,
    cfg: &AutoencoderConfig,
    seed: u64,
) -> Result<(Autoencoder, Vec<AnomalyScore>)> {
    let first = data
        .train
        .first()
        .ok_or_else(|| Error::Argument("train split has no windows".into()))?;
    let [steps, feats] = [first.enc.rows(), first.enc.cols()];
    let mut ae = Autoencoder::new(steps, feats, cfg.clone(), seed)?;
    let xs: Vec<&crate::tensor::Tensor> = data.train.iter().map(|w| &w.enc).collect();
    ae.fit(&xs, seed)?;
    let mut scores = Vec::with_capacity(data.train.len());
    for w in data.train.iter_mut() {
        let s = ae.score(&w.enc)?;
        w.weight = s.weight;
        scores.push(s);
    }
    Ok((ae, scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub initial_train_loss: f64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl StageResult {
    /// First epoch (1-based) whose validation loss is within 1% of the best.
    pub fn epochs_to_convergence(&self) -> usize {
        let bar = self.best_val_loss * 1.01;
        self.history
            .iter()
            .find(|r| r.val_loss <= bar)
            .map_or(self.history.len(), |r| r.epoch)
    }
}

/// Weighted training objective over `windows`, accumulated in index order.
pub fn objective(model: &Cotn, windows: &[Window], cfg: &TrainConfig) -> Result<f64> {
    let mut per = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&Window> = chunk.iter().collect();
        let mut g = Graph::new();
        model.loss_on(model.params(), &mut g, &refs, cfg.w_forecast, cfg.w_distill, Some(&mut per))?;
    }
    Ok(weighted_mean(windows, &per))
}

fn weighted_mean(windows: &[Window], per: &[f64]) -> f64 {
    let wsum: f64 = windows.iter().map(|w| w.weight).sum();
    windows.iter().zip(per).map(|(w, l)| w.weight * l).sum::<f64>() / wsum
}

fn validation_loss(model: &Cotn, val: &[Window]) -> Result<f64> {
    let mut total = 0.0;
    for w in val {
        let y = model.forecast(&w.enc, &w.dec)?;
        total += mse(&y, &w.target)?;
    }
    Ok(total / val.len() as f64)
}

/// Trains `model` under `mode` for up to `epochs`. The parameters with the
/// lowest validation loss are restored at the end.
pub fn train_stage(
    model: &mut Cotn,
    data: &TrainData,
    cfg: &TrainConfig,
    mode: ActivationMode,
    epochs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StageResult> {
    cfg.validate()?;
    data.check()?;
    if model.activation_mode() != mode {
        model.set_activation(mode)?;
    }
    let initial_train_loss = objective(model, &data.train, cfg)?;
    if !initial_train_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            loss: initial_train_loss,
        });
    }
    let mut opt = Adam::new(model.params());
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut history = Vec::with_capacity(epochs);
    let mut stopped_early = false;
    for epoch in 0..epochs {
        let lr = match cfg.schedule {
            LrSchedule::Constant => cfg.lr,
            LrSchedule::Cosine => cosine_lr(cfg.lr, epoch, epochs),
        };
        order.shuffle(rng);
        let mut per = vec![0.0; data.train.len()];
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Window> = chunk.iter().map(|&i| &data.train[i]).collect();
            let mut vals = Vec::with_capacity(chunk.len());
            let grads = {
                let mut g = Graph::new();
                let loss = model.loss_on(model.params(), &mut g, &refs, cfg.w_forecast, cfg.w_distill, Some(&mut vals))?;
                let lv = g.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::Diverged { epoch: epoch + 1, loss: lv });
                }
                g.backward(loss)?.for_store(model.params())
            };
            for (&i, v) in chunk.iter().zip(vals) {
                per[i] = v;
            }
            opt.step(model.params_mut(), &grads, lr)?;
        }
        let train_loss = weighted_mean(&data.train, &per);
        let val_loss = validation_loss(model, &data.val)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                loss: val_loss,
            });
        }
        history.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss,
            val_loss,
        });
        let improved = best.as_ref().map_or(true, |b| val_loss < b.1);
        if improved {
            best = Some((epoch + 1, val_loss, model.params().clone()));
        } else if epoch + 1 - best.as_ref().unwrap().0 >= cfg.patience {
            stopped_early = epoch + 1 < epochs;
            break;
        }
    }
    let (best_epoch, best_val_loss, best_params) = best.expect("at least one epoch");
    model.params_mut().copy_from(&best_params)?;
    Ok(StageResult {
        initial_train_loss,
        history,
        best_epoch,
        best_val_loss,
        stopped_early,
    })
}

/// Metrics and bookkeeping of one seeded training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialReport {
    pub seed: u64,
    pub plan: String,
    pub train_mae: f64,
    pub train_mse: f64,
    pub val_mae: f64,
    pub val_mse: f64,
    pub test_mae: f64,
    pub test_mse: f64,
    /// Best validation loss of the final stage (normalized forecast MSE).
    pub val_loss: f64,
    /// Counted within the final stage.
    pub epochs_to_convergence: usize,
    pub epochs_run: usize,
    pub pretrain_epochs_run: usize,
    pub initial_train_loss: f64,
    /// Training objective just before and just after the activation swap of a warm start.
    pub boundary_loss_before: Option<f64>,
    pub boundary_loss_after: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub wall_time_secs: f64,
}

impl PartialEq for TrialReport {
    /// Everything except wall time.
    fn eq(&self, o: &Self) -> bool {
        self.seed == o.seed
            && self.plan == o.plan
            && self.train_mae.to_bits() == o.train_mae.to_bits()
            && self.train_mse.to_bits() == o.train_mse.to_bits()
            && self.val_mae.to_bits() == o.val_mae.to_bits()
            && self.val_mse.to_bits() == o.val_mse.to_bits()
            && self.test_mae.to_bits() == o.test_mae.to_bits()
            && self.test_mse.to_bits() == o.test_mse.to_bits()
            && self.val_loss.to_bits() == o.val_loss.to_bits()
            && self.epochs_to_convergence == o.epochs_to_convergence
            && self.epochs_run == o.epochs_run
            && self.pretrain_epochs_run == o.pretrain_epochs_run
            && self.initial_train_loss.to_bits() == o.initial_train_loss.to_bits()
            && self.boundary_loss_before.map(f64::to_bits) == o.boundary_loss_before.map(f64::to_bits)
            && self.boundary_loss_after.map(f64::to_bits) == o.boundary_loss_after.map(f64::to_bits)
            && self.history == o.history
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |x| format!("{x:.16e}"))
}

impl TrialReport {
    /// One line of space-separated `key=value` pairs.
    pub fn to_kv_line(&self) -> String {
        format!(
            "seed={} plan={} train_mae={:.16e} train_mse={:.16e} val_mae={:.16e} val_mse={:.16e} \
             test_mae={:.16e} test_mse={:.16e} val_loss={:.16e} epochs_to_convergence={} epochs_run={} \
             pretrain_epochs_run={} initial_train_loss={:.16e} boundary_loss_before={} boundary_loss_after={} \
             wall_time_secs={:.3}",
            self.seed,
            self.plan,
            self.train_mae,
            self.train_mse,
            self.val_mae,
            self.val_mse,
            self.test_mae,
            self.test_mse,
            self.val_loss,
            self.epochs_to_convergence,
            self.epochs_run,
            self.pretrain_epochs_run,
            self.initial_train_loss,
            fmt_opt(self.boundary_loss_before),
            fmt_opt(self.boundary_loss_after),
            self.wall_time_secs
        )
    }

    pub fn final_train_loss(&self) -> f64 {
        self.history.last().map_or(self.initial_train_loss, |r| r.train_loss)
    }
}

fn shuffle_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

/// Runs `cfg.plan` on `model` in place and scores the retained parameters.
///
/// A warm start trains with GELU for `pretrain_epochs`, keeps its best
/// parameters, swaps the activation and trains `cfg.epochs` more with a fresh
/// optimizer and schedule. The final stage always draws its shuffle order from
/// the same stream, so a zero-epoch pretraining equals direct training.
pub fn train_model(model: &mut Cotn, data: &TrainData, cfg: &TrainConfig) -> Result<TrialReport> {
    cfg.validate()?;
    data.check()?;
    let started = Instant::now();
    let mut pretrain_epochs_run = 0;
    let mut before = None;
    let mut after = None;
    let final_mode = cfg.plan.final_mode();
    if let StagePlan::WarmStart { pretrain_epochs, .. } = cfg.plan {
        if pretrain_epochs > 0 {
            let mut rng = shuffle_rng(cfg.seed, 1);
            let s1 = train_stage(model, data, cfg, ActivationMode::Gelu, pretrain_epochs, &mut rng)?;
            pretrain_epochs_run = s1.history.len();
            before = Some(objective(model, &data.train, cfg)?);
            model.set_activation(final_mode)?;
            after = Some(objective(model, &data.train, cfg)?);
        }
    }
    let mut rng = shuffle_rng(cfg.seed, 2);
    let stage = train_stage(model, data, cfg, final_mode, cfg.epochs, &mut rng)?;
    let tr = evaluate(model, &data.train, &data.stats)?;
    let va = evaluate(model, &data.val, &data.stats)?;
    let te = evaluate(model, &data.test, &data.stats)?;
    Ok(TrialReport {
        seed: cfg.seed,
        plan: cfg.plan.describe(),
        train_mae: tr.mae,
        train_mse: tr.mse,
        val_mae: va.mae,
        val_mse: va.mse,
        test_mae: te.mae,
        test_mse: te.mse,
        val_loss: stage.best_val_loss,
        epochs_to_convergence: stage.epochs_to_convergence(),
        epochs_run: stage.history.len(),
        pretrain_epochs_run,
        initial_train_loss: stage.initial_train_loss,
        boundary_loss_before: before,
        boundary_loss_after: after,
        history: stage.history,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Builds a model from `model_cfg` seeded with `cfg.seed` and trains it.
pub fn run_trial(model_cfg: &ModelConfig, data: &TrainData, cfg: &TrainConfig) -> Result<(Cotn, TrialReport)> {
    let mut mc = model_cfg.clone();
    mc.activation = match cfg.plan {
        StagePlan::Direct { activation } => activation,
        StagePlan::WarmStart { .. } => ActivationMode::Gelu,
    };
    let mut model = Cotn::new(mc, cfg.seed)?;
    let report = train_model(&mut model, data, cfg)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{prepare, synthetic_series, PipelineConfig, WindowSpec};

    pub(crate) fn tiny_data(len: usize, stride: usize) -> TrainData {
        let spec = WindowSpec {
            enc_len: 12,
            label_len: 6,
            horizon: 4,
            stride,
        };
        prepare(&synthetic_series(len), &PipelineConfig::default(), &spec).unwrap().into()
    }

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            n_features: 1,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 1,
            d_ff: 16,
            enc_len: 12,
            label_len: 6,
            horizon: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_params_and_loss() {
        let data = tiny_data(200, 4);
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.0,
            patience: 5,
            ..TrainConfig::default()
        };
        let mc = tiny_model();
        let mut model = Cotn::new(mc, 1).unwrap();
        let before = model.params().clone();
        let mut rng = shuffle_rng(1, 2);
        let r = train_stage(&mut model, &data, &cfg, ActivationMode::gated(1), 3, &mut rng).unwrap();
        assert!(model.params().bit_identical(&before));
        for e in &r.history {
            assert_eq!(e.train_loss.to_bits(), r.initial_train_loss.to_bits());
            assert_eq!(e.val_loss.to_bits(), r.history[0].val_loss.to_bits());
        }
    }

    #[test]
    fn identical_seeds_give_identical_reports() {
        let data = tiny_data(200, 4);
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let (_, a) = run_trial(&tiny_model(), &data, &cfg).unwrap();
        let (_, b) = run_trial(&tiny_model(), &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.test_mae >= 0.0 && a.test_mse >= 0.0);
        let c = run_trial(&tiny_model(), &data, &TrainConfig { seed: 2, ..cfg }).unwrap().1;
        assert_ne!(a, c);
    }

    #[test]
    fn zero_pretrain_equals_direct() {
        let data = tiny_data(200, 4);
        let direct = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let warm = TrainConfig {
            plan: StagePlan::WarmStart {
                pretrain_epochs: 0,
                final_mode: ActivationMode::gated(1),
            },
            ..direct.clone()
        };
        let (ma, a) = run_trial(&tiny_model(), &data, &direct).unwrap();
        let (mb, b) = run_trial(&tiny_model(), &data, &warm).unwrap();
        assert!(ma.params().bit_identical(mb.params()));
        assert_eq!(a.test_mse.to_bits(), b.test_mse.to_bits());
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn swap_carries_parameters() {
        let data = tiny_data(200, 4);
        let cfg = TrainConfig {
            epochs: 2,
            plan: StagePlan::WarmStart {
                pretrain_epochs: 2,
                final_mode: ActivationMode::gated(1),
            },
            ..TrainConfig::default()
        };
        let mut model = Cotn::new(tiny_model(), cfg.seed).unwrap();
        let mut rng = shuffle_rng(cfg.seed, 1);
        train_stage(&mut model, &data, &cfg, ActivationMode::Gelu, 2, &mut rng).unwrap();
        let snapshot = model.params().clone();
        model.set_activation(ActivationMode::gated(1)).unwrap();
        assert!(model.params().bit_identical(&snapshot));
        let report = train_model(&mut Cotn::new(tiny_model(), cfg.seed).unwrap(), &data, &cfg).unwrap();
        assert_eq!(report.pretrain_epochs_run, 2);
        assert!(report.boundary_loss_before.is_some() && report.boundary_loss_after.is_some());
        assert!(report.to_kv_line().starts_with("seed=1 plan=warm_start:2:gated:1:0.5 "));
    }

    #[test]
    fn divergence_is_reported() {
        let mut data = tiny_data(200, 4);
        data.train[0].target.data_mut()[0] = 1e300;
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        assert!(matches!(
            run_trial(&tiny_model(), &data, &cfg),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn convergence_epoch_definition() {
        let rec = |e, v| EpochRecord {
            epoch: e,
            lr: 0.0,
            train_loss: 0.0,
            val_loss: v,
        };
        let s = StageResult {
            initial_train_loss: 1.0,
            history: vec![rec(1, 2.0), rec(2, 1.005), rec(3, 1.0), rec(4, 1.2)],
            best_epoch: 3,
            best_val_loss: 1.0,
            stopped_early: false,
        };
        assert_eq!(s.epochs_to_convergence(), 2);
    }
}
