use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_trial, StagePlan, TrainConfig, TrainData, TrialReport};
use crate::activation::ActivationMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::oscillator::NUM_TYPES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation (`n - 1` denominator).
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl MetricSummary {
    pub fn of(name: &str, values: &[f64]) -> Self {
        let n = values.len();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let mean = values.iter().sum::<f64>() / n as f64;
        // shifted sums: identical values give exactly zero
        let std = if n < 2 {
            0.0
        } else {
            let k = values[0];
            let s1: f64 = values.iter().map(|v| v - k).sum();
            let s2: f64 = values.iter().map(|v| (v - k) * (v - k)).sum();
            ((s2 - s1 * s1 / n as f64) / (n - 1) as f64).max(0.0).sqrt()
        };
        Self {
            name: name.to_owned(),
            mean,
            median,
            std,
            min: sorted.first().copied().unwrap_or(f64::NAN),
            max: sorted.last().copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub n_trials: usize,
    pub plan: String,
    pub metrics: Vec<MetricSummary>,
    pub baseline: Option<String>,
    /// Fraction of paired seeds where this plan's test MAE is below the baseline's.
    pub win_rate: Option<f64>,
    pub wins: Option<usize>,
}

impl StatsSummary {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }

    /// One `key=value` record per metric, then one for the comparison.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "plan={} n_trials={}", self.plan, self.n_trials);
        for m in &self.metrics {
            let _ = writeln!(
                s,
                "metric={} mean={:.16e} median={:.16e} std={:.16e} min={:.16e} max={:.16e}",
                m.name, m.mean, m.median, m.std, m.min, m.max
            );
        }
        if let (Some(b), Some(w), Some(k)) = (&self.baseline, self.win_rate, self.wins) {
            let _ = writeln!(s, "baseline={b} wins={k} win_rate={w:.16e}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    /// `min ≤ median ≤ max`, finite values and non-negative spreads.
    pub fn is_well_formed(&self) -> bool {
        self.n_trials >= 1
            && self.metrics.iter().all(|m| {
                [m.mean, m.median, m.std, m.min, m.max].iter().all(|v| v.is_finite())
                    && m.min <= m.median
                    && m.median <= m.max
                    && m.std >= 0.0
            })
            && self.win_rate.map_or(true, |w| (0.0..=1.0).contains(&w))
    }
}

const METRICS: [&str; 7] = [
    "test_mae",
    "test_mse",
    "val_mae",
    "val_mse",
    "train_mae",
    "val_loss",
    "epochs_to_convergence",
];

fn metric_value(r: &TrialReport, name: &str) -> f64 {
    match name {
        "test_mae" => r.test_mae,
        "test_mse" => r.test_mse,
        "val_mae" => r.val_mae,
        "val_mse" => r.val_mse,
        "train_mae" => r.train_mae,
        "val_loss" => r.val_loss,
        _ => r.epochs_to_convergence as f64,
    }
}

/// Aggregates reports; with a baseline, reports must be paired by seed.
pub fn summarize(reports: &[TrialReport], baseline: Option<&[TrialReport]>) -> Result<StatsSummary> {
    if reports.is_empty() {
        return Err(Error::Argument("no trials to summarize".into()));
    }
    let metrics = METRICS
        .iter()
        .map(|m| MetricSummary::of(m, &reports.iter().map(|r| metric_value(r, m)).collect::<Vec<_>>()))
        .collect();
    let (mut name, mut rate, mut wins) = (None, None, None);
    if let Some(base) = baseline {
        if base.len() != reports.len() || base.iter().zip(reports).any(|(a, b)| a.seed != b.seed) {
            return Err(Error::Argument("baseline trials are not paired by seed".into()));
        }
        let k = reports.iter().zip(base).filter(|(t, b)| t.test_mae < b.test_mae).count();
        name = Some(base[0].plan.clone());
        wins = Some(k);
        rate = Some(k as f64 / reports.len() as f64);
    }
    Ok(StatsSummary {
        n_trials: reports.len(),
        plan: reports[0].plan.clone(),
        metrics,
        baseline: name,
        win_rate: rate,
        wins,
    })
}

fn run_seeds<T, F>(seeds: Vec<u64>, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    if jobs <= 1 {
        return seeds.into_iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::State(format!("cannot start worker pool: {e}")))?;
    pool.install(|| seeds.into_par_iter().map(f).collect())
}

/// Runs `cfg.plan` with seeds `1..=n_trials`; each trial is single-threaded,
/// so results do not depend on `jobs`.
pub fn multi_trial(
    model_cfg: &ModelConfig,
    data: &TrainData,
    cfg: &TrainConfig,
    n_trials: usize,
    jobs: usize,
) -> Result<Vec<TrialReport>> {
    if n_trials < 2 {
        return Err(Error::Argument(format!("need at least 2 trials, got {n_trials}")));
    }
    run_seeds((1..=n_trials as u64).collect(), jobs, |seed| {
        let c = TrainConfig { seed, ..cfg.clone() };
        run_trial(model_cfg, data, &c).map(|(_, r)| r)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedComparison {
    pub treatment: Vec<TrialReport>,
    pub baseline: Vec<TrialReport>,
    /// Treatment statistics with the win rate against the baseline.
    pub summary: StatsSummary,
    pub baseline_summary: StatsSummary,
}

/// Treatment and baseline on identical seeds, data order and initial parameters.
pub fn paired_trials(
    model_cfg: &ModelConfig,
    data: &TrainData,
    treatment: &TrainConfig,
    baseline: &TrainConfig,
    n_trials: usize,
    jobs: usize,
) -> Result<PairedComparison> {
    let t = multi_trial(model_cfg, data, treatment, n_trials, jobs)?;
    let b = multi_trial(model_cfg, data, baseline, n_trials, jobs)?;
    Ok(PairedComparison {
        summary: summarize(&t, Some(&b))?,
        baseline_summary: summarize(&b, None)?,
        treatment: t,
        baseline: b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub type_id: u8,
    pub val_mae: f64,
    pub val_mse: f64,
    pub test_mae: f64,
    pub test_mse: f64,
    /// Training stopped on a non-finite loss; metrics are then infinite.
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Ascending by validation MAE, ties by type.
    pub entries: Vec<SweepEntry>,
    pub winner: u8,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,type_id,val_mae,val_mse,test_mae,test_mse,diverged\n");
        for (i, e) in self.entries.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                i + 1,
                e.type_id,
                e.val_mae,
                e.val_mse,
                e.test_mae,
                e.test_mse,
                e.diverged
            );
        }
        s
    }
}

/// Trains one gated model per oscillator type on the same seed and ranks them.
pub fn sweep_types(
    model_cfg: &ModelConfig,
    data: &TrainData,
    cfg: &TrainConfig,
    lambda: f64,
    jobs: usize,
) -> Result<SweepResult> {
    let types: Vec<u64> = (1..=u64::from(NUM_TYPES)).collect();
    let mut entries = run_seeds(types, jobs, |t| {
        let type_id = t as u8;
        let c = TrainConfig {
            plan: StagePlan::Direct {
                activation: ActivationMode::Gated { type_id, lambda },
            },
            ..cfg.clone()
        };
        match run_trial(model_cfg, data, &c) {
            Ok((_, r)) => Ok(SweepEntry {
                type_id,
                val_mae: r.val_mae,
                val_mse: r.val_mse,
                test_mae: r.test_mae,
                test_mse: r.test_mse,
                diverged: false,
            }),
            Err(Error::Diverged { .. }) => Ok(SweepEntry {
                type_id,
                val_mae: f64::INFINITY,
                val_mse: f64::INFINITY,
                test_mae: f64::INFINITY,
                test_mse: f64::INFINITY,
                diverged: true,
            }),
            Err(e) => Err(e),
        }
    })?;
    entries.sort_by(|a, b| a.val_mae.total_cmp(&b.val_mae).then(a.type_id.cmp(&b.type_id)));
    Ok(SweepResult {
        winner: entries[0].type_id,
        entries,
    })
}
