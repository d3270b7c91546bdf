use chrono::{Duration, NaiveDate};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::series::{RawSeries, Schema};
use crate::error::{Error, Result};

pub const SYNTH_PERIOD: f64 = 48.0;
pub const LOGISTIC_R: f64 = 3.9;
pub const LOGISTIC_X0: f64 = 0.3;

/// `0.8 sin(2πt/48) + 0.2 x_t` with `x_{t+1} = 3.9 x_t (1 - x_t)`.
pub fn synthetic_values(len: usize) -> Vec<f64> {
    let mut x = LOGISTIC_X0;
    (0..len)
        .map(|t| {
            let v = 0.8 * (2.0 * std::f64::consts::PI * t as f64 / SYNTH_PERIOD).sin() + 0.2 * x;
            x = LOGISTIC_R * x * (1.0 - x);
            v
        })
        .collect()
}

/// Hourly single-column series in the transformer layout (`date,OT`).
pub fn synthetic_series(len: usize) -> RawSeries {
    let t0 = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    RawSeries {
        schema: Schema::Ett,
        timestamps: (0..len).map(|i| t0 + Duration::hours(i as i64)).collect(),
        names: vec!["OT".into()],
        columns: vec![synthetic_values(len)],
        duplicate: vec![false; len],
        period_secs: 3600,
        segments: vec![0..len],
    }
}

/// Adds `magnitude × sd` to `count` distinct rows of column `col`; returns the touched rows in ascending order.
pub fn inject_spikes(s: &mut RawSeries, col: usize, count: usize, magnitude: f64, seed: u64) -> Result<Vec<usize>> {
    if count > s.len() {
        return Err(Error::Argument(format!("cannot place {count} spikes in {} rows", s.len())));
    }
    let x = &s.columns[col];
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = sample(&mut rng, s.len(), count).into_vec();
    rows.sort_unstable();
    for &r in &rows {
        s.columns[col][r] += magnitude * sd;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_and_deterministic() {
        let v = synthetic_values(2000);
        assert_eq!(v, synthetic_values(2000));
        assert!(v.iter().all(|x| x.abs() <= 1.0));
        assert_eq!(v[0], 0.2 * LOGISTIC_X0);
        assert_eq!(synthetic_series(10).len(), 10);
    }

    #[test]
    fn spikes_are_distinct() {
        let mut s = synthetic_series(200);
        let before = s.columns[0].clone();
        let rows = inject_spikes(&mut s, 0, 5, 10.0, 3).unwrap();
        assert_eq!(rows.len(), 5);
        let changed = (0..200).filter(|&i| s.columns[0][i] != before[i]).count();
        assert_eq!(changed, 5);
    }
}
