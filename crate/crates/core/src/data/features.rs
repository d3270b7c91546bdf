use std::ops::Range;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::series::{RawSeries, Schema};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub ma_short: usize,
    pub ma_long: usize,
    pub vol_window: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            ma_short: 5,
            ma_long: 20,
            vol_window: 20,
        }
    }
}

impl FeatureConfig {
    /// Rows lost at the start of each segment before every rolling value is defined.
    pub fn warmup(&self) -> usize {
        (self.ma_short.max(self.ma_long) - 1).max(self.vol_window)
    }
}

/// Column-major feature matrix with contiguous segments.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub timestamps: Vec<NaiveDateTime>,
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub target: usize,
    pub segments: Vec<Range<usize>>,
}

impl FeatureFrame {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.columns.len()
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.columns[col][row]
    }

    /// Rows `range` of the frame, with segments clipped to it.
    pub fn slice(&self, range: Range<usize>) -> FeatureFrame {
        let segments = self
            .segments
            .iter()
            .filter_map(|s| {
                let a = s.start.max(range.start);
                let b = s.end.min(range.end);
                (a < b).then(|| a - range.start..b - range.start)
            })
            .collect();
        FeatureFrame {
            timestamps: self.timestamps[range.clone()].to_vec(),
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c[range.clone()].to_vec()).collect(),
            target: self.target,
            segments,
        }
    }
}

pub fn rolling_mean(x: &[f64], w: usize) -> Vec<Option<f64>> {
    (0..x.len())
        .map(|t| (t + 1 >= w).then(|| x[t + 1 - w..=t].iter().sum::<f64>() / w as f64))
        .collect()
}

/// Population standard deviation over a trailing window.
pub fn rolling_std(x: &[Option<f64>], w: usize) -> Vec<Option<f64>> {
    (0..x.len())
        .map(|t| {
            if t + 1 < w {
                return None;
            }
            let win: Option<Vec<f64>> = x[t + 1 - w..=t].iter().copied().collect();
            let win = win?;
            let m = win.iter().sum::<f64>() / w as f64;
            Some((win.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / w as f64).sqrt())
        })
        .collect()
}

pub fn log_returns(close: &[f64]) -> Result<Vec<Option<f64>>> {
    let mut out = Vec::with_capacity(close.len());
    for t in 0..close.len() {
        if close[t] <= 0.0 {
            return Err(Error::Domain(format!("close price must be positive, got {}", close[t])));
        }
        out.push((t > 0).then(|| (close[t] / close[t - 1]).ln()));
    }
    Ok(out)
}

/// Builds model features. The market schema gains log-return, two moving
/// averages and rolling volatility per segment; segments too short to define
/// them are dropped. The transformer schema passes through with `OT` as target.
pub fn featurize(clean: &RawSeries, cfg: &FeatureConfig) -> Result<FeatureFrame> {
    if cfg.ma_short == 0 || cfg.ma_long == 0 || cfg.vol_window == 0 {
        return Err(Error::Argument("feature windows must be at least 1".into()));
    }
    let target_name = clean.schema.target_column();
    match clean.schema {
        Schema::Ett => {
            if clean.columns.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Argument("series contains missing values; clean it first".into()));
            }
            let target = clean
                .column_index(target_name)
                .ok_or_else(|| Error::Argument("missing OT column".into()))?;
            Ok(FeatureFrame {
                timestamps: clean.timestamps.clone(),
                names: clean.names.clone(),
                columns: clean.columns.clone(),
                target,
                segments: clean.segments.clone(),
            })
        }
        Schema::Ohlcv => {
            let warm = cfg.warmup();
            let src: Vec<usize> = super::series::OHLCV_COLUMNS
                .iter()
                .map(|c| clean.column_index(c).ok_or_else(|| Error::Argument(format!("missing {c} column"))))
                .collect::<Result<_>>()?;
            let mut names: Vec<String> = super::series::OHLCV_COLUMNS.iter().map(|s| s.to_string()).collect();
            names.push("log_return".into());
            names.push(format!("ma_{}", cfg.ma_short));
            names.push(format!("ma_{}", cfg.ma_long));
            names.push(format!("volatility_{}", cfg.vol_window));
            let mut columns = vec![Vec::new(); names.len()];
            let mut timestamps = Vec::new();
            let mut segments = Vec::new();
            for seg in &clean.segments {
                if seg.len() <= warm {
                    continue;
                }
                let close = &clean.columns[src[3]][seg.clone()];
                if close.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Argument("series contains missing values; clean it first".into()));
                }
                let lr = log_returns(close)?;
                let mas = rolling_mean(close, cfg.ma_short);
                let mal = rolling_mean(close, cfg.ma_long);
                let vol = rolling_std(&lr, cfg.vol_window);
                let start = timestamps.len();
                for k in warm..seg.len() {
                    let r = seg.start + k;
                    for (j, &c) in src.iter().enumerate() {
                        columns[j].push(clean.columns[c][r]);
                    }
                    columns[5].push(lr[k].unwrap());
                    columns[6].push(mas[k].unwrap());
                    columns[7].push(mal[k].unwrap());
                    columns[8].push(vol[k].unwrap());
                    timestamps.push(clean.timestamps[r]);
                }
                segments.push(start..timestamps.len());
            }
            if timestamps.is_empty() {
                return Err(Error::Argument(format!(
                    "series is shorter than the largest feature window ({} rows needed per segment)",
                    warm + 1
                )));
            }
            Ok(FeatureFrame {
                timestamps,
                names,
                columns,
                target: 3,
                segments,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::series::parse_csv;

    fn bars(close: &[f64]) -> RawSeries {
        let mut text = String::from("date,open,high,low,close,volume\n");
        for (i, c) in close.iter().enumerate() {
            text.push_str(&format!("2020-01-01 {:02}:{:02}:00,{c},{c},{c},{c},1000\n", i / 60, i % 60));
        }
        parse_csv(text.as_bytes(), Schema::Ohlcv, None).unwrap()
    }

    #[test]
    fn moving_average_of_ramp() {
        let x: Vec<f64> = (1..=40).map(f64::from).collect();
        let ma = rolling_mean(&x, 20);
        assert_eq!(ma[18], None);
        assert_eq!(ma[19], Some(10.5));
    }

    #[test]
    fn constant_prices() {
        let f = featurize(&bars(&[5.0; 40]), &FeatureConfig::default()).unwrap();
        assert_eq!(f.len(), 20);
        assert!(f.columns[5].iter().all(|&v| v == 0.0));
        assert!(f.columns[8].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_close() {
        let close: Vec<f64> = (0..30).map(|i| 2f64.powi(i)).collect();
        let f = featurize(&bars(&close), &FeatureConfig::default()).unwrap();
        assert!(f.columns[5].iter().all(|&v| (v - 2f64.ln()).abs() < 1e-12));
        assert_eq!(f.names[3], "close");
        assert_eq!(f.target, 3);
    }

    #[test]
    fn too_short_is_an_error() {
        assert!(matches!(
            featurize(&bars(&[1.0; 20]), &FeatureConfig::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn slice_clips_segments() {
        let f = FeatureFrame {
            timestamps: bars(&[1.0; 10]).timestamps,
            names: vec!["a".into()],
            columns: vec![(0..10).map(f64::from).collect()],
            target: 0,
            segments: vec![0..4, 4..10],
        };
        let s = f.slice(2..7);
        assert_eq!(s.segments, vec![0..2, 2..5]);
        assert_eq!(s.columns[0], vec![2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
