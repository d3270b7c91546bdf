use std::io::BufRead;

use super::features::FeatureFrame;
use crate::error::{Error, Result};

/// Per-feature z-normalization fitted on one frame, usually the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns of the fitted frame that were dropped because they were constant.
    pub dropped: Vec<String>,
    /// Position of the target among the retained features.
    pub target: usize,
}

fn is_constant(std: f64, mean: f64) -> bool {
    !(std > 1e-12 * mean.abs().max(1.0))
}

/// Population mean and standard deviation of every column of `train`.
pub fn fit_stats(train: &FeatureFrame) -> Result<NormStats> {
    let n = train.len();
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 rows to fit normalization, got {n}")));
    }
    let mut stats = NormStats {
        names: Vec::new(),
        mean: Vec::new(),
        std: Vec::new(),
        dropped: Vec::new(),
        target: 0,
    };
    for (c, col) in train.columns.iter().enumerate() {
        let mean = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
        if is_constant(sd, mean) {
            if c == train.target {
                return Err(Error::Argument(format!(
                    "target `{}` is constant on the training split",
                    train.names[c]
                )));
            }
            stats.dropped.push(train.names[c].clone());
            continue;
        }
        if c == train.target {
            stats.target = stats.names.len();
        }
        stats.names.push(train.names[c].clone());
        stats.mean.push(mean);
        stats.std.push(sd);
    }
    Ok(stats)
}

impl NormStats {
    pub fn num_features(&self) -> usize {
        self.names.len()
    }

    pub fn target_mean(&self) -> f64 {
        self.mean[self.target]
    }

    pub fn target_std(&self) -> f64 {
        self.std[self.target]
    }

    pub fn denormalize_target(&self, v: f64) -> f64 {
        v * self.std[self.target] + self.mean[self.target]
    }

    pub fn normalize_target(&self, v: f64) -> f64 {
        (v - self.mean[self.target]) / self.std[self.target]
    }

    /// `feature,mean,std` rows with 17 significant digits; dropped features as `# dropped=` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for d in &self.dropped {
            s.push_str(&format!("# dropped={d}\n"));
        }
        s.push_str(&format!("# target={}\n", self.names[self.target]));
        s.push_str("feature,mean,std\n");
        for i in 0..self.names.len() {
            s.push_str(&format!("{},{:.16e},{:.16e}\n", self.names[i], self.mean[i], self.std[i]));
        }
        s
    }

    pub fn from_text<R: BufRead>(input: R) -> Result<Self> {
        let mut stats = NormStats {
            names: Vec::new(),
            mean: Vec::new(),
            std: Vec::new(),
            dropped: Vec::new(),
            target: 0,
        };
        let mut target_name = None;
        let mut saw_header = false;
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(d) = rest.strip_prefix("dropped=") {
                    stats.dropped.push(d.to_owned());
                } else if let Some(t) = rest.strip_prefix("target=") {
                    target_name = Some(t.to_owned());
                }
                continue;
            }
            if !saw_header {
                if line != "feature,mean,std" {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: "expected `feature,mean,std` header".into(),
                    });
                }
                saw_header = true;
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            let bad = || Error::Parse {
                line: i + 1,
                msg: format!("malformed stats row `{line}`"),
            };
            if parts.len() != 3 {
                return Err(bad());
            }
            let mean: f64 = parts[1].parse().map_err(|_| bad())?;
            let sd: f64 = parts[2].parse().map_err(|_| bad())?;
            if !(sd > 0.0) || !mean.is_finite() {
                return Err(bad());
            }
            stats.names.push(parts[0].to_owned());
            stats.mean.push(mean);
            stats.std.push(sd);
        }
        let target_name = target_name.ok_or_else(|| Error::Parse {
            line: 1,
            msg: "missing `# target=` line".into(),
        })?;
        stats.target = stats.names.iter().position(|n| *n == target_name).ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("target `{target_name}` has no stats row"),
        })?;
        Ok(stats)
    }
}

/// Keeps the fitted features of `frame` and maps each to `(x - mean) / std`.
pub fn normalize(frame: &FeatureFrame, stats: &NormStats) -> Result<FeatureFrame> {
    let mut columns = Vec::with_capacity(stats.names.len());
    for (i, name) in stats.names.iter().enumerate() {
        let c = frame
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Argument(format!("frame has no feature `{name}`")))?;
        columns.push(frame.columns[c].iter().map(|v| (v - stats.mean[i]) / stats.std[i]).collect());
    }
    Ok(FeatureFrame {
        timestamps: frame.timestamps.clone(),
        names: stats.names.clone(),
        columns,
        target: stats.target,
        segments: frame.segments.clone(),
    })
}

/// Inverse of [`normalize`] on the retained features.
pub fn denormalize(frame: &FeatureFrame, stats: &NormStats) -> Result<FeatureFrame> {
    if frame.names != stats.names {
        return Err(Error::Argument("frame features do not match the stats".into()));
    }
    let columns = frame
        .columns
        .iter()
        .enumerate()
        .map(|(i, col)| col.iter().map(|v| v * stats.std[i] + stats.mean[i]).collect())
        .collect();
    Ok(FeatureFrame {
        columns,
        ..frame.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn frame(cols: Vec<Vec<f64>>, target: usize) -> FeatureFrame {
        let n = cols[0].len();
        let t0 = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        FeatureFrame {
            timestamps: (0..n).map(|i| t0 + chrono::Duration::hours(i as i64)).collect(),
            names: (0..cols.len()).map(|i| format!("f{i}")).collect(),
            columns: cols,
            target,
            segments: vec![0..n],
        }
    }

    fn sample() -> FeatureFrame {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 3.0 + 10.0).collect();
        let b = vec![2.5; 50];
        let c: Vec<f64> = (0..50).map(|i| i as f64 * 1e3).collect();
        frame(vec![a, b, c], 2)
    }

    #[test]
    fn round_trip_and_moments() {
        let f = sample();
        let st = fit_stats(&f).unwrap();
        assert_eq!(st.dropped, vec!["f1".to_string()]);
        assert_eq!(st.target, 1);
        let n = normalize(&f, &st).unwrap();
        for col in &n.columns {
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(m.abs() < 1e-10);
            assert!((sd - 1.0).abs() < 1e-10);
        }
        let back = denormalize(&n, &st).unwrap();
        for (i, name) in back.names.iter().enumerate() {
            let c = f.names.iter().position(|x| x == name).unwrap();
            for (x, y) in back.columns[i].iter().zip(&f.columns[c]) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn constant_target_is_an_error() {
        let f = frame(vec![vec![1.0; 10], (0..10).map(f64::from).collect()], 0);
        assert!(fit_stats(&f).is_err());
    }

    #[test]
    fn stats_text_round_trip() {
        let st = fit_stats(&sample()).unwrap();
        let text = st.to_text();
        assert!(text.contains("feature,mean,std"));
        let back = NormStats::from_text(text.as_bytes()).unwrap();
        assert_eq!(back, st);
    }
}
