use std::collections::HashSet;
use std::fmt;
use std::ops::Range;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::series::{RawSeries, Schema, TIMESTAMP_FORMAT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanConfig {
    /// Longest gap, in sampling periods, that is forward-filled instead of splitting the series.
    pub max_ffill_gap: usize,
    pub z_max: f64,
    /// Largest accepted one-step relative change of the close price (market schema only).
    pub max_abs_return: f64,
    /// Bound on outlier passes; each pass works on the output of the previous one.
    pub max_passes: usize,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            max_ffill_gap: 3,
            z_max: 5.0,
            max_abs_return: 0.2,
            max_passes: 50,
        }
    }
}

impl CleanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_max > 0.0) || !(self.max_abs_return > 0.0) {
            return Err(Error::Argument("z_max and max_abs_return must be positive".into()));
        }
        if self.max_passes == 0 {
            return Err(Error::Argument("max_passes must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CleanAction {
    DropDuplicate,
    FillGap,
    FillMissing,
    DropMissing,
    SplitSegment,
    FillReturn,
    FillZscore,
}

impl fmt::Display for CleanAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CleanAction::DropDuplicate => "drop_duplicate",
            CleanAction::FillGap => "fill_gap",
            CleanAction::FillMissing => "fill_missing",
            CleanAction::DropMissing => "drop_missing",
            CleanAction::SplitSegment => "split_segment",
            CleanAction::FillReturn => "fill_return_outlier",
            CleanAction::FillZscore => "fill_zscore_outlier",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub timestamp: NaiveDateTime,
    pub action: CleanAction,
    pub reason: String,
}

/// One entry per touched row, in the order the rows were touched.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CleaningReport {
    pub entries: Vec<ReportEntry>,
}

impl CleaningReport {
    pub fn count(&self, action: CleanAction) -> usize {
        self.entries.iter().filter(|e| e.action == action).count()
    }

    /// Line-oriented `timestamp,action,reason` text with a header.
    pub fn to_text(&self) -> String {
        let mut s = String::from("timestamp,action,reason\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.timestamp.format(TIMESTAMP_FORMAT), e.action, e.reason));
        }
        s
    }
}

struct Reporter {
    report: CleaningReport,
    seen: HashSet<NaiveDateTime>,
}

impl Reporter {
    fn push(&mut self, ts: NaiveDateTime, action: CleanAction, reason: String) {
        if self.seen.insert(ts) {
            self.report.entries.push(ReportEntry {
                timestamp: ts,
                action,
                reason,
            });
        }
    }
}

/// Columns screened by the Z-score filter.
fn zscore_columns(s: &RawSeries) -> Vec<usize> {
    match s.schema {
        Schema::Ett => (0..s.names.len()).collect(),
        Schema::Ohlcv => ["open", "high", "low", "close"]
            .iter()
            .filter_map(|c| s.column_index(c))
            .collect(),
    }
}

/// Deduplicates, fills short gaps and missing values, splits at long gaps and
/// replaces outlier rows with the previous row. Outlier passes repeat until
/// nothing changes, so cleaning an already cleaned series is a no-op.
pub fn clean(raw: &RawSeries, cfg: &CleanConfig) -> Result<(RawSeries, CleaningReport)> {
    cfg.validate()?;
    let mut rep = Reporter {
        report: CleaningReport::default(),
        seen: HashSet::new(),
    };
    let ncol = raw.names.len();
    let period = raw.period_secs;

    // Boundaries already present in the input are kept.
    let mut input_breaks = vec![false; raw.len()];
    for seg in &raw.segments {
        if seg.start < raw.len() {
            input_breaks[seg.start] = true;
        }
    }

    let mut ts_out: Vec<NaiveDateTime> = Vec::with_capacity(raw.len());
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(raw.len()); ncol];
    let mut seg_starts: Vec<usize> = Vec::new();
    let mut in_segment = false;

    for r in 0..raw.len() {
        let ts = raw.timestamps[r];
        if raw.duplicate[r] || ts_out.last() == Some(&ts) {
            rep.push(ts, CleanAction::DropDuplicate, "repeated timestamp".into());
            continue;
        }
        let mut row: Vec<f64> = (0..ncol).map(|c| raw.columns[c][r]).collect();

        if in_segment {
            let last = *ts_out.last().unwrap();
            let steps = (ts - last).num_seconds() / period;
            let forced = input_breaks[r];
            if forced || steps as usize > cfg.max_ffill_gap + 1 {
                in_segment = false;
                if !forced {
                    rep.push(ts, CleanAction::SplitSegment, format!("gap of {} periods", steps - 1));
                }
            } else {
                for k in 1..steps {
                    let fill_ts = last + Duration::seconds(k * period);
                    for col in cols.iter_mut() {
                        let v = *col.last().unwrap();
                        col.push(v);
                    }
                    ts_out.push(fill_ts);
                    rep.push(fill_ts, CleanAction::FillGap, format!("gap of {} periods", steps - 1));
                }
            }
        }

        let missing: Vec<usize> = (0..ncol).filter(|&c| row[c].is_nan()).collect();
        if !missing.is_empty() {
            if !in_segment {
                rep.push(ts, CleanAction::DropMissing, "missing value at segment start".into());
                continue;
            }
            for &c in &missing {
                row[c] = *cols[c].last().unwrap();
            }
            let names: Vec<&str> = missing.iter().map(|&c| raw.names[c].as_str()).collect();
            rep.push(ts, CleanAction::FillMissing, format!("missing {}", names.join(" ")));
        }

        if !in_segment {
            seg_starts.push(ts_out.len());
            in_segment = true;
        }
        ts_out.push(ts);
        for (c, col) in cols.iter_mut().enumerate() {
            col.push(row[c]);
        }
    }

    let n = ts_out.len();
    let segments: Vec<Range<usize>> = seg_starts
        .iter()
        .enumerate()
        .map(|(i, &s)| s..seg_starts.get(i + 1).copied().unwrap_or(n))
        .collect();

    let mut out = RawSeries {
        schema: raw.schema,
        duplicate: vec![false; n],
        timestamps: ts_out,
        names: raw.names.clone(),
        columns: cols,
        period_secs: period,
        segments,
    };

    let zcols = zscore_columns(&out);
    let close = match out.schema {
        Schema::Ohlcv => out.column_index("close"),
        Schema::Ett => None,
    };
    for _ in 0..cfg.max_passes {
        let mut changed = false;
        for seg in out.segments.clone() {
            if let Some(ci) = close {
                changed |= return_pass(&mut out, seg.clone(), ci, cfg.max_abs_return, &mut rep);
            }
            changed |= zscore_pass(&mut out, seg, &zcols, cfg.z_max, &mut rep);
        }
        if !changed {
            break;
        }
    }
    Ok((out, rep.report))
}

fn copy_row(s: &mut RawSeries, from: usize, to: usize) -> bool {
    let mut changed = false;
    for col in s.columns.iter_mut() {
        if col[to].to_bits() != col[from].to_bits() {
            col[to] = col[from];
            changed = true;
        }
    }
    changed
}

fn return_pass(s: &mut RawSeries, seg: Range<usize>, ci: usize, limit: f64, rep: &mut Reporter) -> bool {
    let mut changed = false;
    for t in seg.start + 1..seg.end {
        let prev = s.columns[ci][t - 1];
        let cur = s.columns[ci][t];
        let r = if prev != 0.0 { cur / prev - 1.0 } else { 0.0 };
        if r.abs() > limit && copy_row(s, t - 1, t) {
            rep.push(
                s.timestamps[t],
                CleanAction::FillReturn,
                format!("one-step return {:+.4}", r),
            );
            changed = true;
        }
    }
    changed
}

fn zscore_pass(s: &mut RawSeries, seg: Range<usize>, zcols: &[usize], z_max: f64, rep: &mut Reporter) -> bool {
    let n = seg.len();
    if n < 2 {
        return false;
    }
    let mut flagged: Vec<(usize, String)> = Vec::new();
    for &c in zcols {
        let x = &s.columns[c][seg.clone()];
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if !(sd > 0.0) {
            continue;
        }
        for (k, v) in x.iter().enumerate() {
            let z = (v - mean) / sd;
            if z.abs() > z_max {
                flagged.push((seg.start + k, format!("{} z={:+.3}", s.names[c], z)));
            }
        }
    }
    flagged.sort_by_key(|f| f.0);
    flagged.dedup_by_key(|f| f.0);
    let mut changed = false;
    for (t, reason) in flagged {
        let src = if t > seg.start { t - 1 } else { t + 1 };
        if copy_row(s, src, t) {
            rep.push(s.timestamps[t], CleanAction::FillZscore, reason);
            changed = true;
        }
    }
    changed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::series::parse_csv;

    fn hourly(values: &[(u32, f64)]) -> RawSeries {
        let mut text = String::from("date,OT\n");
        for &(h, v) in values {
            let day = 1 + h / 24;
            text.push_str(&format!("2020-01-{:02} {:02}:00:00,{}\n", day, h % 24, v));
        }
        parse_csv(text.as_bytes(), Schema::Ett, Some(3600)).unwrap()
    }

    #[test]
    fn short_gap_is_filled() {
        let s = hourly(&[(0, 1.0), (1, 2.0), (4, 3.0), (5, 4.0)]);
        let (c, rep) = clean(&s, &CleanConfig::default()).unwrap();
        assert_eq!(c.len(), 6);
        assert_eq!(c.segments, vec![0..6]);
        assert_eq!(c.columns[0], vec![1.0, 2.0, 2.0, 2.0, 3.0, 4.0]);
        assert_eq!(rep.count(CleanAction::FillGap), 2);
    }

    #[test]
    fn long_gap_splits() {
        let s = hourly(&[(0, 1.0), (1, 2.0), (12, 3.0), (13, 4.0)]);
        let (c, rep) = clean(&s, &CleanConfig::default()).unwrap();
        assert_eq!(c.segments, vec![0..2, 2..4]);
        assert_eq!(rep.count(CleanAction::SplitSegment), 1);
    }

    #[test]
    fn duplicates_keep_first() {
        let text = "date,OT\n2020-01-01 00:00:00,1\n2020-01-01 01:00:00,2\n2020-01-01 01:00:00,9\n2020-01-01 02:00:00,3\n";
        let s = parse_csv(text.as_bytes(), Schema::Ett, None).unwrap();
        let (c, rep) = clean(&s, &CleanConfig::default()).unwrap();
        assert_eq!(c.columns[0], vec![1.0, 2.0, 3.0]);
        assert_eq!(rep.entries.len(), 1);
        assert_eq!(rep.entries[0].action, CleanAction::DropDuplicate);
    }

    #[test]
    fn missing_values_are_forward_filled() {
        let s = hourly(&[(0, f64::NAN), (1, 2.0), (2, f64::NAN), (3, 4.0)]);
        let (c, rep) = clean(&s, &CleanConfig::default()).unwrap();
        assert_eq!(c.columns[0], vec![2.0, 2.0, 4.0]);
        assert_eq!(rep.count(CleanAction::DropMissing), 1);
        assert_eq!(rep.count(CleanAction::FillMissing), 1);
    }

    #[test]
    fn price_jump_is_filled() {
        let text = "date,open,high,low,close,volume
2020-01-01 09:30:00,10,10,10,10,100
2020-01-01 09:31:00,10,10,10,10.1,100
2020-01-01 09:32:00,12.6,12.6,12.6,12.625,100
2020-01-01 09:33:00,10.2,10.2,10.2,10.2,100
";
        let s = parse_csv(text.as_bytes(), Schema::Ohlcv, None).unwrap();
        let (c, rep) = clean(&s, &CleanConfig::default()).unwrap();
        assert_eq!(c.column("close").unwrap(), &[10.0, 10.1, 10.1, 10.2]);
        assert_eq!(rep.count(CleanAction::FillReturn), 1);
        assert!(rep.to_text().contains("2020-01-01 09:32:00,fill_return_outlier,"));
    }

    #[test]
    fn zscore_outlier_is_filled_and_cleaning_is_idempotent() {
        let mut v: Vec<(u32, f64)> = (0..200).map(|h| (h, (h as f64 * 0.3).sin())).collect();
        v[100].1 = 40.0;
        let s = hourly(&v);
        let (c, rep) = clean(&s, &CleanConfig::default()).unwrap();
        assert_eq!(c.columns[0][100], c.columns[0][99]);
        assert_eq!(rep.count(CleanAction::FillZscore), 1);
        let (cc, _) = clean(&c, &CleanConfig::default()).unwrap();
        assert_eq!(cc, c);
    }

    #[test]
    fn each_row_reported_once() {
        let mut v: Vec<(u32, f64)> = (0..120).map(|h| (h, (h as f64 * 0.2).cos())).collect();
        v[50].1 = 100.0;
        v[51].1 = f64::NAN;
        v.remove(70);
        let s = hourly(&v);
        let (_, rep) = clean(&s, &CleanConfig::default()).unwrap();
        let mut ts: Vec<_> = rep.entries.iter().map(|e| e.timestamp).collect();
        let n = ts.len();
        ts.sort();
        ts.dedup();
        assert_eq!(ts.len(), n);
    }
}
