use std::fmt;
use std::io::Read;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column layout of an input file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    /// Electricity-transformer style: any load columns plus the `OT` target.
    Ett,
    /// Market bars: `open,high,low,close,volume`.
    Ohlcv,
}

pub const OHLCV_COLUMNS: [&str; 5] = ["open", "high", "low", "close", "volume"];

impl Schema {
    pub fn target_column(&self) -> &'static str {
        match self {
            Schema::Ett => "OT",
            Schema::Ohlcv => "close",
        }
    }
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ett" => Ok(Schema::Ett),
            "ohlcv" => Ok(Schema::Ohlcv),
            other => Err(Error::Argument(format!(
                "unknown schema `{other}` (expected `ett` or `ohlcv`)"
            ))),
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schema::Ett => "ett",
            Schema::Ohlcv => "ohlcv",
        })
    }
}

/// A timestamped multivariate series, possibly split into contiguous segments.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub schema: Schema,
    pub timestamps: Vec<NaiveDateTime>,
    pub names: Vec<String>,
    /// Column-major values; `NaN` marks a missing entry.
    pub columns: Vec<Vec<f64>>,
    /// `duplicate[i]` is set when row `i` repeats the timestamp of row `i - 1`.
    pub duplicate: Vec<bool>,
    /// Sampling period in seconds.
    pub period_secs: i64,
    /// Row ranges that are free of discontinuities; they tile `0..len`.
    pub segments: Vec<Range<usize>>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.column_index(name).map(|i| self.columns[i].as_slice())
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n.eq_ignore_ascii_case(name))
    }

    pub fn num_duplicates(&self) -> usize {
        self.duplicate.iter().filter(|&&d| d).count()
    }

    /// Writes the series as CSV with a `date` column and 17-significant-digit values.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "date,{}", self.names.join(","))?;
        for (r, ts) in self.timestamps.iter().enumerate() {
            write!(out, "{}", ts.format(TIMESTAMP_FORMAT))?;
            for col in &self.columns {
                let v = col[r];
                if v.is_nan() {
                    write!(out, ",")?;
                } else {
                    write!(out, ",{v:.16e}")?;
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    const FORMATS: [&str; 5] = [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%dT%H:%M:%S%.f",
    ];
    let trimmed = s.strip_suffix('Z').unwrap_or(s);
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(trimmed, f).ok())
        .or_else(|| NaiveDateTime::parse_from_str(trimmed, "%Y-%m-%d %H:%M:%S%.f").ok())
        .or_else(|| {
            NaiveDate::parse_from_str(trimmed, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

/// Loads a CSV file; the sampling period is inferred as the most common timestamp step.
pub fn load_csv(path: &Path, schema: Schema) -> Result<RawSeries> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, schema, None)
}

/// Parses CSV text. With `period_secs`, timestamps are validated against it instead of an inferred step.
pub fn parse_csv<R: Read>(input: R, schema: Schema, period_secs: Option<i64>) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = rdr.records();
    let header = match records.next() {
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
        Some(r) => r.map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?,
    };
    let names: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    check_header(&names, schema)?;

    let mut rows: Vec<(usize, NaiveDateTime, Vec<f64>)> = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if rec.len() != names.len() + 1 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", names.len() + 1, rec.len()),
            });
        }
        let ts = parse_timestamp(&rec[0]).ok_or_else(|| Error::Parse {
            line,
            msg: format!("invalid timestamp `{}`", &rec[0]),
        })?;
        let mut values = Vec::with_capacity(names.len());
        for (field, name) in rec.iter().skip(1).zip(&names) {
            let v = if field.is_empty() || field.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                field.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    msg: format!("column `{name}`: `{field}` is not a number"),
                })?
            };
            if v.is_infinite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("column `{name}` is infinite"),
                });
            }
            values.push(v);
        }
        rows.push((line, ts, values));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    rows.sort_by_key(|r| r.1);

    let period = match period_secs {
        Some(p) if p > 0 => p,
        Some(p) => return Err(Error::Argument(format!("sampling period must be positive, got {p}"))),
        None => infer_period(&rows.iter().map(|r| r.1).collect::<Vec<_>>()).ok_or_else(|| {
            Error::Parse {
                line: 2,
                msg: "need at least two distinct timestamps to infer the sampling period".into(),
            }
        })?,
    };
    for w in rows.windows(2) {
        let step = (w[1].1 - w[0].1).num_seconds();
        if step != 0 && step % period != 0 {
            return Err(Error::Parse {
                line: w[1].0,
                msg: format!("timestamp step of {step}s is not a multiple of the {period}s sampling period"),
            });
        }
    }

    let n = rows.len();
    let mut columns = vec![Vec::with_capacity(n); names.len()];
    let mut timestamps = Vec::with_capacity(n);
    let mut duplicate = Vec::with_capacity(n);
    for (i, (_, ts, values)) in rows.into_iter().enumerate() {
        duplicate.push(i > 0 && timestamps[i - 1] == ts);
        timestamps.push(ts);
        for (c, v) in values.into_iter().enumerate() {
            columns[c].push(v);
        }
    }
    Ok(RawSeries {
        schema,
        timestamps,
        names,
        columns,
        duplicate,
        period_secs: period,
        segments: vec![0..n],
    })
}

fn check_header(names: &[String], schema: Schema) -> Result<()> {
    if names.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "header needs a timestamp column and at least one value column".into(),
        });
    }
    let has = |c: &str| names.iter().any(|n| n.eq_ignore_ascii_case(c));
    let missing: Vec<&str> = match schema {
        Schema::Ett => ["OT"].into_iter().filter(|c| !has(c)).collect(),
        Schema::Ohlcv => OHLCV_COLUMNS.into_iter().filter(|c| !has(c)).collect(),
    };
    if !missing.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header does not match the {schema} schema: missing {missing:?}"),
        });
    }
    Ok(())
}

fn infer_period(ts: &[NaiveDateTime]) -> Option<i64> {
    let mut steps: Vec<i64> = ts
        .windows(2)
        .map(|w| (w[1] - w[0]).num_seconds())
        .filter(|&s| s > 0)
        .collect();
    if steps.is_empty() {
        return None;
    }
    steps.sort_unstable();
    let mut best = (steps[0], 0usize);
    let mut i = 0;
    while i < steps.len() {
        let j = steps[i..].iter().take_while(|&&s| s == steps[i]).count();
        if j > best.1 {
            best = (steps[i], j);
        }
        i += j;
    }
    Some(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ETT: &str = "date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT
2016-07-01 00:00:00,5.827,2.009,1.599,0.462,4.203,1.340,30.531
2016-07-01 01:00:00,5.693,2.076,1.492,0.426,4.142,1.371,27.787
2016-07-01 02:00:00,5.157,1.741,1.279,0.355,3.777,1.218,27.787
2016-07-01 03:00:00,5.090,1.942,1.279,0.391,3.807,1.279,25.044
";

    #[test]
    fn loads_ett_header() {
        let s = parse_csv(ETT.as_bytes(), Schema::Ett, None).unwrap();
        assert_eq!(s.names.len(), 7);
        assert_eq!(s.names[6], "OT");
        assert_eq!(s.len(), 4);
        assert_eq!(s.period_secs, 3600);
        assert_eq!(s.column("OT").unwrap()[1], 27.787);
        assert_eq!(s.num_duplicates(), 0);
    }

    #[test]
    fn empty_file_is_a_parse_error() {
        assert!(matches!(
            parse_csv("".as_bytes(), Schema::Ett, None),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_csv("date,OT\n".as_bytes(), Schema::Ett, None),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn duplicate_timestamp_is_flagged() {
        let text = "date,OT
2020-01-01 00:00:00,1.0
2020-01-01 01:00:00,2.0
2020-01-01 01:00:00,2.5
2020-01-01 02:00:00,3.0
";
        let s = parse_csv(text.as_bytes(), Schema::Ett, None).unwrap();
        assert_eq!(s.duplicate, vec![false, false, true, false]);
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "date,OT\n2020-01-01 00:00:00,1.0\n2020-01-01 01:00:00,abc\n";
        match parse_csv(text.as_bytes(), Schema::Ett, None) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("abc"));
            }
            other => panic!("{other:?}"),
        }
        let text = "date,OT\nnot-a-date,1.0\n";
        assert!(matches!(
            parse_csv(text.as_bytes(), Schema::Ett, None),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn header_must_match_schema() {
        assert!(parse_csv(ETT.as_bytes(), Schema::Ohlcv, None).is_err());
        assert!("parquet".parse::<Schema>().is_err());
        assert_eq!("OHLCV".parse::<Schema>().unwrap(), Schema::Ohlcv);
    }

    #[test]
    fn off_grid_timestamps_are_rejected() {
        let text = "date,OT
2020-01-01 00:00:00,1
2020-01-01 01:00:00,1
2020-01-01 02:00:00,1
2020-01-01 02:30:00,1
";
        assert!(matches!(
            parse_csv(text.as_bytes(), Schema::Ett, None),
            Err(Error::Parse { line: 5, .. })
        ));
    }

    #[test]
    fn unsorted_input_is_sorted_and_missing_is_nan() {
        let text = "date,open,high,low,close,volume
2020-01-01T09:31:00,1,1,1,,10
2020-01-01T09:30:00,1,1,1,1,10
";
        let s = parse_csv(text.as_bytes(), Schema::Ohlcv, None).unwrap();
        assert!(s.timestamps[0] < s.timestamps[1]);
        assert!(s.column("close").unwrap()[1].is_nan());
        assert_eq!(s.period_secs, 60);
    }

    #[test]
    fn csv_round_trip() {
        let s = parse_csv(ETT.as_bytes(), Schema::Ett, None).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = parse_csv(buf.as_slice(), Schema::Ett, None).unwrap();
        assert_eq!(back, s);
    }
}
