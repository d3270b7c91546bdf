use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::features::FeatureFrame;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(*p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "split ratios must be non-negative and sum to 1, got {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }

    /// Chronological row ranges for the three splits of `n` rows.
    pub fn ranges(&self, n: usize) -> [Range<usize>; 3] {
        // the small offset keeps 0.7 + 0.1 from flooring to one row short
        let cut = |r: f64| ((n as f64 * r + 1e-9).floor() as usize).min(n);
        let a = cut(self.train);
        let b = cut(self.train + self.val).max(a);
        let b = if self.test == 0.0 { n } else { b };
        [0..a, a..b, b..n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub enc_len: usize,
    pub label_len: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.enc_len == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(Error::Argument("enc_len, horizon and stride must be at least 1".into()));
        }
        if self.label_len > self.enc_len {
            return Err(Error::Argument(format!(
                "label_len {} exceeds enc_len {}",
                self.label_len, self.enc_len
            )));
        }
        Ok(())
    }

    pub fn span(&self) -> usize {
        self.enc_len + self.horizon
    }
}

/// One training example; `start` is the frame row of the first encoder step.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start: usize,
    /// `[enc_len × features]`
    pub enc: Tensor,
    /// `[(label_len + horizon) × features]`: known context then zero placeholders.
    pub dec: Tensor,
    /// `[horizon × 1]`
    pub target: Tensor,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowBatch {
    pub windows: Vec<Window>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Window> {
        self.windows.iter()
    }

    /// Encoder inputs stacked as `[batch × enc_len × features]`.
    pub fn encoder_inputs(&self) -> Option<Tensor> {
        stack(self.windows.iter().map(|w| &w.enc))
    }

    pub fn decoder_inputs(&self) -> Option<Tensor> {
        stack(self.windows.iter().map(|w| &w.dec))
    }

    pub fn targets(&self) -> Option<Tensor> {
        stack(self.windows.iter().map(|w| &w.target))
    }

    /// Frame rows covered by each window, encoder start to last target step.
    pub fn spans(&self, spec: &WindowSpec) -> Vec<Range<usize>> {
        self.windows.iter().map(|w| w.start..w.start + spec.span()).collect()
    }
}

fn stack<'a>(mut it: impl Iterator<Item = &'a Tensor>) -> Option<Tensor> {
    let first = it.next()?;
    let mut shape = vec![1];
    shape.extend_from_slice(first.shape());
    let mut data = first.data().to_vec();
    for t in it {
        data.extend_from_slice(t.data());
        shape[0] += 1;
    }
    Tensor::new(shape, data).ok()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedSegment {
    pub split: &'static str,
    pub rows: Range<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowSplits {
    pub train: WindowBatch,
    pub val: WindowBatch,
    pub test: WindowBatch,
    pub skipped: Vec<SkippedSegment>,
}

pub fn build_window(frame: &FeatureFrame, spec: &WindowSpec, s: usize) -> Window {
    let f = frame.num_features();
    let (l, lab, h) = (spec.enc_len, spec.label_len, spec.horizon);
    let mut enc = Vec::with_capacity(l * f);
    for r in s..s + l {
        enc.extend(frame.columns.iter().map(|c| c[r]));
    }
    let mut dec = Vec::with_capacity((lab + h) * f);
    for r in s + l - lab..s + l {
        dec.extend(frame.columns.iter().map(|c| c[r]));
    }
    dec.resize((lab + h) * f, 0.0);
    let target = frame.columns[frame.target][s + l..s + l + h].to_vec();
    Window {
        start: s,
        enc: Tensor::new(vec![l, f], enc).unwrap(),
        dec: Tensor::new(vec![lab + h, f], dec).unwrap(),
        target: Tensor::new(vec![h, 1], target).unwrap(),
        weight: 1.0,
    }
}

/// Starts of all windows with the given stride inside `rows`.
pub fn window_starts(rows: Range<usize>, spec: &WindowSpec) -> Vec<usize> {
    if rows.len() < spec.span() {
        return Vec::new();
    }
    (rows.start..=rows.end - spec.span()).step_by(spec.stride).collect()
}

/// Splits chronologically, then slides windows inside each split and segment.
pub fn window(frame: &FeatureFrame, spec: &WindowSpec, ratios: &SplitRatios) -> Result<WindowSplits> {
    spec.validate()?;
    ratios.validate()?;
    let mut out = WindowSplits::default();
    let [tr, va, te] = ratios.ranges(frame.len());
    for (name, range) in [("train", tr), ("val", va), ("test", te)] {
        let mut batch = WindowBatch::default();
        for seg in &frame.segments {
            let a = seg.start.max(range.start);
            let b = seg.end.min(range.end);
            if a >= b {
                continue;
            }
            if b - a < spec.span() {
                out.skipped.push(SkippedSegment {
                    split: name,
                    rows: a..b,
                    reason: format!("{} rows < enc_len + horizon = {}", b - a, spec.span()),
                });
                continue;
            }
            for s in window_starts(a..b, spec) {
                batch.windows.push(build_window(frame, spec, s));
            }
        }
        match name {
            "train" => out.train = batch,
            "val" => out.val = batch,
            _ => out.test = batch,
        }
    }
    Ok(out)
}
