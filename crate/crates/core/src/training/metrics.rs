use crate::data::{NormStats, Window};
use crate::error::{Error, Result};
use crate::model::Cotn;
use crate::tensor::Tensor;

fn check(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("metric", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    if pred.numel() == 0 {
        return Err(Error::Argument("metric over an empty tensor".into()));
    }
    Ok(())
}

pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check(pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.numel() as f64)
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check(pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.numel() as f64)
}

/// Errors of one split, on the original scale of the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitMetrics {
    pub mae: f64,
    pub mse: f64,
    /// Forecast MSE on the normalized scale, the quantity used for model selection.
    pub loss: f64,
}

/// Forecasts every window and scores the denormalized predictions.
pub fn evaluate(model: &Cotn, windows: &[Window], stats: &NormStats) -> Result<SplitMetrics> {
    if windows.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty split".into()));
    }
    let h = model.config().horizon;
    let n = windows.len() * h * model.config().n_targets;
    let (mut p_all, mut t_all, mut p_norm, mut t_norm) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for w in windows {
        let y = model.forecast(&w.enc, &w.dec)?;
        for (&p, &t) in y.data().iter().zip(w.target.data()) {
            p_norm.push(p);
            t_norm.push(t);
            p_all.push(stats.denormalize_target(p));
            t_all.push(stats.denormalize_target(t));
        }
    }
    let v = |d: Vec<f64>| Tensor::vector(d);
    let (pn, tn) = (v(p_norm), v(t_norm));
    let (pa, ta) = (v(p_all), v(t_all));
    Ok(SplitMetrics {
        mae: mae(&pa, &ta)?,
        mse: mse(&pa, &ta)?,
        loss: mse(&pn, &tn)?,
    })
}
