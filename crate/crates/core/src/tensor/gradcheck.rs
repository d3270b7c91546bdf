//! Central finite-difference checks of analytic gradients.

use super::array::Tensor;
use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-10)
}

/// Largest elementwise relative difference between two equally shaped tensors.
pub fn max_rel_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Checks the gradient of `f` with respect to a single leaf initialised to `x0`.
///
/// Returns the largest relative error between backward and central differences.
pub fn check_leaf_gradient<F>(x0: &Tensor, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(x0.clone());
    let loss = f(&mut g, x)?;
    let grads = g.backward(loss)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(t);
        let l = f(&mut g, x)?;
        Ok(g.value(l).item())
    };
    let mut numeric = Tensor::zeros(x0.shape());
    for i in 0..x0.numel() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += h;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= h;
        numeric.data_mut()[i] = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    Ok(max_rel_error(&analytic, &numeric))
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Initial central-difference step.
    pub step: f64,
    /// How many times the step is shrunk tenfold when a perturbation changes smooth piece.
    pub max_shrinks: usize,
    pub rel_tol: f64,
    /// Differences below this are accepted as round-off. The estimated rounding
    /// error of the difference quotient is used instead when it is larger.
    pub abs_tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_shrinks: 2,
            rel_tol: 1e-4,
            abs_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries skipped because every tried step moved some input across a kink.
    pub excluded: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Checks every scalar of every parameter in `store`.
///
/// `build` must construct the loss on the given graph from the given store.
/// Piece tracking is enabled on every graph; a difference quotient is only
/// used when all perturbed evaluations stay on the same smooth pieces as
/// the unperturbed one. Quotients at h and h/2 are extrapolated so the
/// leading truncation term cancels.
pub fn check_param_gradients<F>(store: &ParamStore, opts: &GradCheckOptions, build: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::with_piece_tracking();
    let loss = build(store, &mut g)?;
    let analytic = g.backward(loss)?.for_store(store);
    let base_pieces = g.pieces().to_vec();
    drop(g);

    let eval = |s: &ParamStore| -> Result<(f64, Vec<i64>)> {
        let mut g = Graph::with_piece_tracking();
        let l = build(s, &mut g)?;
        Ok((g.value(l).item(), g.pieces().to_vec()))
    };

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    for (k, &id) in ids.iter().enumerate() {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            let mut numeric = None;
            let mut h = opts.step;
            for _ in 0..=opts.max_shrinks {
                // central differences at h and h/2, combined to cancel the h^2 term
                let mut quotients = [0.0; 2];
                let mut scale: f64 = 0.0;
                let mut same = true;
                for (q, step) in quotients.iter_mut().zip([h, h / 2.0]) {
                    work.get_mut(id).data_mut()[i] = orig + step;
                    let (lp, pp) = eval(&work)?;
                    work.get_mut(id).data_mut()[i] = orig - step;
                    let (lm, pm) = eval(&work)?;
                    work.get_mut(id).data_mut()[i] = orig;
                    same &= pp == base_pieces && pm == base_pieces;
                    if !same {
                        break;
                    }
                    *q = (lp - lm) / (2.0 * step);
                    scale = scale.max(lp.abs()).max(lm.abs());
                }
                if same {
                    // loss values carry a few dozen ulps of accumulated rounding; the
                    // extrapolated quotient amplifies that by at most 3/h
                    let noise = 3.0 * 32.0 * f64::EPSILON * scale / h;
                    numeric = Some(((4.0 * quotients[1] - quotients[0]) / 3.0, noise));
                    break;
                }
                h /= 10.0;
            }
            let Some((numeric, noise)) = numeric else {
                report.excluded += 1;
                continue;
            };
            let a = analytic[k].data()[i];
            report.checked += 1;
            let diff = (a - numeric).abs();
            let rel = rel_err(a, numeric);
            let floor = opts.abs_tol.max(noise);
            if a.abs().max(numeric.abs()) > 100.0 * floor {
                report.max_rel_error = report.max_rel_error.max(rel);
            }
            if rel > opts.rel_tol && diff > floor {
                report.failures.push(GradMismatch {
                    param: store.name(id).to_owned(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
