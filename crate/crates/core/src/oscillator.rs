//! Discrete-time Lee oscillators.
//!
//! Two models live here. The original Lee oscillator uses logistic sigmoids
//! and is kept for reference dynamics. The retrograde-signaling variant
//! (LORS) feeds the previous output back into the excitatory and inhibitory
//! neurons, uses `tanh(mu * x)` everywhere and is the model the activation
//! module compiles into meta-activations.
//!
//! Both start from the all-zero state and hold the base input constant for
//! the whole run. Within a step the stimulus is computed first, the E, I and
//! Omega neurons are updated from the previous state, and the output is
//! formed from the updated neurons.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Number of internal steps an oscillator is iterated per stimulus.
pub const DEFAULT_STEPS: usize = 100;

/// Number of canonical LORS parameterizations.
pub const NUM_TYPES: u8 = 8;

/// Parameters of the original (sigmoid) Lee oscillator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeeParams {
    pub e1: f64,
    pub e2: f64,
    pub i1: f64,
    pub i2: f64,
    pub xi_e: f64,
    pub xi_i: f64,
    /// Decay factor of the `exp(-k S^2)` envelope.
    pub k: f64,
}

impl LeeParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("e1", self.e1),
            ("e2", self.e2),
            ("i1", self.i1),
            ("i2", self.i2),
            ("xi_e", self.xi_e),
            ("xi_i", self.xi_i),
            ("k", self.k),
        ];
        for (name, v) in fields {
            ensure_finite(name, v)?;
        }
        if self.k < 0.0 {
            return Err(Error::Domain(format!("k must be >= 0, got {}", self.k)));
        }
        Ok(())
    }
}

/// Parameters of a LORS oscillator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorsParams {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    /// Slope of `tanh(mu * x)`.
    pub mu: f64,
    /// Attenuation factor of the `exp(-k S^2)` envelope.
    pub k: f64,
    pub xi_e: f64,
    pub xi_i: f64,
    /// External stimulus ratio added as `e * sgn(i)`.
    pub e: f64,
}

impl LorsParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named_fields() {
            ensure_finite(name, v)?;
        }
        if self.k < 0.0 {
            return Err(Error::Domain(format!("k must be >= 0, got {}", self.k)));
        }
        if self.mu <= 0.0 {
            return Err(Error::Domain(format!("mu must be > 0, got {}", self.mu)));
        }
        if self.e < 0.0 {
            return Err(Error::Domain(format!("e must be >= 0, got {}", self.e)));
        }
        Ok(())
    }

    /// All thirteen fields in declaration order.
    pub fn named_fields(&self) -> [(&'static str, f64); 13] {
        [
            ("a1", self.a1),
            ("a2", self.a2),
            ("a3", self.a3),
            ("a4", self.a4),
            ("b1", self.b1),
            ("b2", self.b2),
            ("b3", self.b3),
            ("b4", self.b4),
            ("mu", self.mu),
            ("k", self.k),
            ("xi_e", self.xi_e),
            ("xi_i", self.xi_i),
            ("e", self.e),
        ]
    }

    /// Effective stimulus `S = i + e * sgn(i)` with `sgn(0) = 0`.
    pub fn stimulus(&self, base_input: f64) -> f64 {
        base_input + self.e * sign(base_input)
    }
}

/// Neuron activations of either oscillator model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OscState {
    pub e: f64,
    pub i: f64,
    pub omega: f64,
    /// Output of the previous step.
    pub l: f64,
}

impl OscState {
    fn validate(&self) -> Result<()> {
        ensure_finite("E", self.e)?;
        ensure_finite("I", self.i)?;
        ensure_finite("Omega", self.omega)?;
        ensure_finite("L", self.l)
    }
}

/// Output sequence of one constant-input run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub values: Vec<f64>,
    pub states: Option<Vec<OscState>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn last(&self) -> f64 {
        *self.values.last().expect("trajectory has at least one step")
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// 1-based index of the first step attaining the maximum.
    pub fn argmax_step(&self) -> usize {
        let max = self.max();
        self.values.iter().position(|&v| v == max).unwrap() + 1
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One step of the original sigmoid Lee oscillator, with `stimulus` used as `S(t)` directly.
pub fn lee_step(state: OscState, stimulus: f64, p: &LeeParams) -> Result<OscState> {
    state.validate()?;
    ensure_finite("stimulus", stimulus)?;
    p.validate()?;
    let e = logistic(p.e1 * state.e - p.e2 * state.i + stimulus - p.xi_e);
    let i = logistic(p.i1 * state.e - p.i2 * state.i - p.xi_i);
    let omega = logistic(stimulus);
    let l = (e - i) * (-p.k * stimulus * stimulus).exp() + omega;
    Ok(OscState { e, i, omega, l })
}

/// One LORS step driven by the unmodulated `base_input`.
pub fn lors_step(state: OscState, base_input: f64, p: &LorsParams) -> Result<OscState> {
    state.validate()?;
    ensure_finite("base input", base_input)?;
    p.validate()?;
    let s = p.stimulus(base_input);
    Ok(lors_update(
        state,
        s,
        p,
        (-p.k * s * s).exp(),
        (p.mu * s).tanh(),
    ))
}

#[inline]
fn lors_update(st: OscState, s: f64, p: &LorsParams, envelope: f64, omega: f64) -> OscState {
    let e = (p.mu * (p.a1 * st.l + p.a2 * st.e - p.a3 * st.i + p.a4 * s - p.xi_e)).tanh();
    let i = (p.mu * (p.b1 * st.l - p.b2 * st.e - p.b3 * st.i + p.b4 * s - p.xi_i)).tanh();
    let l = (e - i) * envelope + omega;
    OscState { e, i, omega, l }
}

fn run(base_input: f64, p: &LorsParams, n_steps: usize, keep_states: bool) -> Result<Trajectory> {
    ensure_finite("base input", base_input)?;
    p.validate()?;
    if n_steps == 0 {
        return Err(Error::Argument("n_steps must be >= 1".into()));
    }
    let s = p.stimulus(base_input);
    let envelope = (-p.k * s * s).exp();
    let omega = (p.mu * s).tanh();
    let mut state = OscState::default();
    let mut values = Vec::with_capacity(n_steps);
    let mut states = keep_states.then(|| Vec::with_capacity(n_steps));
    for _ in 0..n_steps {
        state = lors_update(state, s, p, envelope, omega);
        values.push(state.l);
        if let Some(states) = states.as_mut() {
            states.push(state);
        }
    }
    Ok(Trajectory { values, states })
}

/// Runs a LORS oscillator from the zero state for `n_steps` with constant input.
pub fn simulate(base_input: f64, p: &LorsParams, n_steps: usize) -> Result<Trajectory> {
    run(base_input, p, n_steps, false)
}

/// Like [`simulate`], also recording every intermediate state.
pub fn simulate_with_states(base_input: f64, p: &LorsParams, n_steps: usize) -> Result<Trajectory> {
    run(base_input, p, n_steps, true)
}

/// Runs the original Lee oscillator from the zero state with a constant stimulus.
pub fn simulate_lee(stimulus: f64, p: &LeeParams, n_steps: usize) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::Argument("n_steps must be >= 1".into()));
    }
    let mut state = OscState::default();
    let mut values = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        state = lee_step(state, stimulus, p)?;
        values.push(state.l);
    }
    Ok(Trajectory {
        values,
        states: None,
    })
}

/// The eight canonical LORS parameterizations, indexed 1..=8.
pub fn builtin_params(type_id: u8) -> Result<LorsParams> {
    // Columns: a1 a2 a3 a4 b1 b2 b3 b4 mu k
    const TABLE: [[f64; 10]; 8] = [
        [0.0, 5.0, 5.0, 1.0, 0.0, -1.0, 1.0, 0.0, 5.0, 500.0],
        [0.5, 0.55, 0.55, -0.5, 0.5, -0.55, -0.55, -0.5, 1.0, 50.0],
        [0.5, 0.6, 0.55, 0.5, -0.5, -0.6, -0.55, 0.5, 1.0, 50.0],
        [-0.5, 0.55, 0.55, -0.5, -0.5, -0.55, -0.55, 0.5, 1.0, 50.0],
        [-0.9, 0.9, 0.9, -0.9, 0.9, -0.9, -0.9, 0.9, 1.0, 50.0],
        [-0.9, 0.9, 0.9, -0.9, 0.9, -0.9, -0.9, 0.9, 1.0, 300.0],
        [-5.0, 5.0, 5.0, -5.0, 1.0, -1.0, -1.0, 1.0, 1.0, 50.0],
        [-5.0, 5.0, 5.0, -5.0, 1.0, -1.0, -1.0, 1.0, 1.0, 300.0],
    ];
    if !(1..=NUM_TYPES).contains(&type_id) {
        return Err(Error::Argument(format!(
            "oscillator type must be in 1..={NUM_TYPES}, got {type_id}"
        )));
    }
    let [a1, a2, a3, a4, b1, b2, b3, b4, mu, k] = TABLE[usize::from(type_id - 1)];
    Ok(LorsParams {
        a1,
        a2,
        a3,
        a4,
        b1,
        b2,
        b3,
        b4,
        mu,
        k,
        xi_e: 0.0,
        xi_i: 0.0,
        e: 0.001,
    })
}

/// Settled outputs of a constant-input sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BifurcationData {
    pub stimulus_grid: Vec<f64>,
    /// `settled[j]` holds the last `keep_last` outputs for `stimulus_grid[j]`.
    pub settled: Vec<Vec<f64>>,
}

impl BifurcationData {
    /// `max - min` of the retained values at grid index `j`.
    pub fn spread(&self, j: usize) -> f64 {
        let vals = &self.settled[j];
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }

    pub fn num_rows(&self) -> usize {
        self.settled.iter().map(Vec::len).sum()
    }

    /// Writes one `x,lors` row per retained value.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,lors")?;
        for (x, vals) in self.stimulus_grid.iter().zip(&self.settled) {
            for v in vals {
                writeln!(out, "{x:.16e},{v:.16e}")?;
            }
        }
        Ok(())
    }
}

/// `n` equally spaced points from `lo` to `hi` inclusive.
///
/// Points are formed as a weighted blend of the endpoints so that symmetric
/// ranges place an exact `0.0` at the centre.
pub(crate) fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let denom = (n - 1) as f64;
    (0..n)
        .map(|j| (lo * (n - 1 - j) as f64 + hi * j as f64) / denom)
        .collect()
}

/// Sweeps `n_x` equally spaced stimuli over `[x_lo, x_hi]`.
pub fn bifurcation_sweep(
    p: &LorsParams,
    x_lo: f64,
    x_hi: f64,
    n_x: usize,
    n_steps: usize,
    keep_last: usize,
) -> Result<BifurcationData> {
    ensure_finite("x_lo", x_lo)?;
    ensure_finite("x_hi", x_hi)?;
    if n_x == 0 {
        return Err(Error::Argument("stimulus grid is empty".into()));
    }
    if x_lo >= x_hi {
        return Err(Error::Argument(format!(
            "expected x_lo < x_hi, got [{x_lo}, {x_hi}]"
        )));
    }
    bifurcation_on_grid(p, &linspace(x_lo, x_hi, n_x), n_steps, keep_last)
}

/// Sweeps an explicit, strictly ascending stimulus grid.
pub fn bifurcation_on_grid(
    p: &LorsParams,
    grid: &[f64],
    n_steps: usize,
    keep_last: usize,
) -> Result<BifurcationData> {
    if grid.is_empty() {
        return Err(Error::Argument("stimulus grid is empty".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument("stimulus grid must be strictly ascending".into()));
    }
    if keep_last == 0 || keep_last > n_steps {
        return Err(Error::Argument(format!(
            "keep_last must be in 1..={n_steps}, got {keep_last}"
        )));
    }
    p.validate()?;
    let settled = grid
        .par_iter()
        .map(|&x| {
            let traj = simulate(x, p, n_steps)?;
            Ok(traj.values[n_steps - keep_last..].to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BifurcationData {
        stimulus_grid: grid.to_vec(),
        settled,
    })
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn outputs_stay_bounded(t in 1u8..=8, x in -50.0f64..50.0) {
            let traj = simulate_with_states(x, &builtin_params(t).unwrap(), 100).unwrap();
            for st in traj.states.unwrap() {
                prop_assert!(st.e.abs() <= 1.0 && st.i.abs() <= 1.0 && st.omega.abs() <= 1.0);
                prop_assert!(st.l.abs() <= 3.0);
            }
        }

        #[test]
        fn type1_envelope_bound(x in 0.5f64..5.0, neg in any::<bool>()) {
            let x = if neg { -x } else { x };
            let p = builtin_params(1).unwrap();
            let s = p.stimulus(x);
            let bound = 2.0 * (-p.k * s * s).exp();
            for v in simulate(x, &p, 100).unwrap().values {
                prop_assert!((v - (p.mu * s).tanh()).abs() <= bound);
            }
        }

        #[test]
        fn simulate_is_deterministic(t in 1u8..=8, x in -3.0f64..3.0, n in 1usize..200) {
            let p = builtin_params(t).unwrap();
            let a = simulate(x, &p, n).unwrap();
            let b = simulate(x, &p, n).unwrap();
            prop_assert_eq!(a.values.len(), n);
            prop_assert!(a.values.iter().zip(&b.values).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }
}
