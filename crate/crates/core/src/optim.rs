//! RAdam with a layer-wise trust ratio (Ralamb), wrapped in Lookahead.
//!
//! The step functions work on flat slices and are generic over the scalar
//! type, so the same code runs in `f32` training and in `f64` oracle tests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sonotag_tensor::Scalar;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lookahead: bool,
    pub lookahead_k: u64,
    pub lookahead_alpha: f64,
    pub trust_clip: f64,
    /// Global L2 gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            lookahead: true,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            trust_clip: 10.0,
            grad_clip: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return bad(format!("optim.lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("optim.{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.lookahead_k == 0 {
            return bad("optim.lookahead_k must be at least 1".into());
        }
        if !(self.lookahead_alpha > 0.0 && self.lookahead_alpha <= 1.0) {
            return bad(format!("optim.lookahead_alpha must lie in (0, 1], got {}", self.lookahead_alpha));
        }
        if self.weight_decay < 0.0 || !(self.trust_clip > 0.0) || self.eps < 0.0 {
            return bad("optim.weight_decay and optim.eps must be ≥ 0, optim.trust_clip > 0".into());
        }
        Ok(())
    }
}

/// `ρ∞ = 2 / (1 − β₂) − 1`.
pub fn rho_inf(beta2: f64) -> f64 {
    2.0 / (1.0 - beta2) - 1.0
}

/// Length of the approximated simple moving average at step `t ≥ 1`.
pub fn rho_t(beta2: f64, t: u64) -> f64 {
    let bt = beta2.powi(t as i32);
    rho_inf(beta2) - 2.0 * t as f64 * bt / (1.0 - bt)
}

/// Variance rectification term `r_t`, or `None` while `ρ_t ≤ 4`.
pub fn rectifier(beta2: f64, t: u64) -> Option<f64> {
    let (ri, rt) = (rho_inf(beta2), rho_t(beta2, t));
    (rt > 4.0).then(|| (((rt - 4.0) * (rt - 2.0) * ri) / ((ri - 4.0) * (ri - 2.0) * rt)).sqrt())
}

/// First and second moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// Updates the moments with `g` and returns the RAdam step (learning rate
/// included) for step `t ≥ 1`.
pub fn radam_update<T: Scalar>(g: &[T], state: &mut Moments<T>, t: u64, cfg: &OptimConfig) -> Vec<T> {
    assert_eq!(g.len(), state.m.len(), "gradient and state lengths differ");
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let bc1 = T::of(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = T::of(1.0 - cfg.beta2.powi(t as i32));
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    let rect = rectifier(cfg.beta2, t).map(T::of);
    let mut step = Vec::with_capacity(g.len());
    for ((gi, mi), vi) in g.iter().zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *mi = b1 * *mi + (T::one() - b1) * *gi;
        *vi = b2 * *vi + (T::one() - b2) * *gi * *gi;
        let m_hat = *mi / bc1;
        step.push(match rect {
            Some(r) => lr * r * m_hat / ((*vi / bc2).sqrt() + eps),
            None => lr * m_hat,
        });
    }
    step
}

/// `p ← p − step` with the RAdam step.
pub fn radam_step<T: Scalar>(p: &mut [T], g: &[T], state: &mut Moments<T>, t: u64, cfg: &OptimConfig) {
    let step = radam_update(g, state, t, cfg);
    for (pi, si) in p.iter_mut().zip(step) {
        *pi = *pi - si;
    }
}

fn l2<T: Scalar>(x: &[T]) -> f64 {
    x.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
}

/// `‖p‖ / (‖u‖ + eps)` clamped to `(0, clip]`; 1 when either norm is 0.
pub fn trust_ratio(p_norm: f64, u_norm: f64, eps: f64, clip: f64) -> f64 {
    if p_norm == 0.0 || u_norm == 0.0 {
        1.0
    } else {
        (p_norm / (u_norm + eps)).min(clip)
    }
}

/// Ralamb: `u = radam step + wd·p`, then `p ← p − trust·u`. Returns the
/// trust ratio used.
pub fn ralamb_step<T: Scalar>(p: &mut [T], g: &[T], state: &mut Moments<T>, t: u64, cfg: &OptimConfig) -> f64 {
    let mut u = radam_update(g, state, t, cfg);
    let wd = T::of(cfg.weight_decay);
    for (ui, pi) in u.iter_mut().zip(p.iter()) {
        *ui = *ui + wd * *pi;
    }
    let trust = trust_ratio(l2(p), l2(&u), cfg.eps, cfg.trust_clip);
    let tr = T::of(trust);
    for (pi, ui) in p.iter_mut().zip(u) {
        *pi = *pi - tr * ui;
    }
    trust
}

/// Lookahead after inner step `t`: every `k` steps `φ ← φ + α(θ − φ)` and
/// `θ ← φ`. Returns whether a sync happened.
pub fn lookahead_step<T: Scalar>(fast: &mut [T], slow: &mut [T], t: u64, cfg: &OptimConfig) -> bool {
    if t == 0 || t % cfg.lookahead_k != 0 {
        return false;
    }
    let a = T::of(cfg.lookahead_alpha);
    for (f, s) in fast.iter_mut().zip(slow.iter_mut()) {
        *s = *s + a * (*f - *s);
        *f = *s;
    }
    true
}

/// Optimizer state of one named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamState<T> {
    pub moments: Moments<T>,
    /// Lookahead slow weights.
    pub slow: Vec<T>,
}

/// Ralamb + Lookahead over a set of named parameters.
///
/// Call [`Optimizer::begin_step`] once per step, then [`Optimizer::update`]
/// for every trainable parameter.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub config: OptimConfig,
    step: u64,
    states: BTreeMap<String, ParamState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            states: BTreeMap::new(),
        })
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, p: &mut [T], g: &[T]) -> Result<f64> {
        if self.step == 0 {
            return Err(Error::Config("Optimizer::update called before begin_step".into()));
        }
        if p.len() != g.len() {
            return Err(Error::Config(format!(
                "parameter {name} has {} values but its gradient {}",
                p.len(),
                g.len()
            )));
        }
        let st = self.states.entry(name.to_string()).or_insert_with(|| ParamState {
            moments: Moments::zeros(p.len()),
            slow: p.to_vec(),
        });
        if st.slow.len() != p.len() {
            return Err(Error::Config(format!("parameter {name} changed size")));
        }
        let trust = ralamb_step(p, g, &mut st.moments, self.step, &self.config);
        if self.config.lookahead {
            lookahead_step(p, &mut st.slow, self.step, &self.config);
        }
        Ok(trust)
    }

    pub fn states(&self) -> &BTreeMap<String, ParamState<T>> {
        &self.states
    }

    /// Restores a saved state, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, states: BTreeMap<String, ParamState<T>>) {
        self.step = step;
        self.states = states;
    }
}

/// Scales every gradient so that the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [&mut [T]], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|v| v.f64() * v.f64()).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}
