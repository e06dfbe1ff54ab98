//! First-order optimizers over flat `f32` parameter vectors.
//!
//! [`Lookahead`] wraps any other optimizer, so Ranger is
//! `Lookahead<RAdam>` and "A+LH" is `Lookahead<Adam>`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("length mismatch: expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid hyperparameter: {0}")]
    BadHyperparameter(String),
    #[error("optimizer state does not match: {0}")]
    StateMismatch(String),
}

/// Serializable snapshot of an optimizer's internal state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: String,
    pub step: u64,
    pub counters: BTreeMap<String, u64>,
    pub buffers: BTreeMap<String, Vec<f32>>,
}

impl OptimizerState {
    fn take(&self, kind: &str, name: &str, len: usize) -> Result<Vec<f32>, OptimError> {
        if self.kind != kind {
            return Err(OptimError::StateMismatch(format!(
                "state for {} loaded into {kind}",
                self.kind
            )));
        }
        match self.buffers.get(name) {
            Some(b) if b.len() == len || len == usize::MAX => Ok(b.clone()),
            Some(b) => Err(OptimError::LengthMismatch {
                expected: len,
                actual: b.len(),
            }),
            None => Err(OptimError::StateMismatch(format!("missing buffer {name}"))),
        }
    }
}

pub trait Optimizer: Send {
    /// Apply one update in place.
    fn step(&mut self, params: &mut [f32], grads: &[f32]) -> Result<(), OptimError>;
    fn state(&self) -> OptimizerState;
    fn load_state(&mut self, state: &OptimizerState) -> Result<(), OptimError>;
    fn name(&self) -> String;
}

fn check_lengths(expected: usize, params: &[f32], grads: &[f32]) -> Result<(), OptimError> {
    for actual in [params.len(), grads.len()] {
        if actual != expected {
            return Err(OptimError::LengthMismatch { expected, actual });
        }
    }
    Ok(())
}

/// Plain gradient descent, `θ ← θ − lr·g`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    n: usize,
}

impl Sgd {
    pub fn new(n: usize, lr: f32) -> Self {
        Self { lr, n }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [f32], grads: &[f32]) -> Result<(), OptimError> {
        check_lengths(self.n, params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            *p -= self.lr * g;
        }
        Ok(())
    }

    fn state(&self) -> OptimizerState {
        OptimizerState {
            kind: "sgd".into(),
            ..Default::default()
        }
    }

    fn load_state(&mut self, state: &OptimizerState) -> Result<(), OptimError> {
        if state.kind != "sgd" {
            return Err(OptimError::StateMismatch(format!(
                "state for {} loaded into sgd",
                state.kind
            )));
        }
        Ok(())
    }

    fn name(&self) -> String {
        "SGD".into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    fn validate(&self) -> Result<(), OptimError> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(OptimError::BadHyperparameter(format!("{self:?}")))
        }
    }
}

/// Shared first/second moment bookkeeping for Adam and RAdam.
#[derive(Clone, Debug)]
struct Moments {
    t: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn update(&mut self, grads: &[f32], h: &AdamHyper) {
        self.t += 1;
        let (b1, b2) = (h.beta1 as f32, h.beta2 as f32);
        for ((m, v), &g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grads) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
        }
    }

    fn export(&self, kind: &str) -> OptimizerState {
        OptimizerState {
            kind: kind.into(),
            step: self.t,
            counters: BTreeMap::new(),
            buffers: BTreeMap::from([("m".into(), self.m.clone()), ("v".into(), self.v.clone())]),
        }
    }

    fn import(&mut self, kind: &str, s: &OptimizerState) -> Result<(), OptimError> {
        let n = self.m.len();
        self.m = s.take(kind, "m", n)?;
        self.v = s.take(kind, "v", n)?;
        self.t = s.step;
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub hyper: AdamHyper,
    moments: Moments,
}

impl Adam {
    pub fn new(n: usize, hyper: AdamHyper) -> Result<Self, OptimError> {
        hyper.validate()?;
        Ok(Self {
            hyper,
            moments: Moments::new(n),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.moments.t
    }

    pub fn moments(&self) -> (&[f32], &[f32]) {
        (&self.moments.m, &self.moments.v)
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [f32], grads: &[f32]) -> Result<(), OptimError> {
        check_lengths(self.moments.m.len(), params, grads)?;
        self.moments.update(grads, &self.hyper);
        let t = self.moments.t as i32;
        let bc1 = (1.0 - self.hyper.beta1.powi(t)) as f32;
        let bc2 = (1.0 - self.hyper.beta2.powi(t)) as f32;
        let (lr, eps) = (self.hyper.lr as f32, self.hyper.eps as f32);
        for ((p, &m), &v) in params.iter_mut().zip(&self.moments.m).zip(&self.moments.v) {
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    fn state(&self) -> OptimizerState {
        self.moments.export("adam")
    }

    fn load_state(&mut self, state: &OptimizerState) -> Result<(), OptimError> {
        self.moments.import("adam", state)
    }

    fn name(&self) -> String {
        "Adam".into()
    }
}

/// Rectified Adam: adaptive steps only once the variance estimate is
/// tractable (`ρ_t > 4`), momentum steps before that.
#[derive(Clone, Debug)]
pub struct RAdam {
    pub hyper: AdamHyper,
    moments: Moments,
    last_rectified: Option<bool>,
}

impl RAdam {
    pub fn new(n: usize, hyper: AdamHyper) -> Result<Self, OptimError> {
        hyper.validate()?;
        Ok(Self {
            hyper,
            moments: Moments::new(n),
            last_rectified: None,
        })
    }

    /// `ρ∞ = 2 / (1 − β2) − 1`.
    pub fn rho_inf(beta2: f64) -> f64 {
        2.0 / (1.0 - beta2) - 1.0
    }

    /// `ρ_t = ρ∞ − 2tβ2^t / (1 − β2^t)`.
    pub fn rho(beta2: f64, t: u64) -> f64 {
        let bt = beta2.powi(t as i32);
        Self::rho_inf(beta2) - 2.0 * t as f64 * bt / (1.0 - bt)
    }

    /// Variance rectification factor at step `t`, or `None` when the
    /// momentum-only branch applies.
    pub fn rectification(beta2: f64, t: u64) -> Option<f64> {
        let rho = Self::rho(beta2, t);
        if rho > 4.0 {
            let inf = Self::rho_inf(beta2);
            Some(((rho - 4.0) * (rho - 2.0) * inf / ((inf - 4.0) * (inf - 2.0) * rho)).sqrt())
        } else {
            None
        }
    }

    /// Whether the most recent step used the adaptive branch.
    pub fn last_step_rectified(&self) -> Option<bool> {
        self.last_rectified
    }
}

impl Optimizer for RAdam {
    fn step(&mut self, params: &mut [f32], grads: &[f32]) -> Result<(), OptimError> {
        check_lengths(self.moments.m.len(), params, grads)?;
        self.moments.update(grads, &self.hyper);
        let t = self.moments.t;
        let bc1 = (1.0 - self.hyper.beta1.powi(t as i32)) as f32;
        let lr = self.hyper.lr as f32;
        match Self::rectification(self.hyper.beta2, t) {
            Some(r) => {
                let bc2 = (1.0 - self.hyper.beta2.powi(t as i32)) as f32;
                let (r, eps) = (r as f32, self.hyper.eps as f32);
                for ((p, &m), &v) in params.iter_mut().zip(&self.moments.m).zip(&self.moments.v) {
                    let v_hat = (v / bc2).sqrt();
                    *p -= lr * r * (m / bc1) / (v_hat + eps);
                }
                self.last_rectified = Some(true);
            }
            None => {
                for (p, &m) in params.iter_mut().zip(&self.moments.m) {
                    *p -= lr * (m / bc1);
                }
                self.last_rectified = Some(false);
            }
        }
        Ok(())
    }

    fn state(&self) -> OptimizerState {
        self.moments.export("radam")
    }

    fn load_state(&mut self, state: &OptimizerState) -> Result<(), OptimError> {
        self.moments.import("radam", state)
    }

    fn name(&self) -> String {
        "RAdam".into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookaheadHyper {
    /// Synchronization period.
    pub k: u32,
    /// Slow-weight step size.
    pub alpha: f64,
}

impl Default for LookaheadHyper {
    fn default() -> Self {
        Self { k: 5, alpha: 0.5 }
    }
}

/// Slow/fast weight wrapper around an inner optimizer.
///
/// Every `k` inner steps the slow weights move toward the fast ones,
/// `φ ← αθ + (1 − α)φ`, and the fast weights restart from `φ`. The inner
/// optimizer keeps its state across synchronizations.
pub struct Lookahead<O> {
    pub hyper: LookaheadHyper,
    inner: O,
    slow: Option<Vec<f32>>,
    counter: u64,
}

impl<O: Optimizer> Lookahead<O> {
    pub fn new(inner: O, hyper: LookaheadHyper) -> Result<Self, OptimError> {
        if hyper.k == 0 || !(0.0..=1.0).contains(&hyper.alpha) {
            return Err(OptimError::BadHyperparameter(format!("{hyper:?}")));
        }
        Ok(Self {
            hyper,
            inner,
            slow: None,
            counter: 0,
        })
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }

    pub fn slow_weights(&self) -> Option<&[f32]> {
        self.slow.as_deref()
    }
}

impl<O: Optimizer> Optimizer for Lookahead<O> {
    fn step(&mut self, params: &mut [f32], grads: &[f32]) -> Result<(), OptimError> {
        if let Some(slow) = &self.slow {
            check_lengths(slow.len(), params, grads)?;
        }
        let slow = self.slow.get_or_insert_with(|| params.to_vec());
        self.inner.step(params, grads)?;
        self.counter += 1;
        if self.counter.is_multiple_of(self.hyper.k as u64) {
            let a = self.hyper.alpha as f32;
            let b = 1.0 - a;
            for (phi, theta) in slow.iter_mut().zip(params.iter_mut()) {
                *phi = a * *theta + b * *phi;
                *theta = *phi;
            }
        }
        Ok(())
    }

    fn state(&self) -> OptimizerState {
        let inner = self.inner.state();
        let mut buffers: BTreeMap<String, Vec<f32>> = inner
            .buffers
            .into_iter()
            .map(|(k, v)| (format!("inner.{k}"), v))
            .collect();
        if let Some(slow) = &self.slow {
            buffers.insert("slow".into(), slow.clone());
        }
        let mut counters: BTreeMap<String, u64> = inner
            .counters
            .into_iter()
            .map(|(k, v)| (format!("inner.{k}"), v))
            .collect();
        counters.insert("inner.step".into(), inner.step);
        OptimizerState {
            kind: format!("lookahead:{}", inner.kind),
            step: self.counter,
            counters,
            buffers,
        }
    }

    fn load_state(&mut self, state: &OptimizerState) -> Result<(), OptimError> {
        let inner_kind = state.kind.strip_prefix("lookahead:").ok_or_else(|| {
            OptimError::StateMismatch(format!("{} is not a lookahead state", state.kind))
        })?;
        let strip = |k: &String| k.strip_prefix("inner.").map(str::to_string);
        let inner = OptimizerState {
            kind: inner_kind.to_string(),
            step: state.counters.get("inner.step").copied().unwrap_or(0),
            counters: state
                .counters
                .iter()
                .filter(|(k, _)| k.as_str() != "inner.step")
                .filter_map(|(k, v)| strip(k).map(|k| (k, *v)))
                .collect(),
            buffers: state
                .buffers
                .iter()
                .filter_map(|(k, v)| strip(k).map(|k| (k, v.clone())))
                .collect(),
        };
        self.inner.load_state(&inner)?;
        self.slow = state.buffers.get("slow").cloned();
        self.counter = state.step;
        Ok(())
    }

    fn name(&self) -> String {
        format!("Lookahead({})", self.inner.name())
    }
}

/// Optimizer names accepted in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "A")]
    Adam,
    #[serde(rename = "RA")]
    RAdam,
    /// Ranger: Lookahead over RAdam.
    #[serde(rename = "R")]
    Ranger,
    #[serde(rename = "A+LH")]
    AdamLookahead,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Adam,
        OptimizerKind::RAdam,
        OptimizerKind::Ranger,
        OptimizerKind::AdamLookahead,
    ];

    pub fn code(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "A",
            OptimizerKind::RAdam => "RA",
            OptimizerKind::Ranger => "R",
            OptimizerKind::AdamLookahead => "A+LH",
        }
    }

    pub fn build(
        self,
        n: usize,
        adam: AdamHyper,
        lookahead: LookaheadHyper,
    ) -> Result<Box<dyn Optimizer>, OptimError> {
        Ok(match self {
            OptimizerKind::Adam => Box::new(Adam::new(n, adam)?),
            OptimizerKind::RAdam => Box::new(RAdam::new(n, adam)?),
            OptimizerKind::Ranger => Box::new(Lookahead::new(RAdam::new(n, adam)?, lookahead)?),
            OptimizerKind::AdamLookahead => {
                Box::new(Lookahead::new(Adam::new(n, adam)?, lookahead)?)
            }
        })
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown optimizer {s:?} (expected A, RA, R or A+LH)"))
    }
}
