//! SGD with momentum and Adam over a [`ParamMap`], with state that can be
//! checkpointed so resumed runs continue bit-exactly.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor};

use crate::error::{Error, Result};
use crate::params::ParamMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// `buf = momentum * buf + g; p -= lr * buf`
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam(beta1: f64, beta2: f64) -> Self {
        OptimizerKind::Adam {
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// Gradients keyed by parameter name, detached from any graph.
pub type Gradients = BTreeMap<String, Tensor>;

/// Pulls the gradients of `params` out of a backward pass. Parameters that
/// received no gradient are absent.
pub fn collect_gradients(params: &ParamMap, grads: &GradStore) -> Gradients {
    params
        .iter()
        .filter_map(|(name, var)| grads.get(var).map(|g| (name.to_owned(), g.detach())))
        .collect()
}

/// `acc += weight * g` for every entry of `g`.
pub fn accumulate(acc: &mut Gradients, g: &Gradients, weight: f64) -> Result<()> {
    for (name, grad) in g {
        let scaled = (grad * weight)?;
        let next = match acc.remove(name) {
            Some(prev) => (prev + scaled)?,
            None => scaled,
        };
        acc.insert(name.clone(), next);
    }
    Ok(())
}

pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    params: ParamMap,
    step: u64,
    /// Momentum buffer (SGD) or first moment (Adam).
    m: BTreeMap<String, Tensor>,
    /// Second moment (Adam only).
    v: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: ParamMap) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            params,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Applies one update. Parameters without a gradient are left untouched
    /// and keep their optimizer state.
    pub fn step(&mut self, grads: &Gradients) -> Result<()> {
        self.step += 1;
        for (name, var) in self.params.iter() {
            let Some(g) = grads.get(name) else { continue };
            let p = var.as_tensor();
            let updated = match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let buf = match self.m.get(name) {
                        Some(b) => ((b * momentum)? + g)?,
                        None => g.clone(),
                    };
                    let next = (p - (&buf * self.lr)?)?;
                    self.m.insert(name.to_owned(), buf);
                    next
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = match self.m.get(name) {
                        Some(m) => ((m * beta1)? + (g * (1.0 - beta1))?)?,
                        None => (g * (1.0 - beta1))?,
                    };
                    let g2 = g.sqr()?;
                    let v = match self.v.get(name) {
                        Some(v) => ((v * beta2)? + (g2 * (1.0 - beta2))?)?,
                        None => (g2 * (1.0 - beta2))?,
                    };
                    let t = self.step as i32;
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let denom = ((&v / bc2)?.sqrt()? + eps)?;
                    let next = (p - ((&m / denom)? * (self.lr / bc1))?)?;
                    self.m.insert(name.to_owned(), m);
                    self.v.insert(name.to_owned(), v);
                    next
                }
            };
            var.set(&updated)?;
        }
        Ok(())
    }

    /// State arrays keyed `{prefix}.m.{param}` / `{prefix}.v.{param}` plus a
    /// scalar step count.
    pub fn state(&self, prefix: &str) -> Result<(BTreeMap<String, Tensor>, u64)> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("{prefix}.m.{k}"), t.copy()?);
        }
        for (k, t) in &self.v {
            out.insert(format!("{prefix}.v.{k}"), t.copy()?);
        }
        Ok((out, self.step))
    }

    pub fn load_state(&mut self, prefix: &str, arrays: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        self.m.clear();
        self.v.clear();
        let m_prefix = format!("{prefix}.m.");
        let v_prefix = format!("{prefix}.v.");
        for (k, t) in arrays {
            let (target, name) = if let Some(n) = k.strip_prefix(&m_prefix) {
                (&mut self.m, n)
            } else if let Some(n) = k.strip_prefix(&v_prefix) {
                (&mut self.v, n)
            } else {
                continue;
            };
            let var = self
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter `{name}`")))?;
            target.insert(name.to_owned(), t.to_dtype(var.dtype())?);
        }
        self.step = step;
        Ok(())
    }
}
