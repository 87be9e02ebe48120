//! SGD with momentum, Adam, LARS and LAMB.

use std::collections::BTreeMap;

use super::params::GradMap;
use super::{ParamSet, Real, Tensor};
use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
    Lars,
    Lamb,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" | "sgd-momentum" => Ok(Self::SgdMomentum),
            "adam" => Ok(Self::Adam),
            "lars" => Ok(Self::Lars),
            "lamb" => Ok(Self::Lamb),
            other => Err(config_err!("unknown optimizer `{other}`")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SgdMomentum => "sgd",
            Self::Adam => "adam",
            Self::Lars => "lars",
            Self::Lamb => "lamb",
        })
    }
}

/// Learning-rate schedule evaluated at 1-based step indices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// Linear warm-up to the peak rate, then cosine decay to `min_lr`.
    Cosine {
        warmup_steps: u64,
        total_steps: u64,
        min_lr: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Base (or peak, under a cosine schedule) learning rate.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// LARS trust coefficient.
    pub trust_coefficient: f64,
    pub schedule: Schedule,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: match kind {
                OptimizerKind::Lamb => 1e-6,
                _ => 1e-8,
            },
            trust_coefficient: 1.0,
            schedule: Schedule::Constant,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self {
            momentum,
            ..Self::new(OptimizerKind::SgdMomentum, lr)
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(config_err!("learning rate must be > 0, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(config_err!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if self.weight_decay < 0.0 {
            return Err(config_err!("weight decay must be ≥ 0"));
        }
        Ok(())
    }

    /// Learning rate used at 1-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine {
                warmup_steps,
                total_steps,
                min_lr,
            } => {
                if step <= warmup_steps && warmup_steps > 0 {
                    return self.lr * step as f64 / warmup_steps as f64;
                }
                let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
                let t = ((step - warmup_steps) as f64 / span).min(1.0);
                min_lr + 0.5 * (self.lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Optimizer with per-parameter state buffers.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Real> {
    config: OptimizerConfig,
    step: u64,
    state: BTreeMap<String, Vec<Tensor<T>>>,
}

fn norm<T: Real>(xs: &[T]) -> f64 {
    xs.iter()
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            state: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Number of completed steps.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    fn slots(&self) -> usize {
        match self.config.kind {
            OptimizerKind::SgdMomentum | OptimizerKind::Lars => 1,
            OptimizerKind::Adam | OptimizerKind::Lamb => 2,
        }
    }

    /// Applies one update. Parameters without a gradient entry are untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &GradMap<T>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .entry(name)
                .ok_or_else(|| config_err!("gradient for unknown parameter `{name}`"))?;
            if p.value.shape() != g.shape() {
                return Err(config_err!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.value.shape()
                ));
            }
            if !g.all_finite() {
                return Err(Error::Numeric {
                    name: name.clone(),
                    detail: "non-finite gradient".into(),
                });
            }
        }
        self.step += 1;
        let t = self.step;
        let lr = self.config.lr_at(t);
        let c = self.config.clone();
        let slots = self.slots();
        for (name, g) in grads {
            let param = params.get_mut(name).expect("checked above");
            let state = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (0..slots).map(|_| Tensor::zeros(g.shape())).collect());
            let w = param.data_mut();
            let g = g.data();
            match c.kind {
                OptimizerKind::SgdMomentum => {
                    let buf = state[0].data_mut();
                    let (m, wd, lr) = (T::lit(c.momentum), T::lit(c.weight_decay), T::lit(lr));
                    for i in 0..w.len() {
                        let d = g[i] + wd * w[i];
                        buf[i] = m * buf[i] + d;
                        w[i] = w[i] - lr * buf[i];
                    }
                }
                OptimizerKind::Lars => {
                    let wd = T::lit(c.weight_decay);
                    let update: Vec<T> = (0..w.len()).map(|i| g[i] + wd * w[i]).collect();
                    let (wn, un) = (norm(w), norm(&update));
                    let trust = if wn > 0.0 && un > 0.0 {
                        c.trust_coefficient * wn / un
                    } else {
                        1.0
                    };
                    let (trust, m, lr) = (T::lit(trust), T::lit(c.momentum), T::lit(lr));
                    let buf = state[0].data_mut();
                    for i in 0..w.len() {
                        buf[i] = m * buf[i] + update[i] * trust;
                        w[i] = w[i] - lr * buf[i];
                    }
                }
                OptimizerKind::Adam | OptimizerKind::Lamb => {
                    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
                    let bc1 = T::lit(1.0 - c.beta1.powi(t as i32));
                    let bc2 = T::lit(1.0 - c.beta2.powi(t as i32));
                    let (eps, wd) = (T::lit(c.eps), T::lit(c.weight_decay));
                    let (ms, vs) = state.split_at_mut(1);
                    let (m, v) = (ms[0].data_mut(), vs[0].data_mut());
                    let mut r = vec![T::zero(); w.len()];
                    for i in 0..w.len() {
                        let gi = if c.kind == OptimizerKind::Adam {
                            g[i] + wd * w[i]
                        } else {
                            g[i]
                        };
                        m[i] = b1 * m[i] + (T::one() - b1) * gi;
                        v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        r[i] = mhat / (vhat.sqrt() + eps);
                    }
                    let scale = if c.kind == OptimizerKind::Lamb {
                        for i in 0..w.len() {
                            r[i] = r[i] + wd * w[i];
                        }
                        let (wn, rn) = (norm(w), norm(&r));
                        if wn > 0.0 && rn > 0.0 {
                            lr * wn / rn
                        } else {
                            lr
                        }
                    } else {
                        lr
                    };
                    let scale = T::lit(scale);
                    for i in 0..w.len() {
                        w[i] = w[i] - scale * r[i];
                    }
                }
            }
        }
        Ok(())
    }

    /// State buffers as named tensors (`<param>.<slot>`) plus the step counter.
    pub fn export_state(&self) -> (u64, Vec<(String, Tensor<T>)>) {
        let mut out = Vec::new();
        for (name, bufs) in &self.state {
            for (i, b) in bufs.iter().enumerate() {
                out.push((format!("{name}.{i}"), b.clone()));
            }
        }
        (self.step, out)
    }

    pub fn import_state(&mut self, step: u64, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        let slots = self.slots();
        let mut state: BTreeMap<String, Vec<Option<Tensor<T>>>> = BTreeMap::new();
        for (key, t) in tensors {
            let (name, idx) = key
                .rsplit_once('.')
                .and_then(|(n, i)| i.parse::<usize>().ok().map(|i| (n.to_string(), i)))
                .ok_or_else(|| config_err!("malformed optimizer state key `{key}`"))?;
            if idx >= slots {
                return Err(config_err!(
                    "optimizer state slot {idx} out of range for `{name}`"
                ));
            }
            state.entry(name).or_insert_with(|| vec![None; slots])[idx] = Some(t);
        }
        self.state = state
            .into_iter()
            .map(|(k, v)| {
                let bufs = v
                    .into_iter()
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| config_err!("incomplete optimizer state for `{k}`"))?;
                Ok((k, bufs))
            })
            .collect::<Result<_>>()?;
        self.step = step;
        Ok(())
    }
}
