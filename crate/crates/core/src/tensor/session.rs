use std::collections::BTreeMap;

use super::params::GradMap;
use super::{Grads, Graph, ParamSet, Real, Tensor, Var};
use crate::error::{config_err, Result};

/// One forward/backward pass: binds named parameters into a fresh [`Graph`].
///
/// Parameters under a frozen prefix enter the graph as constants, so no
/// gradient can reach them. Batch-norm layers report running-statistic
/// updates through [`Session::record_stat`]; the caller applies them.
pub struct Session<'p, T: Real> {
    pub g: Graph<T>,
    params: &'p ParamSet<T>,
    bound: BTreeMap<String, Var>,
    training: bool,
    frozen: Vec<String>,
    stats: Vec<(String, Tensor<T>)>,
}

impl<'p, T: Real> Session<'p, T> {
    pub fn new(params: &'p ParamSet<T>, training: bool) -> Self {
        Self {
            g: Graph::new(),
            params,
            bound: BTreeMap::new(),
            training,
            frozen: Vec::new(),
            stats: Vec::new(),
        }
    }

    /// Treats every parameter whose name starts with one of `prefixes` as a constant.
    pub fn freeze(mut self, prefixes: &[&str]) -> Self {
        self.frozen.extend(prefixes.iter().map(|s| s.to_string()));
        self
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.params
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Graph node of parameter `name` (created once per session).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self
            .params
            .entry(name)
            .ok_or_else(|| config_err!("missing parameter `{name}`"))?;
        let requires = p.trainable && !self.is_frozen(name);
        let v = self.g.leaf(p.value.clone(), requires);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Raw value of a parameter or buffer without binding it.
    pub fn value_of(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| config_err!("missing parameter `{name}`"))
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    pub fn record_stat(&mut self, name: String, value: Tensor<T>) {
        self.stats.push((name, value));
    }

    /// Gradients of every bound, trainable, non-frozen parameter.
    pub fn param_grads(&self, grads: &Grads<T>) -> GradMap<T> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if !self.g.requires_grad(v) {
                continue;
            }
            let g = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.g.shape(v)));
            out.insert(name.clone(), g);
        }
        out
    }

    /// Running-statistic updates recorded during the forward pass.
    pub fn take_stats(&mut self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.stats)
    }
}

/// Writes recorded buffer updates back into `params`.
pub fn apply_stats<T: Real>(
    params: &mut ParamSet<T>,
    stats: Vec<(String, Tensor<T>)>,
) -> Result<()> {
    for (name, v) in stats {
        params.set(&name, v)?;
    }
    Ok(())
}
