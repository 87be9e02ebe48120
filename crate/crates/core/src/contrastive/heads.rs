use crate::error::{config_err, Result};
use crate::tensor::{Init, ParamSpec, Real, Session, Var};

/// Fully connected stack `dims[0] → dims[1] → …` with ReLU between layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub prefix: String,
}

impl Mlp {
    pub fn new(dims: &[usize], prefix: &str) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(config_err!(
                "MLP needs at least two positive widths, got {dims:?}"
            ));
        }
        Ok(Self {
            dims: dims.to_vec(),
            prefix: prefix.to_string(),
        })
    }

    pub fn with_prefix(&self, prefix: &str) -> Self {
        Self {
            dims: self.dims.clone(),
            prefix: prefix.to_string(),
        }
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().expect("non-empty")
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for (i, w) in self.dims.windows(2).enumerate() {
            let fan_in = w[0];
            specs.push(ParamSpec::new(
                format!("{}{i}.weight", self.prefix),
                &[w[1], w[0]],
                Init::FanInUniform { fan_in },
            ));
            specs.push(ParamSpec::new(
                format!("{}{i}.bias", self.prefix),
                &[w[1]],
                Init::FanInUniform { fan_in },
            ));
        }
        specs
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, mut x: Var) -> Result<Var> {
        let layers = self.dims.len() - 1;
        for i in 0..layers {
            let w = sess.param(&format!("{}{i}.weight", self.prefix))?;
            let b = sess.param(&format!("{}{i}.bias", self.prefix))?;
            x = sess.g.linear(x, w, b)?;
            if i + 1 < layers {
                x = sess.g.relu(x);
            }
        }
        Ok(x)
    }
}
