use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use sha2::{Digest, Sha256};

use super::{Real, Tensor};
use crate::error::{config_err, Result};

/// Initialisation rule of one parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Kaiming normal, `std = sqrt(2 / fan_in)`.
    KaimingNormal {
        fan_in: usize,
    },
    /// Uniform in `±1/sqrt(fan_in)`.
    FanInUniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
    Normal {
        std: f64,
    },
}

/// Declared parameter: built into a [`ParamSet`] and used for parameter accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            trainable: false,
            ..Self::new(name, shape, init)
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Number of trainable values declared by `specs`.
pub fn count_trainable(specs: &[ParamSpec]) -> usize {
    specs
        .iter()
        .filter(|s| s.trainable)
        .map(ParamSpec::numel)
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of uniquely named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(config_err!("duplicate parameter name `{name}`"));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        Ok(())
    }

    /// Draws every spec from `rng` in declaration order.
    pub fn from_specs(specs: &[ParamSpec], rng: &mut impl Rng) -> Result<Self> {
        let mut set = Self::new();
        set.extend_from_specs(specs, rng)?;
        Ok(set)
    }

    pub fn extend_from_specs(&mut self, specs: &[ParamSpec], rng: &mut impl Rng) -> Result<()> {
        for s in specs {
            let n = s.numel();
            let data: Vec<T> = match s.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::KaimingNormal { fan_in } => {
                    let std = (2.0 / fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| T::lit(std * normal(rng))).collect()
                }
                Init::Normal { std } => (0..n).map(|_| T::lit(std * normal(rng))).collect(),
                Init::FanInUniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    (0..n).map(|_| T::lit(dist.sample(rng))).collect()
                }
            };
            self.insert(s.name.clone(), Tensor::new(&s.shape, data)?, s.trainable)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn entry(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Number of trainable scalar values.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Replaces the value of an existing parameter, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| config_err!("unknown parameter `{name}`"))?;
        if slot.shape() != value.shape() {
            return Err(config_err!(
                "parameter `{name}`: shape {:?} does not match {:?}",
                value.shape(),
                slot.shape()
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.insert(p.name.clone(), p.value.cast(), p.trainable)
                .expect("unique names");
        }
        out
    }

    /// Entries whose name starts with `prefix`, renamed with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for p in &self.params {
            if let Some(rest) = p.name.strip_prefix(prefix) {
                out.insert(rest.to_string(), p.value.clone(), p.trainable)
                    .expect("unique names");
            }
        }
        out
    }

    /// Copy of this set with every name prefixed.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.insert(format!("{prefix}{}", p.name), p.value.clone(), p.trainable)
                .expect("unique names");
        }
        out
    }

    /// SHA-256 over names, shapes and values of the entries selected by `filter`.
    pub fn digest(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| filter(&p.name)) {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `target ← m·target + (1−m)·online` for every trainable entry. Buffers are
/// left alone. Both sets must hold the same names and shapes.
pub fn ema_update<T: Real>(online: &ParamSet<T>, target: &mut ParamSet<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(config_err!("EMA coefficient {m} outside [0, 1]"));
    }
    if online.len() != target.len() {
        return Err(config_err!(
            "EMA: online has {} entries, target {}",
            online.len(),
            target.len()
        ));
    }
    let (mt, mo) = (T::lit(m), T::lit(1.0 - m));
    for (o, t) in online.params.iter().zip(target.params.iter_mut()) {
        if o.name != t.name || o.value.shape() != t.value.shape() {
            return Err(config_err!(
                "EMA: `{}` is not aligned with `{}`",
                o.name,
                t.name
            ));
        }
        if !o.trainable {
            continue;
        }
        for (tv, &ov) in t.value.data_mut().iter_mut().zip(o.value.data()) {
            *tv = mt * *tv + mo * ov;
        }
    }
    Ok(())
}

/// EMA between two halves of one set: every trainable entry named
/// `{target_prefix}X` moves toward the entry `X`.
pub fn ema_within<T: Real>(set: &mut ParamSet<T>, target_prefix: &str, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(config_err!("EMA coefficient {m} outside [0, 1]"));
    }
    let (mt, mo) = (T::lit(m), T::lit(1.0 - m));
    for ti in 0..set.params.len() {
        if !set.params[ti].trainable {
            continue;
        }
        let Some(online) = set.params[ti].name.strip_prefix(target_prefix) else {
            continue;
        };
        let oi = *set
            .index
            .get(online)
            .ok_or_else(|| config_err!("EMA: no online entry for `{}`", set.params[ti].name))?;
        let (o, t) = if oi < ti {
            let (a, b) = set.params.split_at_mut(ti);
            (&a[oi], &mut b[0])
        } else {
            let (a, b) = set.params.split_at_mut(oi);
            (&b[0], &mut a[ti])
        };
        if o.value.shape() != t.value.shape() {
            return Err(config_err!(
                "EMA: `{}` is not aligned with `{}`",
                o.name,
                t.name
            ));
        }
        for (tv, &ov) in t.value.data_mut().iter_mut().zip(o.value.data()) {
            *tv = mt * *tv + mo * ov;
        }
    }
    Ok(())
}

/// Grad map keyed by parameter name, as produced by a session.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;
