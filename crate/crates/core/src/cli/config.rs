//! Line-oriented run configuration.
//!
//! One `key = value` per line; `#` starts a comment; keys carry dotted
//! section prefixes (`pretrain.epochs`). Unknown keys are rejected. An empty
//! value means "preset default" and is filled in by [`RunConfig::resolve`].

use crate::contrastive::{ByolConfig, MocoConfig, SwavConfig};
use crate::downstream::{FinetuneConfig, ReductionPlan};
use crate::encoder::EncoderConfig;
use crate::error::{config_err, Result};
use crate::spark::SparkConfig;
use crate::tensor::{OptimizerConfig, OptimizerKind, Schedule};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Every accepted key with its default.
pub const KEYS: &[(&str, &str)] = &[
    ("method", "spark"),
    ("seed", "0"),
    ("model", "toy"),
    ("data.manifest", ""),
    ("data.stats", ""),
    ("data.size", "64"),
    ("pretrain.epochs", "900"),
    ("pretrain.batch", ""),
    ("pretrain.checkpoint_every", "50"),
    ("pretrain.optimizer", ""),
    ("pretrain.lr", ""),
    ("pretrain.weight_decay", ""),
    ("pretrain.warmup_epochs", "0"),
    ("spark.patch", ""),
    ("spark.mask_ratio", "0.6"),
    ("moco.tau", "0.2"),
    ("moco.momentum", ""),
    ("moco.queue", ""),
    ("swav.prototypes", ""),
    ("swav.tau", "0.1"),
    ("swav.epsilon", "0.05"),
    ("swav.iterations", "3"),
    ("swav.freeze", ""),
    ("swav.small_crop", ""),
    ("byol.base_momentum", "0.996"),
    ("finetune.checkpoint", ""),
    ("finetune.lr", "1e-4"),
    ("finetune.batch", "64"),
    ("finetune.head_epochs", "10"),
    ("finetune.epochs", "100"),
    ("finetune.patience", "20"),
    ("finetune.repeats", "5"),
    ("finetune.val_fraction", "0.1"),
    ("sweep.methods", ""),
    ("sweep.fractions", "1.0,0.75,0.5,0.25,0.1,0.05"),
    ("sweep.stop_f1", "0.7"),
    ("gradcam.checkpoints", ""),
    ("gradcam.split", "test"),
    ("gradcam.limit", "4"),
    ("gradcam.resolution", "input"),
    ("preprocess.input", ""),
    ("preprocess.window", ""),
    ("preprocess.size", "0"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Spark,
    Moco,
    Swav,
    Byol,
    None,
}

impl FromStr for Method {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spark" => Ok(Self::Spark),
            "moco" => Ok(Self::Moco),
            "swav" => Ok(Self::Swav),
            "byol" => Ok(Self::Byol),
            "none" => Ok(Self::None),
            other => Err(config_err!(
                "unknown method `{other}` (expected spark, moco, swav, byol or none)"
            )),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Spark => "spark",
            Self::Moco => "moco",
            Self::Swav => "swav",
            Self::Byol => "byol",
            Self::None => "none",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Resnet50,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                config_err!("config line {}: expected `key = value`, got `{raw}`", n + 1)
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| config_err!("config line {}: {e}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err!("cannot read config {}: {e}", path.display()))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(config_err!("unknown key `{key}`")),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn parsed<V: FromStr>(&self, key: &str) -> Result<V> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| config_err!("`{key}`: cannot parse `{v}`"))
    }

    /// Path value resolved against the config's directory; `None` if unset.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| self.base_dir.join(v))
    }

    /// Like [`RunConfig::path`] but the key must be set and the path must exist.
    pub fn existing_path(&self, key: &str) -> Result<PathBuf> {
        let p = self
            .path(key)
            .ok_or_else(|| config_err!("`{key}` must be set"))?;
        if !p.exists() {
            return Err(config_err!("`{key}`: {} does not exist", p.display()));
        }
        Ok(p)
    }

    pub fn method(&self) -> Result<Method> {
        self.get("method").parse()
    }

    pub fn seed(&self) -> Result<u64> {
        self.parsed("seed")
    }

    pub fn preset(&self) -> Result<Preset> {
        match self.get("model") {
            "toy" => Ok(Preset::Toy),
            "resnet50" => Ok(Preset::Resnet50),
            other => Err(config_err!(
                "unknown model `{other}` (expected toy or resnet50)"
            )),
        }
    }

    /// Fills every empty preset-dependent key and checks that typed keys parse.
    pub fn resolve(&mut self) -> Result<()> {
        let preset = self.preset()?;
        let method = self.method()?;
        let toy = preset == Preset::Toy;
        let size: usize = self.parsed("data.size")?;
        let (opt, lr, wd) = match (toy, method) {
            (true, Method::Spark) => ("adam", "2e-3", "0"),
            (true, _) => ("adam", "1e-3", "0"),
            (false, Method::Moco) => ("sgd", "1e-4", "0"),
            (false, Method::Swav) => ("lars", "0.15", "1e-6"),
            (false, Method::Byol) => ("lars", "1e-3", "1.5e-6"),
            (false, _) => ("lamb", "25e-6", "0"),
        };
        // small crops: 3/7 of the input, kept a multiple of the encoder stride
        let small = ((size * 3 / 7) / 32 * 32).max(32).min(size).to_string();
        let fills = [
            ("pretrain.batch", if toy { "16" } else { "32" }),
            ("pretrain.optimizer", opt),
            ("pretrain.lr", lr),
            ("pretrain.weight_decay", wd),
            ("spark.patch", if toy { "8" } else { "32" }),
            ("moco.momentum", if toy { "0.99" } else { "0.999" }),
            ("moco.queue", if toy { "256" } else { "65536" }),
            ("swav.prototypes", if toy { "16" } else { "500" }),
            ("swav.freeze", if toy { "5" } else { "313" }),
            ("swav.small_crop", &small),
        ];
        for (k, v) in fills {
            if self.get(k).is_empty() {
                self.set(k, v)?;
            }
        }
        self.seed()?;
        self.optimizer()?;
        self.finetune()?;
        self.plan()?;
        Ok(())
    }

    /// `key = value` lines for every key, sorted.
    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        Ok(match self.preset()? {
            Preset::Toy => EncoderConfig::toy(),
            Preset::Resnet50 => EncoderConfig::resnet50(),
        })
    }

    pub fn pretrain_steps(&self, n_images: usize) -> Result<u64> {
        let batch: usize = self.parsed("pretrain.batch")?;
        let epochs: u64 = self.parsed("pretrain.epochs")?;
        Ok(epochs * n_images.div_ceil(batch.max(1)) as u64)
    }

    pub fn optimizer(&self) -> Result<OptimizerConfig> {
        let kind: OptimizerKind = self.get("pretrain.optimizer").parse()?;
        let mut c = OptimizerConfig::new(kind, self.parsed("pretrain.lr")?);
        c.weight_decay = self.parsed("pretrain.weight_decay")?;
        c.validate()?;
        Ok(c)
    }

    /// Optimizer with the cosine schedule spanning `total_steps`.
    pub fn scheduled_optimizer(&self, steps_per_epoch: u64) -> Result<OptimizerConfig> {
        let mut c = self.optimizer()?;
        if c.kind == OptimizerKind::Lamb {
            let epochs: u64 = self.parsed("pretrain.epochs")?;
            let warm: u64 = self.parsed("pretrain.warmup_epochs")?;
            c.schedule = Schedule::Cosine {
                warmup_steps: warm * steps_per_epoch,
                total_steps: epochs * steps_per_epoch,
                min_lr: 0.0,
            };
        }
        Ok(c)
    }

    pub fn spark(&self) -> Result<SparkConfig> {
        let base = match self.preset()? {
            Preset::Toy => SparkConfig::toy(),
            Preset::Resnet50 => SparkConfig::resnet50(),
        };
        Ok(SparkConfig {
            patch: self.parsed("spark.patch")?,
            mask_ratio: self.parsed("spark.mask_ratio")?,
            ..base
        })
    }

    pub fn moco(&self) -> Result<MocoConfig> {
        let base = if self.preset()? == Preset::Toy {
            MocoConfig::toy()
        } else {
            MocoConfig::resnet50()
        };
        Ok(MocoConfig {
            tau: self.parsed("moco.tau")?,
            momentum: self.parsed("moco.momentum")?,
            queue_capacity: self.parsed("moco.queue")?,
            ..base
        })
    }

    pub fn swav(&self) -> Result<SwavConfig> {
        let base = if self.preset()? == Preset::Toy {
            SwavConfig::toy()
        } else {
            SwavConfig::resnet50()
        };
        Ok(SwavConfig {
            prototypes: self.parsed("swav.prototypes")?,
            tau: self.parsed("swav.tau")?,
            epsilon: self.parsed("swav.epsilon")?,
            sinkhorn_iterations: self.parsed("swav.iterations")?,
            freeze_prototypes: self.parsed("swav.freeze")?,
            ..base
        })
    }

    pub fn byol(&self) -> Result<ByolConfig> {
        let base = if self.preset()? == Preset::Toy {
            ByolConfig::toy()
        } else {
            ByolConfig::resnet50()
        };
        Ok(ByolConfig {
            base_momentum: self.parsed("byol.base_momentum")?,
            ..base
        })
    }

    pub fn finetune(&self) -> Result<FinetuneConfig> {
        let c = FinetuneConfig {
            optimizer: OptimizerConfig::adam(self.parsed("finetune.lr")?),
            batch_size: self.parsed("finetune.batch")?,
            head_epochs: self.parsed("finetune.head_epochs")?,
            epochs: self.parsed("finetune.epochs")?,
            patience: self.parsed("finetune.patience")?,
            repeats: self.parsed("finetune.repeats")?,
            seed: self.seed()?,
            val_fraction: self.parsed("finetune.val_fraction")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn plan(&self) -> Result<ReductionPlan> {
        let fractions = list(self.get("sweep.fractions"))
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| config_err!("`sweep.fractions`: cannot parse `{f}`"))
            })
            .collect::<Result<Vec<_>>>()?;
        ReductionPlan::new(fractions, self.parsed("sweep.stop_f1")?)
    }

    /// `name=path` pairs of a list key; the path `none` maps to `None`.
    pub fn named_paths(&self, key: &str) -> Result<Vec<(String, Option<PathBuf>)>> {
        list(self.get(key))
            .map(|item| {
                let (name, p) = item
                    .split_once('=')
                    .ok_or_else(|| config_err!("`{key}`: expected `name=path`, got `{item}`"))?;
                let p = p.trim();
                Ok((
                    name.trim().to_string(),
                    (p != "none").then(|| self.base_dir.join(p)),
                ))
            })
            .collect()
    }
}

fn list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty())
}
