use super::metrics::{metrics, Metrics, RunMetrics};
use super::reduce::stratified_split;
use crate::dataio::Dataset;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{config_err, Error, Result};
use crate::seeds::{derive_seed, stream};
use crate::tensor::{
    apply_stats, Init, Optimizer, OptimizerConfig, ParamSet, ParamSpec, Real, Session, Tensor, Var,
};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;

pub const ENCODER_PREFIX: &str = "encoder.";

/// Encoder plus one linear layer on its pooled features.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub encoder: Encoder,
    pub num_classes: usize,
}

impl Classifier {
    pub fn new(config: EncoderConfig, num_classes: usize) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(config_err!(
                "a classifier needs at least 2 classes, got {num_classes}"
            ));
        }
        Ok(Self {
            encoder: Encoder {
                config,
                prefix: ENCODER_PREFIX.into(),
            },
            num_classes,
        })
    }

    pub fn head_specs(&self) -> Vec<ParamSpec> {
        let c = self.encoder.config.out_channels();
        let init = Init::FanInUniform { fan_in: c };
        vec![
            ParamSpec::new("head.weight", &[self.num_classes, c], init),
            ParamSpec::new("head.bias", &[self.num_classes], init),
        ]
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = self.encoder.config.param_specs(ENCODER_PREFIX);
        s.extend(self.head_specs());
        s
    }

    /// Logits `[N, K]`.
    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, images: &Tensor<T>) -> Result<Var> {
        let x = sess.input(images.clone());
        let f = self.encoder.embed(sess, x)?;
        let w = sess.param("head.weight")?;
        let b = sess.param("head.bias")?;
        sess.g.linear(f, w, b)
    }

    /// Softmax class probabilities, row-major `[N, K]`, in eval mode.
    pub fn predict<T: Real>(
        &self,
        params: &ParamSet<T>,
        images: &Tensor<T>,
        batch: usize,
    ) -> Result<Vec<f64>> {
        let n = images.dim(0);
        let per = images.len() / n.max(1);
        let mut shape = images.shape().to_vec();
        let mut out = Vec::with_capacity(n * self.num_classes);
        for start in (0..n).step_by(batch.max(1)) {
            let end = (start + batch).min(n);
            shape[0] = end - start;
            let chunk = Tensor::new(&shape, images.data()[start * per..end * per].to_vec())?;
            let mut sess = Session::new(params, false);
            let logits = self.forward(&mut sess, &chunk)?;
            for row in sess.g.value(logits).data().chunks(self.num_classes) {
                let m = row
                    .iter()
                    .map(|v| v.as_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
                let s: f64 = e.iter().sum();
                out.extend(e.iter().map(|v| v / s));
            }
        }
        Ok(out)
    }

    pub fn evaluate(
        &self,
        params: &ParamSet<f32>,
        data: &Dataset,
        batch: usize,
    ) -> Result<Metrics> {
        metrics(
            &self.predict(params, &data.images, batch)?,
            self.num_classes,
            &data.labels,
        )
    }
}

/// Classifier parameters: encoder weights from `pretrained` (or a fresh draw
/// when `None`) and a freshly drawn head. Extra entries in `pretrained` are
/// ignored; a missing or misshapen encoder tensor is an error naming it.
pub fn attach_head<T: Real>(
    classifier: &Classifier,
    pretrained: Option<&ParamSet<T>>,
    rng: &mut impl Rng,
) -> Result<ParamSet<T>> {
    let enc_specs = classifier.encoder.config.param_specs(ENCODER_PREFIX);
    let mut params = match pretrained {
        None => ParamSet::from_specs(&enc_specs, rng)?,
        Some(src) => {
            let mut p = ParamSet::new();
            for s in &enc_specs {
                let v = src.get(&s.name).ok_or_else(|| {
                    Error::Checkpoint(format!("tensor `{}` missing from checkpoint", s.name))
                })?;
                if v.shape() != s.shape.as_slice() {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{}` has shape {:?}, model expects {:?}",
                        s.name,
                        v.shape(),
                        s.shape
                    )));
                }
                p.insert(s.name.clone(), v.clone(), s.trainable)?;
            }
            p
        }
    };
    params.extend_from_specs(&classifier.head_specs(), rng)?;
    Ok(params)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    /// Leading epochs that train the head only.
    pub head_epochs: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a better validation F1.
    pub patience: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Share of train held out when a task has no validation split.
    pub val_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::adam(1e-4),
            batch_size: 64,
            head_epochs: 10,
            epochs: 100,
            patience: 20,
            repeats: 5,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.head_epochs > self.epochs {
            return Err(config_err!(
                "head-only epochs {} exceed total epochs {}",
                self.head_epochs,
                self.epochs
            ));
        }
        if self.repeats == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(config_err!(
                "repeats, batch size and epochs must be positive"
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(config_err!(
                "validation fraction {} outside (0, 1)",
                self.val_fraction
            ));
        }
        Ok(())
    }

    pub fn repeat_seed(&self, r: usize) -> u64 {
        derive_seed(self.seed, &format!("repeat/{r}"))
    }
}

/// Train, optional validation and test sets of one task.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Head,
    Full,
}

#[derive(Clone, Copy, Debug)]
pub struct StepEvent {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val: Metrics,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub seed: u64,
    pub best_epoch: usize,
    pub val: Metrics,
    pub test: Metrics,
    pub params: ParamSet<f32>,
    pub history: Vec<EpochLog>,
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub runs: Vec<RunOutcome>,
    pub summary: RunMetrics,
}

impl FinetuneReport {
    /// Run with the highest validation F1 (earliest on ties).
    pub fn best(&self) -> &RunOutcome {
        self.runs
            .iter()
            .reduce(|a, b| if b.val.f1 > a.val.f1 { b } else { a })
            .expect("at least one repeat")
    }
}

fn check_classes(data: &Dataset, k: usize, what: &str) -> Result<()> {
    let mut counts = vec![0usize; k];
    for &l in &data.labels {
        *counts
            .get_mut(l)
            .ok_or_else(|| config_err!("{what} label {l} outside {k} classes"))? += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        let name = data
            .classes
            .get(c)
            .cloned()
            .unwrap_or_else(|| c.to_string());
        return Err(Error::Validation(format!(
            "class `{name}` has no samples in the {what} split"
        )));
    }
    Ok(())
}

/// Batches of a shuffled order; a trailing single sample joins the previous batch.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 {
            end = order.len();
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

/// One fine-tuning run with seed `seed`. `on_step` sees the parameters after
/// every optimizer step.
pub fn finetune_run(
    classifier: &Classifier,
    pretrained: Option<&ParamSet<f32>>,
    splits: &Splits,
    config: &FinetuneConfig,
    seed: u64,
    on_step: &mut dyn FnMut(&StepEvent, &ParamSet<f32>),
) -> Result<RunOutcome> {
    config.validate()?;
    let k = classifier.num_classes;
    check_classes(&splits.train, k, "train")?;
    let (train, val) = match &splits.val {
        Some(v) => (splits.train.clone(), v.clone()),
        None => {
            let (t, v) = stratified_split(
                &splits.train.labels,
                config.val_fraction,
                derive_seed(seed, "val"),
            )?;
            (splits.train.subset(&t), splits.train.subset(&v))
        }
    };
    check_classes(&train, k, "train")?;

    let mut params = attach_head(classifier, pretrained, &mut stream(seed, "init"))?;
    let mut opt = Optimizer::new(config.optimizer.clone())?;
    let mut shuffle = stream(seed, "shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(usize, Metrics, ParamSet<f32>)> = None;
    let mut stagnant = 0;
    let mut history = Vec::new();
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let phase = if epoch <= config.head_epochs {
            Phase::Head
        } else {
            Phase::Full
        };
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut seen = 0;
        for idx in batches(&order, config.batch_size) {
            let batch = train.subset(idx);
            let mut sess = Session::new(&params, true);
            if phase == Phase::Head {
                sess = sess.freeze(&[ENCODER_PREFIX]);
            }
            let logits = classifier.forward(&mut sess, &batch.images)?;
            let loss = sess.g.cross_entropy_labels(logits, &batch.labels)?;
            let value = sess.g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric {
                    name: "fine-tune loss".into(),
                    detail: format!("{value} at epoch {epoch}"),
                });
            }
            let grads = sess.g.backward(loss);
            let gm = sess.param_grads(&grads);
            let stats = sess.take_stats();
            drop(sess);
            opt.step(&mut params, &gm)?;
            apply_stats(&mut params, stats)?;
            step += 1;
            total += value * idx.len() as f64;
            seen += idx.len();
            on_step(
                &StepEvent {
                    epoch,
                    step,
                    phase,
                    loss: value,
                },
                &params,
            );
        }
        let vm = classifier.evaluate(&params, &val, config.batch_size)?;
        let train_loss = total / seen.max(1) as f64;
        debug!(
            "epoch {epoch} {phase:?}: loss {train_loss:.4}, val f1 {:.4}",
            vm.f1
        );
        history.push(EpochLog {
            epoch,
            phase,
            train_loss,
            val: vm,
        });
        if best.as_ref().is_none_or(|b| vm.f1 > b.1.f1) {
            best = Some((epoch, vm, params.clone()));
            stagnant = 0;
        } else {
            stagnant += 1;
            if phase == Phase::Full && stagnant >= config.patience {
                info!("early stop at epoch {epoch}");
                break;
            }
        }
    }
    let (best_epoch, val_m, best_params) = best.expect("at least one epoch");
    let test = classifier.evaluate(&best_params, &splits.test, config.batch_size)?;
    Ok(RunOutcome {
        seed,
        best_epoch,
        val: val_m,
        test,
        params: best_params,
        history,
    })
}

/// `config.repeats` runs with derived seeds; summary over test metrics.
pub fn finetune(
    classifier: &Classifier,
    pretrained: Option<&ParamSet<f32>>,
    splits: &Splits,
    config: &FinetuneConfig,
) -> Result<FinetuneReport> {
    config.validate()?;
    let mut runs = Vec::with_capacity(config.repeats);
    for r in 0..config.repeats {
        let out = finetune_run(
            classifier,
            pretrained,
            splits,
            config,
            config.repeat_seed(r),
            &mut |_, _| {},
        )?;
        info!(
            "repeat {r}: test f1 {:.4} (epoch {})",
            out.test.f1, out.best_epoch
        );
        runs.push(out);
    }
    let summary = RunMetrics::aggregate(&runs.iter().map(|r| r.test).collect::<Vec<_>>());
    Ok(FinetuneReport { runs, summary })
}

/// Index of the entry with the highest score, the earliest on ties.
pub fn select_best_pretrain_epoch<C>(
    series: &[(u64, C)],
    mut probe: impl FnMut(u64, &C) -> Result<f64>,
) -> Result<(u64, f64)> {
    let mut best: Option<(u64, f64)> = None;
    for (epoch, c) in series {
        let f1 = probe(*epoch, c)?;
        if best.is_none_or(|b| f1 > b.1) {
            best = Some((*epoch, f1));
        }
    }
    best.ok_or_else(|| Error::Validation("no pre-training checkpoints to choose from".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::two_orientations;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_size() {
        let c = Classifier::new(EncoderConfig::resnet50(), 2).unwrap();
        assert_eq!(crate::tensor::count_trainable(&c.head_specs()), 4098);
        assert_eq!(
            crate::tensor::count_trainable(&c.param_specs()),
            23_501_760 + 4098
        );
    }

    #[test]
    fn mismatched_checkpoint_names_tensor() {
        let c = Classifier::new(EncoderConfig::toy(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p: ParamSet<f32> =
            ParamSet::from_specs(&c.encoder.config.param_specs(ENCODER_PREFIX), &mut rng).unwrap();
        p.get_mut("encoder.stem.conv.weight").unwrap().data_mut()[0] = 0.5;
        let full = attach_head(&c, Some(&p), &mut rng).unwrap();
        assert_eq!(full.get("encoder.stem.conv.weight").unwrap().data()[0], 0.5);

        let other = Classifier::new(
            EncoderConfig {
                stem_width: 4,
                ..EncoderConfig::toy()
            },
            2,
        )
        .unwrap();
        let err = attach_head(&other, Some(&p), &mut rng)
            .unwrap_err()
            .to_string();
        assert!(err.contains("encoder.stem.conv.weight"), "{err}");
    }

    #[test]
    fn best_epoch_rules() {
        let s = [(50, 0.5), (100, 0.7), (150, 0.7)];
        assert_eq!(
            select_best_pretrain_epoch(&s, |_, &f| Ok(f)).unwrap(),
            (100, 0.7)
        );
        assert_eq!(
            select_best_pretrain_epoch(&[(50, 0.1)], |_, &f| Ok(f))
                .unwrap()
                .0,
            50
        );
        let mono = [(50, 0.1), (100, 0.2), (150, 0.3)];
        assert_eq!(
            select_best_pretrain_epoch(&mono, |_, &f| Ok(f)).unwrap().0,
            150
        );
        let empty: [(u64, f64); 0] = [];
        assert!(select_best_pretrain_epoch(&empty, |_, &f| Ok(f)).is_err());
    }

    #[test]
    fn missing_class_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (images, _) = two_orientations::<f32>(4, 32, 0.1, &mut rng);
        let data = Dataset {
            images,
            labels: vec![0; 4],
            classes: vec!["a".into(), "b".into()],
        };
        let splits = Splits {
            train: data.clone(),
            val: None,
            test: data,
        };
        let c = Classifier::new(EncoderConfig::toy(), 2).unwrap();
        let err = finetune_run(
            &c,
            None,
            &splits,
            &FinetuneConfig::default(),
            0,
            &mut |_, _| {},
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn batches_absorb_singletons() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|s| s.len()).collect::<Vec<_>>(), [4, 5]);
    }
}
