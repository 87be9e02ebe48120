use super::moco::embed;
use super::{sinkhorn_codes, Mlp};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{config_err, Result};
use crate::tensor::{
    apply_stats, Init, Optimizer, ParamSet, ParamSpec, Real, Session, Tensor, Var,
};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SwavConfig {
    pub encoder: EncoderConfig,
    pub head: Vec<usize>,
    pub prototypes: usize,
    pub tau: f64,
    pub epsilon: f64,
    pub sinkhorn_iterations: usize,
    /// Prototypes receive no update before this many iterations.
    pub freeze_prototypes: u64,
}

impl SwavConfig {
    pub fn resnet50() -> Self {
        Self {
            encoder: EncoderConfig::resnet50(),
            head: vec![2048, 128],
            prototypes: 500,
            tau: 0.1,
            epsilon: 0.05,
            sinkhorn_iterations: 3,
            freeze_prototypes: 313,
        }
    }

    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            head: vec![64, 32],
            prototypes: 16,
            tau: 0.1,
            epsilon: 0.05,
            sinkhorn_iterations: 3,
            freeze_prototypes: 5,
        }
    }
}

/// Encoder `encoder.`, projection `head.` and prototype matrix `prototypes`.
#[derive(Clone, Debug)]
pub struct Swav {
    pub config: SwavConfig,
    encoder: Encoder,
    head: Mlp,
}

pub const PROTOTYPES: &str = "prototypes";

/// Rescales every row of the prototype matrix to unit norm.
pub fn normalize_prototypes<T: Real>(params: &mut ParamSet<T>) -> Result<()> {
    let c = params
        .get_mut(PROTOTYPES)
        .ok_or_else(|| config_err!("missing parameter `{PROTOTYPES}`"))?;
    let d = c.dim(1);
    for row in c.data_mut().chunks_mut(d) {
        let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        if n > T::zero() {
            row.iter_mut().for_each(|x| *x = *x / n);
        }
    }
    Ok(())
}

impl Swav {
    pub fn new(config: SwavConfig) -> Result<Self> {
        config.encoder.validate()?;
        if config.head[0] != config.encoder.out_channels() {
            return Err(config_err!(
                "head input {} differs from encoder width {}",
                config.head[0],
                config.encoder.out_channels()
            ));
        }
        if config.prototypes == 0 || !(config.tau > 0.0) {
            return Err(config_err!(
                "SwAV needs prototypes and a positive temperature"
            ));
        }
        Ok(Self {
            encoder: Encoder {
                config: config.encoder.clone(),
                prefix: "encoder.".into(),
            },
            head: Mlp::new(&config.head, "head.")?,
            config,
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = self.config.encoder.param_specs("encoder.");
        s.extend(self.head.param_specs());
        s.push(ParamSpec::new(
            PROTOTYPES,
            &[self.config.prototypes, self.head.out_dim()],
            Init::Normal { std: 1.0 },
        ));
        s
    }

    pub fn init_params<T: Real>(&self, rng: &mut impl Rng) -> Result<ParamSet<T>> {
        let mut p = ParamSet::from_specs(&self.param_specs(), rng)?;
        normalize_prototypes(&mut p)?;
        Ok(p)
    }

    /// Multi-crop loss. The first two views are the large crops whose codes
    /// every other view predicts; each large crop's term is averaged over the
    /// views predicting it.
    pub fn loss<T: Real>(&self, sess: &mut Session<'_, T>, views: &[Tensor<T>]) -> Result<Var> {
        if views.len() < 2 {
            return Err(config_err!(
                "SwAV needs at least two views, got {}",
                views.len()
            ));
        }
        let c = sess.param(PROTOTYPES)?;
        let mut logits = Vec::with_capacity(views.len());
        let mut codes = Vec::with_capacity(2);
        for (i, v) in views.iter().enumerate() {
            let z = embed(sess, &self.encoder, &self.head, v)?;
            let z = sess.g.l2_normalize(z)?;
            let sim = sess.g.matmul_nt(z, c)?;
            if i < 2 {
                codes.push(sinkhorn_codes(
                    sess.g.value(sim),
                    self.config.epsilon,
                    self.config.sinkhorn_iterations,
                )?);
            }
            logits.push(sess.g.scale(sim, T::lit(1.0 / self.config.tau)));
        }
        let mut total: Option<Var> = None;
        let others = T::lit(1.0 / (views.len() - 1) as f64);
        for (i, q) in codes.iter().enumerate() {
            for (v, &l) in logits.iter().enumerate() {
                if v == i {
                    continue;
                }
                let ce = sess.g.softmax_cross_entropy(l, q)?;
                let ce = sess.g.scale(ce, others);
                total = Some(match total {
                    Some(t) => sess.g.add(t, ce)?,
                    None => ce,
                });
            }
        }
        Ok(total.expect("at least two views"))
    }
}

/// One SwAV step at 0-based `iteration`; prototypes stay fixed while
/// `iteration < freeze_prototypes` and are renormalised after every step.
pub fn swav_step<T: Real>(
    model: &Swav,
    params: &mut ParamSet<T>,
    optimizer: &mut Optimizer<T>,
    views: &[Tensor<T>],
    iteration: u64,
) -> Result<f64> {
    normalize_prototypes(params)?;
    let (loss, mut grads, stats) = {
        let mut sess = Session::new(params, true);
        if iteration < model.config.freeze_prototypes {
            sess = sess.freeze(&[PROTOTYPES]);
        }
        let l = model.loss(&mut sess, views)?;
        let g = sess.g.backward(l);
        (
            sess.g.value(l).item().as_f64(),
            sess.param_grads(&g),
            sess.take_stats(),
        )
    };
    if iteration < model.config.freeze_prototypes {
        grads.remove(PROTOTYPES);
    }
    optimizer.step(params, &grads)?;
    apply_stats(params, stats)?;
    normalize_prototypes(params)?;
    Ok(loss)
}
