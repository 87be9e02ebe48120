use super::moco::{embed, init_twins, twin_specs};
use super::{byol_loss_batch, Mlp};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{config_err, Result};
use crate::tensor::{
    apply_stats, ema_within, Optimizer, ParamSet, ParamSpec, Real, Session, Tensor, Var,
};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ByolConfig {
    pub encoder: EncoderConfig,
    pub projector: Vec<usize>,
    pub predictor: Vec<usize>,
    /// Target EMA coefficient at step 0; it follows a cosine ramp to 1.
    pub base_momentum: f64,
}

impl ByolConfig {
    pub fn resnet50() -> Self {
        Self {
            encoder: EncoderConfig::resnet50(),
            projector: vec![2048, 4096, 256],
            predictor: vec![256, 4096, 256],
            base_momentum: 0.996,
        }
    }

    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            projector: vec![64, 128, 32],
            predictor: vec![32, 128, 32],
            base_momentum: 0.99,
        }
    }
}

/// Online `encoder.`/`head.`/`predictor.` and target `target.encoder.`/`target.head.`.
#[derive(Clone, Debug)]
pub struct Byol {
    pub config: ByolConfig,
    encoder: Encoder,
    projector: Mlp,
    predictor: Mlp,
}

/// `1 − (1 − base)·(cos(π·step/total) + 1)/2`.
pub fn byol_momentum(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    1.0 - (1.0 - base) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
}

impl Byol {
    pub fn new(config: ByolConfig) -> Result<Self> {
        config.encoder.validate()?;
        let projector = Mlp::new(&config.projector, "head.")?;
        let predictor = Mlp::new(&config.predictor, "predictor.")?;
        if config.projector[0] != config.encoder.out_channels()
            || projector.out_dim() != config.predictor[0]
        {
            return Err(config_err!(
                "projector/predictor widths do not chain with the encoder"
            ));
        }
        if predictor.out_dim() != projector.out_dim() {
            return Err(config_err!("predictor output must match projector output"));
        }
        Ok(Self {
            encoder: Encoder {
                config: config.encoder.clone(),
                prefix: "encoder.".into(),
            },
            projector,
            predictor,
            config,
        })
    }

    fn twin_specs_online(&self) -> Vec<ParamSpec> {
        let mut s = self.config.encoder.param_specs("encoder.");
        s.extend(self.projector.param_specs());
        s
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let online = self.twin_specs_online();
        let mut all = online.clone();
        all.extend(self.predictor.param_specs());
        all.extend(twin_specs(&online));
        all
    }

    pub fn init_params<T: Real>(&self, rng: &mut impl Rng) -> Result<ParamSet<T>> {
        init_twins(
            &self.twin_specs_online(),
            &self.predictor.param_specs(),
            rng,
        )
    }

    /// Target projections of both views (no gradient) and the BN updates they record.
    pub fn targets<T: Real>(
        &self,
        params: &ParamSet<T>,
        views: [&Tensor<T>; 2],
    ) -> Result<([Tensor<T>; 2], Vec<(String, Tensor<T>)>)> {
        let mut sess = Session::new(params, true);
        let enc = Encoder {
            config: self.config.encoder.clone(),
            prefix: "target.encoder.".into(),
        };
        let head = self.projector.with_prefix("target.head.");
        let a = embed(&mut sess, &enc, &head, views[0])?;
        let b = embed(&mut sess, &enc, &head, views[1])?;
        let out = [sess.g.value(a).clone(), sess.g.value(b).clone()];
        Ok((out, sess.take_stats()))
    }

    /// Symmetrised loss: each view's prediction regresses the other view's target.
    pub fn loss<T: Real>(
        &self,
        sess: &mut Session<'_, T>,
        views: [&Tensor<T>; 2],
        targets: &[Tensor<T>; 2],
    ) -> Result<Var> {
        let mut terms = Vec::with_capacity(2);
        for (i, v) in views.iter().enumerate() {
            let z = embed(sess, &self.encoder, &self.projector, v)?;
            let p = self.predictor.forward(sess, z)?;
            terms.push(byol_loss_batch(&mut sess.g, p, &targets[1 - i])?);
        }
        sess.g.add(terms[0], terms[1])
    }
}

/// One BYOL step at 0-based `step` of `total_steps`; returns the pre-step loss.
pub fn byol_step<T: Real>(
    model: &Byol,
    params: &mut ParamSet<T>,
    optimizer: &mut Optimizer<T>,
    views: [&Tensor<T>; 2],
    step: u64,
    total_steps: u64,
) -> Result<f64> {
    let (targets, target_stats) = model.targets(params, views)?;
    let (loss, grads, stats) = {
        let mut sess = Session::new(params, true);
        let l = model.loss(&mut sess, views, &targets)?;
        let g = sess.g.backward(l);
        (
            sess.g.value(l).item().as_f64(),
            sess.param_grads(&g),
            sess.take_stats(),
        )
    };
    optimizer.step(params, &grads)?;
    apply_stats(params, stats)?;
    apply_stats(params, target_stats)?;
    ema_within(
        params,
        "target.",
        byol_momentum(model.config.base_momentum, step, total_steps),
    )?;
    Ok(loss)
}
