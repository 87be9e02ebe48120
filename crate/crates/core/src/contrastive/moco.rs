use super::{info_nce_batch, KeyQueue, Mlp};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::tensor::{
    apply_stats, ema_within, Optimizer, ParamSet, ParamSpec, Real, Session, Tensor, Var,
};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct MocoConfig {
    pub encoder: EncoderConfig,
    /// Projection widths after the pooled features, e.g. `[2048, 128]`.
    pub head: Vec<usize>,
    pub tau: f64,
    pub momentum: f64,
    pub queue_capacity: usize,
}

impl MocoConfig {
    pub fn resnet50() -> Self {
        Self {
            encoder: EncoderConfig::resnet50(),
            head: vec![2048, 128],
            tau: 0.2,
            momentum: 0.999,
            queue_capacity: 65_536,
        }
    }

    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            head: vec![64, 32],
            tau: 0.2,
            momentum: 0.99,
            queue_capacity: 256,
        }
    }
}

/// Query encoder `encoder.`/`head.` and momentum key encoder
/// `target.encoder.`/`target.head.`.
#[derive(Clone, Debug)]
pub struct Moco {
    pub config: MocoConfig,
    encoder: Encoder,
    head: Mlp,
}

pub(crate) fn twin_specs(online: &[ParamSpec]) -> Vec<ParamSpec> {
    online
        .iter()
        .map(|s| ParamSpec {
            name: format!("target.{}", s.name),
            ..s.clone()
        })
        .collect()
}

/// Initialises the online entries and copies them into `target.*`.
pub(crate) fn init_twins<T: Real>(
    online: &[ParamSpec],
    extra: &[ParamSpec],
    rng: &mut impl Rng,
) -> Result<ParamSet<T>> {
    let mut params = ParamSet::from_specs(online, rng)?;
    params.extend_from_specs(extra, rng)?;
    let names: Vec<String> = online.iter().map(|s| s.name.clone()).collect();
    for name in names {
        let p = params.entry(&name).expect("just inserted").clone();
        params.insert(format!("target.{name}"), p.value, p.trainable)?;
    }
    Ok(params)
}

pub(crate) fn embed<T: Real>(
    sess: &mut Session<'_, T>,
    encoder: &Encoder,
    head: &Mlp,
    x: &Tensor<T>,
) -> Result<Var> {
    let xv = sess.input(x.clone());
    let f = encoder.embed(sess, xv)?;
    head.forward(sess, f)
}

impl Moco {
    pub fn new(config: MocoConfig) -> Result<Self> {
        config.encoder.validate()?;
        let head = Mlp::new(&config.head, "head.")?;
        if config.head[0] != config.encoder.out_channels() {
            return Err(crate::error::config_err!(
                "head input {} differs from encoder width {}",
                config.head[0],
                config.encoder.out_channels()
            ));
        }
        Ok(Self {
            encoder: Encoder {
                config: config.encoder.clone(),
                prefix: "encoder.".into(),
            },
            head,
            config,
        })
    }

    fn online_specs(&self) -> Vec<ParamSpec> {
        let mut s = self.config.encoder.param_specs("encoder.");
        s.extend(self.head.param_specs());
        s
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let online = self.online_specs();
        let mut all = online.clone();
        all.extend(twin_specs(&online));
        all
    }

    pub fn init_params<T: Real>(&self, rng: &mut impl Rng) -> Result<ParamSet<T>> {
        init_twins(&self.online_specs(), &[], rng)
    }

    pub fn new_queue<T: Real>(&self, rng: &mut impl Rng) -> Result<KeyQueue<T>> {
        KeyQueue::random(
            self.config.queue_capacity,
            *self.config.head.last().expect("head"),
            rng,
        )
    }

    /// Normalised key embeddings from the momentum encoder (no gradient).
    pub fn keys<T: Real>(
        &self,
        params: &ParamSet<T>,
        views: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<(String, Tensor<T>)>)> {
        let mut sess = Session::new(params, true);
        let enc = Encoder {
            config: self.config.encoder.clone(),
            prefix: "target.encoder.".into(),
        };
        let k = embed(
            &mut sess,
            &enc,
            &self.head.with_prefix("target.head."),
            views,
        )?;
        let k = sess.g.l2_normalize(k)?;
        let stats = sess.take_stats();
        Ok((sess.g.value(k).clone(), stats))
    }

    /// Query-side loss node given precomputed keys.
    pub fn loss<T: Real>(
        &self,
        sess: &mut Session<'_, T>,
        queries: &Tensor<T>,
        keys: &Tensor<T>,
        queue: &KeyQueue<T>,
    ) -> Result<Var> {
        let q = embed(sess, &self.encoder, &self.head, queries)?;
        let q = sess.g.l2_normalize(q)?;
        info_nce_batch(&mut sess.g, q, keys, &queue.keys(), self.config.tau)
    }
}

/// One MoCo step: InfoNCE of query views against their keys and the queue,
/// an optimizer step on the query side, the momentum update of the key side,
/// then the batch keys enter the queue. Returns the pre-step loss.
pub fn moco_step<T: Real>(
    model: &Moco,
    params: &mut ParamSet<T>,
    queue: &mut KeyQueue<T>,
    optimizer: &mut Optimizer<T>,
    queries: &Tensor<T>,
    key_views: &Tensor<T>,
) -> Result<f64> {
    if queue.capacity() < queries.dim(0) {
        return Err(crate::error::config_err!(
            "queue capacity {} below batch size {}",
            queue.capacity(),
            queries.dim(0)
        ));
    }
    let (keys, key_stats) = model.keys(params, key_views)?;
    let (loss, grads, stats) = {
        let mut sess = Session::new(params, true);
        let l = model.loss(&mut sess, queries, &keys, queue)?;
        let grads = sess.g.backward(l);
        (
            sess.g.value(l).item().as_f64(),
            sess.param_grads(&grads),
            sess.take_stats(),
        )
    };
    optimizer.step(params, &grads)?;
    apply_stats(params, stats)?;
    apply_stats(params, key_stats)?;
    ema_within(params, "target.", model.config.momentum)?;
    queue.enqueue(&keys)?;
    Ok(loss)
}
