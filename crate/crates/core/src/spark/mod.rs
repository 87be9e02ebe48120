//! Masked-autoencoder pre-training on a sparse encoder.

mod decoder;

pub use decoder::{Decoder, DecoderConfig};

use crate::encoder::{check_divides, Encoder, EncoderConfig, PatchMask, SparseFeatureMap};
use crate::error::{config_err, Error, Result};
use crate::tensor::{
    apply_stats, Backward, GradMap, Init, Mask, Optimizer, ParamSet, ParamSpec, Real, Session,
    Tensor, Var,
};
use rand::seq::index::sample;
use rand::Rng;

/// Draws a patch mask over an `h × w` image. Each patch is masked with
/// probability `ratio`, or exactly `round(ratio · patches)` are masked when
/// `exact_count` is set.
pub fn generate_patch_mask(
    h: usize,
    w: usize,
    patch: usize,
    ratio: f64,
    exact_count: bool,
    rng: &mut impl Rng,
) -> Result<PatchMask> {
    check_divides(h, w, patch)?;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(config_err!("mask ratio {ratio} outside [0, 1]"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let total = gh * gw;
    let kept = if exact_count {
        let masked = (ratio * total as f64).round() as usize;
        let mut kept = vec![true; total];
        for i in sample(rng, total, masked.min(total)) {
            kept[i] = false;
        }
        kept
    } else {
        (0..total).map(|_| !rng.random_bool(ratio)).collect()
    };
    PatchMask::new(gh, gw, patch, kept)
}

/// Copies kept patches of `images: [N,C,H,W]` into a sparse map; masked
/// pixels are inactive and zero.
pub fn sparse_gather<T: Real>(
    images: &Tensor<T>,
    masks: &[PatchMask],
) -> Result<SparseFeatureMap<T>> {
    let &[n, _, h, w] = images.shape() else {
        return Err(config_err!(
            "images must be [N,C,H,W], got {:?}",
            images.shape()
        ));
    };
    if masks.len() != n {
        return Err(config_err!("{} masks for {n} images", masks.len()));
    }
    for m in masks {
        if m.image_size() != (h, w) {
            return Err(config_err!(
                "mask covers {:?}, image is {h}x{w}",
                m.image_size()
            ));
        }
    }
    let active = crate::encoder::batch_mask(masks, h, w)?;
    SparseFeatureMap::new(images.clone(), active)
}

/// Per-level learnable fill vectors, named `{prefix}{level}`.
pub fn mask_embedding_specs(widths: &[usize; 4], prefix: &str) -> Vec<ParamSpec> {
    widths
        .iter()
        .enumerate()
        .map(|(l, &c)| ParamSpec::new(format!("{prefix}{l}"), &[c], Init::Normal { std: 0.02 }))
        .collect()
}

struct DensifyOp {
    mask: Mask,
}

impl<T: Real> Backward<T> for DensifyOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let s = inputs[0].shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mut dx = vec![T::zero(); g.len()];
        let mut de = vec![T::zero(); c];
        for i in 0..n {
            let bits = self.mask.image(i);
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for (p, &on) in bits.iter().enumerate() {
                    if on {
                        dx[base + p] = g.data()[base + p];
                    } else {
                        de[ch] = de[ch] + g.data()[base + p];
                    }
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::new(s, dx).expect("shape")),
            needs[1].then(|| Tensor::new(&[c], de).expect("shape")),
        ]
    }
}

/// Fills inactive sites of `x: [N,C,h,w]` with the vector `emb: [C]`; active
/// sites keep their values.
pub fn densify<T: Real>(sess: &mut Session<'_, T>, x: Var, emb: Var, mask: &Mask) -> Result<Var> {
    let s = sess.g.shape(x).to_vec();
    let &[n, c, h, w] = s.as_slice() else {
        return Err(config_err!("densify input must be 4-D, got {s:?}"));
    };
    if sess.g.shape(emb) != [c] {
        return Err(config_err!(
            "mask embedding {:?} vs {c} channels",
            sess.g.shape(emb)
        ));
    }
    if mask.dims() != (n, h, w) {
        return Err(config_err!(
            "densify mask {:?} vs [{n},{h},{w}]",
            mask.dims()
        ));
    }
    let plane = h * w;
    let mut out = sess.g.value(x).data().to_vec();
    let e = sess.g.value(emb).data();
    for i in 0..n {
        let bits = mask.image(i);
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for (p, &on) in bits.iter().enumerate() {
                if !on {
                    out[base + p] = e[ch];
                }
            }
        }
    }
    let v = Tensor::new(&s, out)?;
    Ok(sess.g.push(v, &[x, emb], DensifyOp { mask: mask.clone() }))
}

/// Per-pixel weights: 1 inside masked patches, 0 inside kept ones, repeated
/// over `channels`.
fn loss_weights<T: Real>(masks: &[PatchMask], channels: usize) -> Tensor<T> {
    let mut w = Vec::new();
    for m in masks {
        let px = m.pixel_mask();
        for _ in 0..channels {
            w.extend(
                px.iter()
                    .map(|&kept| if kept { T::zero() } else { T::one() }),
            );
        }
    }
    let (h, wd) = masks[0].image_size();
    Tensor::new(&[masks.len(), channels, h, wd], w).expect("mask geometry")
}

fn no_masked_patch() -> Error {
    Error::Undefined("reconstruction loss needs at least one masked patch".into())
}

/// Mean squared error over masked-patch pixels of `pred` against `target`.
pub fn masked_l2_loss_var<T: Real>(
    sess: &mut Session<'_, T>,
    pred: Var,
    target: &Tensor<T>,
    masks: &[PatchMask],
) -> Result<Var> {
    if masks.iter().all(|m| m.num_masked() == 0) {
        return Err(no_masked_patch());
    }
    let weights = loss_weights(masks, target.dim(1));
    sess.g.weighted_mse(pred, target, &weights)
}

/// Value-level masked loss for one image `[C,H,W]` or `[H,W]`.
pub fn masked_l2_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &PatchMask,
) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(config_err!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    if mask.num_masked() == 0 {
        return Err(no_masked_patch());
    }
    let px = mask.pixel_mask();
    if !pred.len().is_multiple_of(px.len()) {
        return Err(config_err!(
            "mask covers {:?}, prediction {:?}",
            mask.image_size(),
            pred.shape()
        ));
    }
    let (mut s, mut count) = (0.0, 0usize);
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        if !px[i % px.len()] {
            let d = (p - t).as_f64();
            s += d * d;
            count += 1;
        }
    }
    Ok(s / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparkConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub patch: usize,
    pub mask_ratio: f64,
    pub exact_count: bool,
}

impl SparkConfig {
    pub fn resnet50() -> Self {
        Self {
            encoder: EncoderConfig::resnet50(),
            decoder: DecoderConfig::default(),
            patch: 32,
            mask_ratio: 0.6,
            exact_count: false,
        }
    }

    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            decoder: DecoderConfig::from_base(16),
            patch: 8,
            mask_ratio: 0.6,
            exact_count: false,
        }
    }
}

/// Encoder, decoder and mask embeddings under the prefixes `encoder.`,
/// `decoder.` and `mask_emb.`.
#[derive(Clone, Debug)]
pub struct SparkModel {
    pub config: SparkConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl SparkModel {
    pub fn new(config: SparkConfig) -> Result<Self> {
        config.encoder.validate()?;
        config.decoder.validate(&config.encoder)?;
        if !(0.0..=1.0).contains(&config.mask_ratio) {
            return Err(config_err!(
                "mask ratio {} outside [0, 1]",
                config.mask_ratio
            ));
        }
        Ok(Self {
            encoder: Encoder {
                config: config.encoder.clone(),
                prefix: "encoder.".into(),
            },
            decoder: Decoder {
                config: config.decoder.clone(),
                encoder: config.encoder.clone(),
                prefix: "decoder.".into(),
            },
            config,
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.config.encoder.param_specs("encoder.");
        specs.extend(self.decoder.param_specs());
        specs.extend(mask_embedding_specs(
            &self.config.encoder.widths,
            "mask_emb.",
        ));
        specs
    }

    pub fn init_params<T: Real>(&self, rng: &mut impl Rng) -> Result<ParamSet<T>> {
        ParamSet::from_specs(&self.param_specs(), rng)
    }

    /// Reconstruction of `images` from their kept patches.
    pub fn reconstruct<T: Real>(
        &self,
        sess: &mut Session<'_, T>,
        images: &Tensor<T>,
        masks: &[PatchMask],
    ) -> Result<Var> {
        let gathered = sparse_gather(images, masks)?;
        let x = sess.input(gathered.values().clone());
        let pyr = self.encoder.forward(sess, x, Some(masks))?;
        let level_masks = pyr.masks.as_ref().expect("sparse forward returns masks");
        let mut dense = Vec::with_capacity(4);
        for l in 0..4 {
            let emb = sess.param(&format!("mask_emb.{l}"))?;
            dense.push(densify(sess, pyr.levels[l], emb, &level_masks[l])?);
        }
        let dense: [Var; 4] = dense.try_into().expect("four levels");
        self.decoder.forward(sess, &dense)
    }

    /// Masked reconstruction loss node.
    pub fn loss<T: Real>(
        &self,
        sess: &mut Session<'_, T>,
        images: &Tensor<T>,
        masks: &[PatchMask],
    ) -> Result<Var> {
        let pred = self.reconstruct(sess, images, masks)?;
        masked_l2_loss_var(sess, pred, images, masks)
    }

    /// Loss value and parameter gradients for a fixed set of masks.
    pub fn loss_and_grads<T: Real>(
        &self,
        params: &ParamSet<T>,
        images: &Tensor<T>,
        masks: &[PatchMask],
    ) -> Result<(f64, GradMap<T>, Vec<(String, Tensor<T>)>)> {
        let mut sess = Session::new(params, true);
        let loss = self.loss(&mut sess, images, masks)?;
        let grads = sess.g.backward(loss);
        let value = sess.g.value(loss).item().as_f64();
        let stats = sess.take_stats();
        Ok((value, sess.param_grads(&grads), stats))
    }

    /// Draws one mask per image. A batch in which no patch survives is redrawn
    /// (up to a bound) because batch norm needs active sites.
    pub fn draw_masks(
        &self,
        n: usize,
        h: usize,
        w: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<PatchMask>> {
        let c = &self.config;
        for _ in 0..64 {
            let masks = (0..n)
                .map(|_| generate_patch_mask(h, w, c.patch, c.mask_ratio, c.exact_count, rng))
                .collect::<Result<Vec<_>>>()?;
            if c.mask_ratio >= 1.0 || masks.iter().any(|m| m.num_masked() < m.num_patches()) {
                return Ok(masks);
            }
        }
        Err(Error::Undefined(
            "every patch masked in repeated draws".into(),
        ))
    }
}

/// One optimisation step on a batch `[N,C,H,W]`; returns the pre-step loss.
pub fn spark_pretrain_step<T: Real>(
    model: &SparkModel,
    params: &mut ParamSet<T>,
    optimizer: &mut Optimizer<T>,
    images: &Tensor<T>,
    rng: &mut impl Rng,
) -> Result<f64> {
    let &[n, _, h, w] = images.shape() else {
        return Err(config_err!(
            "batch must be [N,C,H,W], got {:?}",
            images.shape()
        ));
    };
    let masks = model.draw_masks(n, h, w, rng)?;
    let (loss, grads, stats) = model.loss_and_grads(params, images, &masks)?;
    if !loss.is_finite() {
        return Err(Error::Numeric {
            name: "spark loss".into(),
            detail: format!("{loss}"),
        });
    }
    optimizer.step(params, &grads)?;
    apply_stats(params, stats)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_geometry_and_ratio_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = generate_patch_mask(512, 512, 32, 0.6, false, &mut rng).unwrap();
        assert_eq!(m.grid(), (16, 16));
        let m = generate_patch_mask(512, 512, 32, 0.0, false, &mut rng).unwrap();
        assert_eq!(m.num_masked(), 0);
        assert!(generate_patch_mask(500, 512, 32, 0.6, false, &mut rng).is_err());
        let m = generate_patch_mask(64, 64, 8, 0.6, true, &mut rng).unwrap();
        assert_eq!(m.num_masked(), 38);
    }

    #[test]
    fn masked_count_follows_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials = 10_000;
        let total: usize = (0..trials)
            .map(|_| {
                generate_patch_mask(512, 512, 32, 0.6, false, &mut rng)
                    .unwrap()
                    .num_masked()
            })
            .sum();
        let mean = total as f64 / trials as f64;
        let se = (256.0f64 * 0.6 * 0.4).sqrt() / (trials as f64).sqrt();
        assert!((mean - 153.6).abs() < 4.0 * se, "mean {mean}");
    }

    #[test]
    fn gather_round_trip() {
        let img =
            Tensor::<f64>::new(&[1, 1, 8, 8], (0..64).map(|i| i as f64 + 1.0).collect()).unwrap();
        let m = PatchMask::new(2, 2, 4, vec![false, true, false, false]).unwrap();
        let g = sparse_gather(&img, std::slice::from_ref(&m)).unwrap();
        assert_eq!(g.active().count_active(), 16);
        let px = m.pixel_mask();
        for (i, &v) in g.zero_filled().data().iter().enumerate() {
            assert_eq!(v, if px[i] { img.data()[i] } else { 0.0 });
        }
    }

    #[test]
    fn densify_fills_and_routes_gradient() {
        let params = ParamSet::<f64>::new();
        let mut sess = Session::new(&params, true);
        let x = sess.g.leaf(Tensor::full(&[1, 2, 2, 2], 3.0), true);
        let emb = sess
            .g
            .leaf(Tensor::new(&[2], vec![-1.0, 5.0]).unwrap(), true);
        let mask = Mask::new(1, 2, 2, vec![true, false, false, true]).unwrap();
        let y = densify(&mut sess, x, emb, &mask).unwrap();
        assert_eq!(
            sess.g.value(y).data(),
            &[3.0, -1.0, -1.0, 3.0, 3.0, 5.0, 5.0, 3.0]
        );
        let s = sess.g.sum(y);
        let g = sess.g.backward(s);
        assert_eq!(g.get(emb).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(
            g.get(x).unwrap().data(),
            &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn masked_loss_closed_form() {
        let m = PatchMask::new(2, 2, 2, vec![true, false, false, true]).unwrap();
        let t = Tensor::<f64>::zeros(&[4, 4]);
        let p = Tensor::full(&[4, 4], 0.5);
        assert!((masked_l2_loss(&p, &t, &m).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(masked_l2_loss(&t, &t, &m).unwrap(), 0.0);
        // kept-patch perturbation is invisible
        let mut q = p.clone();
        q.data_mut()[0] = 100.0;
        assert_eq!(masked_l2_loss(&q, &t, &m).unwrap(), 0.25);
        let all = PatchMask::all_kept(4, 4, 2).unwrap();
        assert!(matches!(
            masked_l2_loss(&p, &t, &all),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn ratio_zero_step_is_undefined() {
        let mut cfg = SparkConfig::toy();
        cfg.mask_ratio = 0.0;
        let model = SparkModel::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = model.init_params::<f32>(&mut rng).unwrap();
        let mut opt = Optimizer::new(crate::tensor::OptimizerConfig::adam(1e-3)).unwrap();
        let x = Tensor::ones(&[2, 1, 64, 64]);
        let r = spark_pretrain_step(&model, &mut params, &mut opt, &x, &mut rng);
        assert!(matches!(r, Err(Error::Undefined(_))));
    }
}
