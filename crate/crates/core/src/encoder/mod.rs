//! Bottleneck ResNet encoder with a dense mode and a submanifold sparse mode.

mod patch;
mod sparse;

pub(crate) use patch::check_divides;
pub use patch::{batch_mask, downsample_mask, PatchMask};
pub use sparse::{
    batch_norm, batch_norm_forward, sparse_batchnorm, submanifold_sparse_conv2d, NormMode,
    NormOutput, SparseFeatureMap, BN_EPS, BN_MOMENTUM,
};

use crate::error::{config_err, Result};
use crate::tensor::{conv, Init, Mask, ParamSet, ParamSpec, Real, Session, Var};
use rand::Rng;

/// Stem layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StemKind {
    /// 7×7 stride-2 convolution, then 3×3 stride-2 max pool (total stride 4).
    Standard,
    /// 3×3 stride-1 convolution and no pool, for tiny inputs.
    Compact,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stem_width: usize,
    pub blocks: [usize; 4],
    pub widths: [usize; 4],
    pub stem: StemKind,
}

impl EncoderConfig {
    pub const EXPANSION: usize = 4;

    /// ResNet-50 on single-channel input.
    pub fn resnet50() -> Self {
        Self {
            in_channels: 1,
            stem_width: 64,
            blocks: [3, 4, 6, 3],
            widths: [256, 512, 1024, 2048],
            stem: StemKind::Standard,
        }
    }

    /// Small configuration for tests and smoke runs.
    pub fn toy() -> Self {
        Self {
            in_channels: 1,
            stem_width: 8,
            blocks: [1, 1, 1, 1],
            widths: [8, 16, 32, 64],
            stem: StemKind::Standard,
        }
    }

    pub fn with_stem(mut self, stem: StemKind) -> Self {
        self.stem = stem;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_width == 0 {
            return Err(config_err!(
                "encoder needs positive input and stem channels"
            ));
        }
        for (i, (&b, &w)) in self.blocks.iter().zip(&self.widths).enumerate() {
            if b == 0 {
                return Err(config_err!("stage {} has no blocks", i + 1));
            }
            if w < Self::EXPANSION || w % Self::EXPANSION != 0 {
                return Err(config_err!(
                    "stage width {w} must be a positive multiple of {}",
                    Self::EXPANSION
                ));
            }
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.widths[3]
    }

    /// Stride of the stem relative to the input.
    pub fn stem_stride(&self) -> usize {
        match self.stem {
            StemKind::Standard => 4,
            StemKind::Compact => 1,
        }
    }

    /// Feature strides of the four stage outputs.
    pub fn strides(&self) -> [usize; 4] {
        let s = self.stem_stride();
        [s, 2 * s, 4 * s, 8 * s]
    }

    /// Inputs must be divisible by the deepest stride.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = self.strides()[3];
        if h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(config_err!(
                "input {h}x{w} must be a positive multiple of {s}"
            ));
        }
        Ok(())
    }

    /// Parameter and buffer layout under the given name prefix (e.g. `"encoder."`).
    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let stem_k = match self.stem {
            StemKind::Standard => 7,
            StemKind::Compact => 3,
        };
        conv_specs(
            &mut specs,
            &format!("{prefix}stem.conv"),
            self.stem_width,
            self.in_channels,
            stem_k,
        );
        bn_specs(&mut specs, &format!("{prefix}stem.bn"), self.stem_width);
        let mut c_in = self.stem_width;
        for (s, (&blocks, &width)) in self.blocks.iter().zip(&self.widths).enumerate() {
            let mid = width / Self::EXPANSION;
            for b in 0..blocks {
                let p = format!("{prefix}layer{}.{b}", s + 1);
                conv_specs(&mut specs, &format!("{p}.conv1"), mid, c_in, 1);
                bn_specs(&mut specs, &format!("{p}.bn1"), mid);
                conv_specs(&mut specs, &format!("{p}.conv2"), mid, mid, 3);
                bn_specs(&mut specs, &format!("{p}.bn2"), mid);
                conv_specs(&mut specs, &format!("{p}.conv3"), width, mid, 1);
                bn_specs(&mut specs, &format!("{p}.bn3"), width);
                if b == 0 && (c_in != width || block_stride(s) != 1) {
                    conv_specs(&mut specs, &format!("{p}.downsample.conv"), width, c_in, 1);
                    bn_specs(&mut specs, &format!("{p}.downsample.bn"), width);
                }
                c_in = width;
            }
        }
        specs
    }
}

fn block_stride(stage: usize) -> usize {
    if stage == 0 {
        1
    } else {
        2
    }
}

pub(crate) fn conv_specs(specs: &mut Vec<ParamSpec>, name: &str, out: usize, inp: usize, k: usize) {
    specs.push(ParamSpec::new(
        format!("{name}.weight"),
        &[out, inp, k, k],
        Init::KaimingNormal {
            fan_in: inp * k * k,
        },
    ));
}

pub(crate) fn bn_specs(specs: &mut Vec<ParamSpec>, name: &str, c: usize) {
    specs.push(ParamSpec::new(format!("{name}.weight"), &[c], Init::Ones));
    specs.push(ParamSpec::new(format!("{name}.bias"), &[c], Init::Zeros));
    specs.push(ParamSpec::buffer(
        format!("{name}.running_mean"),
        &[c],
        Init::Zeros,
    ));
    specs.push(ParamSpec::buffer(
        format!("{name}.running_var"),
        &[c],
        Init::Ones,
    ));
}

/// Four stage outputs (strides 4, 8, 16, 32 for the standard stem) and, in
/// sparse mode, their active sets.
pub struct Pyramid {
    pub levels: [Var; 4],
    pub masks: Option<[Mask; 4]>,
}

impl Pyramid {
    pub fn last(&self) -> Var {
        self.levels[3]
    }
}

/// Encoder bound to a parameter name prefix.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub prefix: String,
}

/// Validates the config and initialises parameters under `prefix`.
pub fn build_encoder<T: Real>(
    config: &EncoderConfig,
    prefix: &str,
    rng: &mut impl Rng,
) -> Result<(Encoder, ParamSet<T>)> {
    config.validate()?;
    let params = ParamSet::from_specs(&config.param_specs(prefix), rng)?;
    Ok((
        Encoder {
            config: config.clone(),
            prefix: prefix.to_string(),
        },
        params,
    ))
}

/// Carries the current active set through strided layers.
struct Flow<'a> {
    mask: Option<Mask>,
    sess_prefix: &'a str,
}

impl Flow<'_> {
    fn conv<T: Real>(
        &self,
        sess: &mut Session<'_, T>,
        x: Var,
        name: &str,
        stride: usize,
    ) -> Result<(Var, Option<Mask>)> {
        let w = sess.param(&format!("{}{name}.weight", self.sess_prefix))?;
        let (k, h, wd) = {
            let ws = sess.g.shape(w);
            let xs = sess.g.shape(x);
            (ws[2], xs[2], xs[3])
        };
        let pad = k / 2;
        let out_mask = match &self.mask {
            Some(m) => {
                let ho = conv::out_extent(h, k, stride, pad)
                    .ok_or_else(|| config_err!("{name}: input too small"))?;
                let wo = conv::out_extent(wd, k, stride, pad)
                    .ok_or_else(|| config_err!("{name}: input too small"))?;
                Some(m.center_mapped(stride, ho, wo))
            }
            None => None,
        };
        let y = sess
            .g
            .conv2d(x, w, stride, pad, self.mask.as_ref(), out_mask.as_ref())?;
        Ok((y, out_mask))
    }

    fn conv_bn<T: Real>(
        &mut self,
        sess: &mut Session<'_, T>,
        x: Var,
        name: &str,
        bn: &str,
        stride: usize,
        relu: bool,
    ) -> Result<Var> {
        let (y, m) = self.conv(sess, x, name, stride)?;
        self.mask = m;
        let y = batch_norm(
            sess,
            y,
            &format!("{}{bn}", self.sess_prefix),
            self.mask.as_ref(),
        )?;
        Ok(if relu { sess.g.relu(y) } else { y })
    }
}

impl Encoder {
    /// Forward pass over `x: [N, C, H, W]`. With `masks` (one per image),
    /// every layer is submanifold sparse: inactive sites stay exactly zero and
    /// never influence active ones.
    pub fn forward<T: Real>(
        &self,
        sess: &mut Session<'_, T>,
        x: Var,
        masks: Option<&[PatchMask]>,
    ) -> Result<Pyramid> {
        let cfg = &self.config;
        let (n, c, h, w) = match *sess.g.shape(x) {
            [n, c, h, w] => (n, c, h, w),
            ref s => return Err(config_err!("encoder input must be [N,C,H,W], got {s:?}")),
        };
        if c != cfg.in_channels {
            return Err(config_err!(
                "encoder expects {} channels, got {c}",
                cfg.in_channels
            ));
        }
        cfg.check_input(h, w)?;
        let mask = match masks {
            Some(m) if m.len() != n => {
                return Err(config_err!("{} masks for a batch of {n}", m.len()))
            }
            Some(m) => Some(batch_mask(m, h, w)?),
            None => None,
        };
        let mut flow = Flow {
            mask,
            sess_prefix: &self.prefix,
        };
        let mut cur = match cfg.stem {
            StemKind::Standard => {
                let y = flow.conv_bn(sess, x, "stem.conv", "stem.bn", 2, true)?;
                let (hh, ww) = {
                    let s = sess.g.shape(y);
                    (s[2], s[3])
                };
                let out_mask = flow
                    .mask
                    .as_ref()
                    .map(|m| m.center_mapped(2, hh.div_ceil(2), ww.div_ceil(2)));
                let y = sess
                    .g
                    .maxpool2d(y, 3, 2, 1, flow.mask.as_ref(), out_mask.as_ref())?;
                flow.mask = out_mask;
                y
            }
            StemKind::Compact => flow.conv_bn(sess, x, "stem.conv", "stem.bn", 1, true)?,
        };
        let mut levels = Vec::with_capacity(4);
        let mut level_masks = Vec::with_capacity(4);
        let mut c_in = cfg.stem_width;
        for (s, (&blocks, &width)) in cfg.blocks.iter().zip(&cfg.widths).enumerate() {
            for b in 0..blocks {
                let p = format!("layer{}.{b}", s + 1);
                let stride = if b == 0 { block_stride(s) } else { 1 };
                let in_mask = flow.mask.clone();
                let y = flow.conv_bn(
                    sess,
                    cur,
                    &format!("{p}.conv1"),
                    &format!("{p}.bn1"),
                    1,
                    true,
                )?;
                let y = flow.conv_bn(
                    sess,
                    y,
                    &format!("{p}.conv2"),
                    &format!("{p}.bn2"),
                    stride,
                    true,
                )?;
                let y = flow.conv_bn(
                    sess,
                    y,
                    &format!("{p}.conv3"),
                    &format!("{p}.bn3"),
                    1,
                    false,
                )?;
                let shortcut = if b == 0 && (c_in != width || stride != 1) {
                    let out_mask = flow.mask.clone();
                    flow.mask = in_mask;
                    let r = flow.conv_bn(
                        sess,
                        cur,
                        &format!("{p}.downsample.conv"),
                        &format!("{p}.downsample.bn"),
                        stride,
                        false,
                    )?;
                    debug_assert_eq!(flow.mask, out_mask);
                    r
                } else {
                    cur
                };
                let sum = sess.g.add(y, shortcut)?;
                cur = sess.g.relu(sum);
                c_in = width;
            }
            levels.push(cur);
            level_masks.push(flow.mask.clone());
        }
        let masks = if level_masks[0].is_some() {
            let v: Vec<Mask> = level_masks
                .into_iter()
                .map(|m| m.expect("sparse mode"))
                .collect();
            Some(v.try_into().expect("four levels"))
        } else {
            None
        };
        Ok(Pyramid {
            levels: levels.try_into().expect("four levels"),
            masks,
        })
    }

    /// Global-average-pooled final features `[N, C_out]`.
    pub fn embed<T: Real>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let p = self.forward(sess, x, None)?;
        sess.g.global_avg_pool(p.last())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{count_trainable, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Per-layer formulas, independent of `param_specs`.
    fn oracle_count(
        in_c: usize,
        stem: usize,
        stem_k: usize,
        blocks: [usize; 4],
        widths: [usize; 4],
    ) -> usize {
        let conv = |i: usize, o: usize, k: usize| i * o * k * k;
        let bn = |c: usize| 2 * c;
        let mut total = conv(in_c, stem, stem_k) + bn(stem);
        let mut c = stem;
        for s in 0..4 {
            let (wd, mid) = (widths[s], widths[s] / 4);
            for b in 0..blocks[s] {
                total += conv(c, mid, 1)
                    + bn(mid)
                    + conv(mid, mid, 3)
                    + bn(mid)
                    + conv(mid, wd, 1)
                    + bn(wd);
                // projection shortcut whenever shape changes
                if b == 0 && (c != wd || s > 0) {
                    total += conv(c, wd, 1) + bn(wd);
                }
                c = wd;
            }
        }
        total
    }

    #[test]
    fn resnet50_matches_published_size() {
        let n = count_trainable(&EncoderConfig::resnet50().param_specs(""));
        assert_eq!(
            n,
            oracle_count(1, 64, 7, [3, 4, 6, 3], [256, 512, 1024, 2048])
        );
        assert_eq!(n, 23_501_760);
        assert!((n as f64 / 23.5e6 - 1.0).abs() < 0.02);
    }

    #[test]
    fn toy_count_matches_oracle() {
        let n = count_trainable(&EncoderConfig::toy().param_specs("e."));
        assert_eq!(n, oracle_count(1, 8, 7, [1; 4], [8, 16, 32, 64]));
    }

    #[test]
    fn pyramid_strides_and_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (enc, params) = build_encoder::<f32>(&EncoderConfig::toy(), "", &mut rng).unwrap();
        let mut sess = Session::new(&params, true);
        let x = sess.input(Tensor::zeros(&[2, 1, 64, 64]));
        let p = enc.forward(&mut sess, x, None).unwrap();
        for (i, (&v, s)) in p.levels.iter().zip([4, 8, 16, 32]).enumerate() {
            assert_eq!(sess.g.shape(v), &[2, [8, 16, 32, 64][i], 64 / s, 64 / s]);
        }
    }

    #[test]
    fn sparse_masks_agree_with_downsample_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (enc, params) = build_encoder::<f32>(&EncoderConfig::toy(), "", &mut rng).unwrap();
        let kept: Vec<bool> = (0..4).map(|i| i != 1).collect();
        let m = PatchMask::new(2, 2, 32, kept).unwrap();
        let mut sess = Session::new(&params, true);
        let x = sess.input(Tensor::ones(&[1, 1, 64, 64]));
        let p = enc
            .forward(&mut sess, x, Some(std::slice::from_ref(&m)))
            .unwrap();
        let masks = p.masks.unwrap();
        for stage in 1..=4 {
            assert_eq!(
                masks[stage - 1].bits(),
                downsample_mask(&m, stage).unwrap().as_slice()
            );
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(EncoderConfig::toy().check_input(48, 64).is_err());
        let mut cfg = EncoderConfig::toy();
        cfg.widths[1] = 10;
        assert!(cfg.validate().is_err());
    }
}
