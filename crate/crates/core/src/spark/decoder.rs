use crate::encoder::{batch_norm, bn_specs, conv_specs, EncoderConfig};
use crate::error::{config_err, Result};
use crate::tensor::{Init, ParamSpec, Real, Session, Var};

/// U-Net decoder widths. Level `l` features are projected to `proj[l]`
/// channels; block `b` upsamples, adds the projected skip from the next finer
/// level and maps to `blocks[b]` channels; the head upsamples back to the
/// input extent and emits one channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub proj: [usize; 4],
    pub blocks: [usize; 3],
    pub head: usize,
    pub out_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::from_base(80)
    }
}

impl DecoderConfig {
    /// Widths derived from the finest projection width `base`.
    pub fn from_base(base: usize) -> Self {
        Self {
            proj: [base, 2 * base, 4 * base, 4 * base],
            blocks: [2 * base, base, (base / 2).max(1)],
            head: (base / 4).max(1),
            out_channels: 1,
        }
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.proj.contains(&0)
            || self.blocks.contains(&0)
            || self.head == 0
            || self.out_channels == 0
        {
            return Err(config_err!("decoder widths must be positive"));
        }
        // each block's input (previous width) must match the skip it is added to
        let inputs = [self.proj[3], self.blocks[0], self.blocks[1]];
        for b in 0..3 {
            if inputs[b] != self.proj[2 - b] {
                return Err(config_err!(
                    "decoder block {b} receives {} channels but skip projection has {}",
                    inputs[b],
                    self.proj[2 - b]
                ));
            }
        }
        if !enc.stem_stride().is_power_of_two() {
            return Err(config_err!(
                "stem stride {} is not a power of two",
                enc.stem_stride()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub encoder: EncoderConfig,
    pub prefix: String,
}

impl Decoder {
    fn has_proj(&self, l: usize) -> bool {
        self.config.proj[l] != self.encoder.widths[l]
    }

    fn head_upsamplings(&self) -> usize {
        self.encoder.stem_stride().trailing_zeros() as usize
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = &self.config;
        let p = &self.prefix;
        let mut specs = Vec::new();
        for l in 0..4 {
            if self.has_proj(l) {
                conv_specs(
                    &mut specs,
                    &format!("{p}proj{l}"),
                    c.proj[l],
                    self.encoder.widths[l],
                    1,
                );
                specs.push(ParamSpec::new(
                    format!("{p}proj{l}.bias"),
                    &[c.proj[l]],
                    Init::Zeros,
                ));
            }
        }
        let mut c_in = c.proj[3];
        for b in 0..3 {
            let name = format!("{p}block{b}");
            conv_specs(&mut specs, &format!("{name}.conv1"), c.blocks[b], c_in, 3);
            bn_specs(&mut specs, &format!("{name}.bn1"), c.blocks[b]);
            conv_specs(
                &mut specs,
                &format!("{name}.conv2"),
                c.blocks[b],
                c.blocks[b],
                3,
            );
            bn_specs(&mut specs, &format!("{name}.bn2"), c.blocks[b]);
            c_in = c.blocks[b];
        }
        conv_specs(&mut specs, &format!("{p}head.conv1"), c.head, c_in, 3);
        bn_specs(&mut specs, &format!("{p}head.bn1"), c.head);
        conv_specs(&mut specs, &format!("{p}head.conv2"), c.head, c.head, 3);
        bn_specs(&mut specs, &format!("{p}head.bn2"), c.head);
        conv_specs(
            &mut specs,
            &format!("{p}head.out"),
            c.out_channels,
            c.head,
            1,
        );
        specs.push(ParamSpec::new(
            format!("{p}head.out.bias"),
            &[c.out_channels],
            Init::Zeros,
        ));
        specs
    }

    fn project<T: Real>(&self, sess: &mut Session<'_, T>, x: Var, l: usize) -> Result<Var> {
        if !self.has_proj(l) {
            return Ok(x);
        }
        let name = format!("{}proj{l}", self.prefix);
        let w = sess.param(&format!("{name}.weight"))?;
        let b = sess.param(&format!("{name}.bias"))?;
        let y = sess.g.conv2d(x, w, 1, 0, None, None)?;
        sess.g.add_channel_bias(y, b)
    }

    fn conv_bn_relu<T: Real>(
        &self,
        sess: &mut Session<'_, T>,
        x: Var,
        conv: &str,
        bn: &str,
    ) -> Result<Var> {
        let w = sess.param(&format!("{}{conv}.weight", self.prefix))?;
        let y = sess.g.conv2d(x, w, 1, 1, None, None)?;
        let y = batch_norm(sess, y, &format!("{}{bn}", self.prefix), None)?;
        Ok(sess.g.relu(y))
    }

    /// Decodes a dense pyramid (finest first) to `[N, out_channels, H, W]`.
    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, pyramid: &[Var; 4]) -> Result<Var> {
        for l in 0..4 {
            let s = sess.g.shape(pyramid[l]);
            if s.len() != 4 || s[1] != self.encoder.widths[l] {
                return Err(config_err!(
                    "pyramid level {l} has shape {s:?}, expected {} channels",
                    self.encoder.widths[l]
                ));
            }
        }
        let mut d = self.project(sess, pyramid[3], 3)?;
        for b in 0..3 {
            d = sess.g.upsample_nearest(d, 2)?;
            let skip = self.project(sess, pyramid[2 - b], 2 - b)?;
            if sess.g.shape(d) != sess.g.shape(skip) {
                return Err(config_err!(
                    "decoder block {b}: upsampled {:?} vs skip {:?}",
                    sess.g.shape(d),
                    sess.g.shape(skip)
                ));
            }
            d = sess.g.add(d, skip)?;
            d = self.conv_bn_relu(
                sess,
                d,
                &format!("block{b}.conv1"),
                &format!("block{b}.bn1"),
            )?;
            d = self.conv_bn_relu(
                sess,
                d,
                &format!("block{b}.conv2"),
                &format!("block{b}.bn2"),
            )?;
        }
        let ups = self.head_upsamplings();
        for i in 0..2 {
            if i < ups {
                d = sess.g.upsample_nearest(d, 2)?;
            }
            d = self.conv_bn_relu(
                sess,
                d,
                &format!("head.conv{}", i + 1),
                &format!("head.bn{}", i + 1),
            )?;
        }
        for _ in 2..ups {
            d = sess.g.upsample_nearest(d, 2)?;
        }
        let w = sess.param(&format!("{}head.out.weight", self.prefix))?;
        let b = sess.param(&format!("{}head.out.bias", self.prefix))?;
        let y = sess.g.conv2d(d, w, 1, 0, None, None)?;
        sess.g.add_channel_bias(y, b)
    }
}
