//! Submanifold sparse operations and the active-set-aware batch norm.

use crate::error::{config_err, Error, Result};
use crate::tensor::{apply_mask_inplace, conv, Backward, Mask, Real, Session, Tensor, Var};

/// Dense storage plus an active set at one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFeatureMap<T> {
    values: Tensor<T>,
    active: Mask,
}

impl<T: Real> SparseFeatureMap<T> {
    /// Builds a map, zeroing storage at inactive sites.
    pub fn new(mut values: Tensor<T>, active: Mask) -> Result<Self> {
        check_cover(&values, &active)?;
        let c = values.dim(1);
        apply_mask_inplace(values.data_mut(), &active, c);
        Ok(Self { values, active })
    }

    /// Keeps whatever is stored at inactive sites. Sparse operations never read it.
    pub fn from_raw(values: Tensor<T>, active: Mask) -> Result<Self> {
        check_cover(&values, &active)?;
        Ok(Self { values, active })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor<T> {
        &mut self.values
    }

    pub fn active(&self) -> &Mask {
        &self.active
    }

    /// Copy with inactive sites reading as zero.
    pub fn zero_filled(&self) -> Tensor<T> {
        let mut v = self.values.clone();
        let c = v.dim(1);
        apply_mask_inplace(v.data_mut(), &self.active, c);
        v
    }
}

fn check_cover<T: Real>(values: &Tensor<T>, active: &Mask) -> Result<()> {
    match values.shape() {
        &[n, _, h, w] if active.dims() == (n, h, w) => Ok(()),
        s => Err(config_err!(
            "active set {:?} does not cover values {:?}",
            active.dims(),
            s
        )),
    }
}

/// Submanifold convolution with `padding = k/2`: stride 1 keeps the active set,
/// larger strides activate an output when its centre-mapped input is active.
/// Inactive outputs are exactly zero and inactive inputs are never read.
pub fn submanifold_sparse_conv2d<T: Real>(
    input: &SparseFeatureMap<T>,
    weights: &Tensor<T>,
    stride: usize,
) -> Result<SparseFeatureMap<T>> {
    let &[n, c, h, w] = input.values.shape() else {
        unreachable!()
    };
    let &[k, c2, kh, kw] = weights.shape() else {
        return Err(config_err!(
            "weights must be [K,C,kh,kw], got {:?}",
            weights.shape()
        ));
    };
    if c != c2 || kh % 2 == 0 || kw % 2 == 0 {
        return Err(config_err!(
            "weights {:?} incompatible with {c} input channels",
            weights.shape()
        ));
    }
    let pad = kh / 2;
    let ho = conv::out_extent(h, kh, stride, pad).ok_or_else(|| config_err!("input too small"))?;
    let wo =
        conv::out_extent(w, kw, stride, kw / 2).ok_or_else(|| config_err!("input too small"))?;
    let out_mask = input.active.center_mapped(stride, ho, wo);
    let geom = conv::ConvGeom {
        c,
        h,
        w,
        k,
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
    };
    let out = conv::conv2d_forward(
        input.values.data(),
        weights.data(),
        n,
        &geom,
        Some(input.active.bits()),
        Some(out_mask.bits()),
    );
    SparseFeatureMap::from_raw(Tensor::new(&[n, k, ho, wo], out)?, out_mask)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-norm mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics over active sites.
    Train,
    /// Running statistics.
    Eval,
}

/// Output of [`batch_norm_forward`].
pub struct NormOutput<T> {
    pub y: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and unbiased variance (training mode only).
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
    pub count: usize,
}

fn site_active(mask: Option<&Mask>, n: usize, s: usize, plane: usize) -> bool {
    mask.is_none_or(|m| m.image(n)[s % plane.max(1)])
}

/// Batch norm over `[N,C]` or `[N,C,H,W]`; with a mask only active sites
/// contribute to statistics and inactive outputs are zero.
pub fn batch_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: (&[T], &[T]),
    mask: Option<&Mask>,
    mode: NormMode,
) -> Result<NormOutput<T>> {
    let shape = x.shape();
    let (n, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    if let Some(m) = mask {
        let (mn, mh, mw) = m.dims();
        if shape.len() != 4 || (mn, mh, mw) != (n, shape[2], shape[3]) {
            return Err(config_err!(
                "batch norm mask {:?} vs input {:?}",
                m.dims(),
                shape
            ));
        }
    }
    if gamma.len() != c || beta.len() != c {
        return Err(config_err!(
            "batch norm has {} channels, input {c}",
            gamma.len()
        ));
    }
    let count = match mask {
        Some(m) => m.count_active(),
        None => n * plane,
    };
    let data = x.data();
    let mut y = vec![T::zero(); data.len()];
    let mut xhat = vec![T::zero(); data.len()];
    let mut inv_std = vec![T::zero(); c];
    let mut batch_stats = None;
    let eps = T::lit(BN_EPS);
    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        NormMode::Eval => (running.0.to_vec(), running.1.to_vec()),
        NormMode::Train => {
            if count == 0 {
                return Err(Error::Undefined(
                    "batch norm over a batch with no active sites".into(),
                ));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for i in 0..n {
                    let base = (i * c + ch) * plane;
                    for p in 0..plane {
                        if site_active(mask, i, p, plane) {
                            s = s + data[base + p];
                        }
                    }
                }
                let mu = s / T::lit(count as f64);
                let mut ss = T::zero();
                for i in 0..n {
                    let base = (i * c + ch) * plane;
                    for p in 0..plane {
                        if site_active(mask, i, p, plane) {
                            let d = data[base + p] - mu;
                            ss = ss + d * d;
                        }
                    }
                }
                mean[ch] = mu;
                var[ch] = ss / T::lit(count as f64);
            }
            let unbiased = var
                .iter()
                .map(|&v| {
                    if count > 1 {
                        v * T::lit(count as f64 / (count - 1) as f64)
                    } else {
                        v
                    }
                })
                .collect();
            batch_stats = Some((mean.clone(), unbiased));
            (mean, var)
        }
    };
    for ch in 0..c {
        let is = T::one() / (var[ch] + eps).sqrt();
        inv_std[ch] = is;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for p in 0..plane {
                if site_active(mask, i, p, plane) {
                    let xh = (data[base + p] - mean[ch]) * is;
                    xhat[base + p] = xh;
                    y[base + p] = gamma[ch] * xh + beta[ch];
                }
            }
        }
    }
    Ok(NormOutput {
        y: Tensor::new(shape, y)?,
        xhat,
        inv_std,
        batch_stats,
        count,
    })
}

struct BatchNormOp<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mask: Option<Mask>,
    mode: NormMode,
    count: usize,
}

impl<T: Real> Backward<T> for BatchNormOp<T> {
    fn backward(
        &self,
        g: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let shape = inputs[0].shape();
        let (n, c) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product();
        let gamma = inputs[1].data();
        let gd = g.data();
        let mask = self.mask.as_ref();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); gd.len()];
        let m = T::lit(self.count.max(1) as f64);
        for ch in 0..c {
            let (mut sum_dy, mut sum_dy_xh) = (T::zero(), T::zero());
            for i in 0..n {
                let base = (i * c + ch) * plane;
                for p in 0..plane {
                    if site_active(mask, i, p, plane) {
                        sum_dy = sum_dy + gd[base + p];
                        sum_dy_xh = sum_dy_xh + gd[base + p] * self.xhat[base + p];
                    }
                }
            }
            dgamma[ch] = sum_dy_xh;
            dbeta[ch] = sum_dy;
            if !needs[0] {
                continue;
            }
            let k = gamma[ch] * self.inv_std[ch];
            for i in 0..n {
                let base = (i * c + ch) * plane;
                for p in 0..plane {
                    if !site_active(mask, i, p, plane) {
                        continue;
                    }
                    dx[base + p] = match self.mode {
                        NormMode::Eval => k * gd[base + p],
                        NormMode::Train => {
                            k * (gd[base + p] - sum_dy / m - self.xhat[base + p] * sum_dy_xh / m)
                        }
                    };
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::new(shape, dx).expect("shape")),
            needs[1].then(|| Tensor::new(&[c], dgamma).expect("shape")),
            needs[2].then(|| Tensor::new(&[c], dbeta).expect("shape")),
        ]
    }
}

/// Batch norm layer `prefix.{weight,bias,running_mean,running_var}` on the
/// session graph. Training sessions use batch statistics and record updated
/// running statistics; evaluation sessions use the stored ones.
pub fn batch_norm<T: Real>(
    sess: &mut Session<'_, T>,
    x: Var,
    prefix: &str,
    mask: Option<&Mask>,
) -> Result<Var> {
    let gamma = sess.param(&format!("{prefix}.weight"))?;
    let beta = sess.param(&format!("{prefix}.bias"))?;
    let rm_name = format!("{prefix}.running_mean");
    let rv_name = format!("{prefix}.running_var");
    let mode = if sess.training() && !sess.is_frozen(prefix) {
        NormMode::Train
    } else {
        NormMode::Eval
    };
    let out = {
        let rm = sess.value_of(&rm_name)?;
        let rv = sess.value_of(&rv_name)?;
        batch_norm_forward(
            sess.g.value(x),
            sess.g.value(gamma).data(),
            sess.g.value(beta).data(),
            (rm.data(), rv.data()),
            mask,
            mode,
        )?
    };
    if let Some((mean, var)) = &out.batch_stats {
        let mom = T::lit(BN_MOMENTUM);
        let keep = T::one() - mom;
        let rm = sess
            .value_of(&rm_name)?
            .zip_map(&Tensor::new(&[mean.len()], mean.clone())?, |r, b| {
                keep * r + mom * b
            });
        let rv = sess
            .value_of(&rv_name)?
            .zip_map(&Tensor::new(&[var.len()], var.clone())?, |r, b| {
                keep * r + mom * b
            });
        sess.record_stat(rm_name, rm);
        sess.record_stat(rv_name, rv);
    }
    let op = BatchNormOp {
        xhat: out.xhat,
        inv_std: out.inv_std,
        mask: mask.cloned(),
        mode,
        count: out.count,
    };
    Ok(sess.g.push(out.y, &[x, gamma, beta], op))
}

/// Value-level sparse batch norm with explicit affine parameters and running
/// statistics `(mean, var)`.
pub fn sparse_batchnorm<T: Real>(
    input: &SparseFeatureMap<T>,
    gamma: &[T],
    beta: &[T],
    running: (&[T], &[T]),
    mode: NormMode,
) -> Result<SparseFeatureMap<T>> {
    let out = batch_norm_forward(
        &input.values,
        gamma,
        beta,
        running,
        Some(&input.active),
        mode,
    )?;
    SparseFeatureMap::from_raw(out.y, input.active.clone())
}
