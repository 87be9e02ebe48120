//! Differentiable primitives.
//!
//! The inventory is deliberately small: elementwise arithmetic, matrix
//! products and `linear`, `relu`, convolution, max/average pooling, nearest
//! and bilinear upsampling, softmax cross-entropy and L2 terms (row
//! normalisation and masked squared error). Everything else is composed.

use super::conv::{self, ConvGeom};
use super::{matmul_into, Backward, Graph, Mask, Real, Tensor, Var};
use crate::error::{config_err, Error, Result};

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(config_err!("{what}: shapes {:?} and {:?} differ", a, b));
    }
    Ok(())
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(config_err!("{what}: expected [N,C,H,W], got {:?}", shape)),
    }
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        &[r, c] => Ok((r, c)),
        _ => Err(config_err!("{what}: expected a matrix, got {:?}", shape)),
    }
}

// ---------------------------------------------------------------- elementwise

struct AddOp;
impl<T: Real> Backward<T> for AddOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        needs.iter().map(|&n| n.then(|| g.clone())).collect()
    }
}

struct SubOp;
impl<T: Real> Backward<T> for SubOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
    }
}

struct MulOp;
impl<T: Real> Backward<T> for MulOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![
            needs[0].then(|| g.zip_map(x[1], |a, b| a * b)),
            needs[1].then(|| g.zip_map(x[0], |a, b| a * b)),
        ]
    }
}

struct ScaleOp<T>(T);
impl<T: Real> Backward<T> for ScaleOp<T> {
    fn backward(
        &self,
        g: &Tensor<T>,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.map(|v| v * self.0))]
    }
}

struct ReluOp;
impl<T: Real> Backward<T> for ReluOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.zip_map(x[0], |gv, xv| {
            if xv > T::zero() {
                gv
            } else {
                T::zero()
            }
        }))]
    }
}

struct ReshapeOp(Vec<usize>);
impl<T: Real> Backward<T> for ReshapeOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(
            Tensor::new(&self.0, g.data().to_vec()).expect("same element count"),
        )]
    }
}

/// Broadcast multiply of `[N,C,H,W]` by a per-site `[N,H,W]` 0/1 mask.
struct MaskOp(Mask);
impl<T: Real> Backward<T> for MaskOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let mut out = g.clone();
        apply_mask_inplace(out.data_mut(), &self.0, g.dim(1));
        vec![Some(out)]
    }
}

pub(crate) fn apply_mask_inplace<T: Real>(data: &mut [T], mask: &Mask, channels: usize) {
    let (n, h, w) = mask.dims();
    let plane = h * w;
    for i in 0..n {
        let m = mask.image(i);
        for c in 0..channels {
            let base = (i * channels + c) * plane;
            for (v, &keep) in data[base..base + plane].iter_mut().zip(m) {
                if !keep {
                    *v = T::zero();
                }
            }
        }
    }
}

struct SumOp(Vec<usize>);
impl<T: Real> Backward<T> for SumOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(&self.0, g.item()))]
    }
}

/// `[N,C,...]` plus per-channel `[C]` bias.
struct ChannelBiasOp {
    channels: usize,
    inner: usize,
}
impl<T: Real> Backward<T> for ChannelBiasOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let db = needs[1].then(|| {
            let mut db = vec![T::zero(); self.channels];
            for (i, chunk) in g.data().chunks(self.inner).enumerate() {
                let c = i % self.channels;
                db[c] = db[c] + chunk.iter().copied().sum::<T>();
            }
            Tensor::new(&[self.channels], db).expect("bias shape")
        });
        vec![needs[0].then(|| g.clone()), db]
    }
}

// ---------------------------------------------------------------- matrices

/// `a[M,K] · b[N,K]ᵀ`.
struct MatMulNtOp {
    m: usize,
    k: usize,
    n: usize,
}
impl<T: Real> Backward<T> for MatMulNtOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let da = needs[0].then(|| {
            let mut d = vec![T::zero(); m * k];
            matmul_into(g.data(), false, x[1].data(), false, &mut d, m, n, k, false);
            Tensor::new(&[m, k], d).expect("shape")
        });
        let db = needs[1].then(|| {
            let mut d = vec![T::zero(); n * k];
            matmul_into(g.data(), true, x[0].data(), false, &mut d, n, m, k, false);
            Tensor::new(&[n, k], d).expect("shape")
        });
        vec![da, db]
    }
}

/// `x[N,I] · w[O,I]ᵀ + b[O]`.
struct LinearOp {
    n: usize,
    i: usize,
    o: usize,
}
impl<T: Real> Backward<T> for LinearOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (n, i, o) = (self.n, self.i, self.o);
        let dx = needs[0].then(|| {
            let mut d = vec![T::zero(); n * i];
            matmul_into(g.data(), false, x[1].data(), false, &mut d, n, o, i, false);
            Tensor::new(&[n, i], d).expect("shape")
        });
        let dw = needs[1].then(|| {
            let mut d = vec![T::zero(); o * i];
            matmul_into(g.data(), true, x[0].data(), false, &mut d, o, n, i, false);
            Tensor::new(&[o, i], d).expect("shape")
        });
        let db = needs[2].then(|| {
            let mut d = vec![T::zero(); o];
            for row in g.data().chunks(o) {
                for (a, &b) in d.iter_mut().zip(row) {
                    *a = *a + b;
                }
            }
            Tensor::new(&[o], d).expect("shape")
        });
        vec![dx, dw, db]
    }
}

struct ConcatColsOp {
    rows: usize,
    widths: Vec<usize>,
}
impl<T: Real> Backward<T> for ConcatColsOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        let mut out = Vec::new();
        for (&w, &need) in self.widths.iter().zip(needs) {
            out.push(need.then(|| {
                let mut d = Vec::with_capacity(self.rows * w);
                for r in 0..self.rows {
                    d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                }
                Tensor::new(&[self.rows, w], d).expect("shape")
            }));
            offset += w;
        }
        out
    }
}

/// Concatenation along the leading axis.
struct ConcatRowsOp(Vec<Vec<usize>>);
impl<T: Real> Backward<T> for ConcatRowsOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let mut offset = 0;
        let mut out = Vec::new();
        for (shape, &need) in self.0.iter().zip(needs) {
            let len: usize = shape.iter().product();
            out.push(need.then(|| {
                Tensor::new(shape, g.data()[offset..offset + len].to_vec()).expect("shape")
            }));
            offset += len;
        }
        out
    }
}

struct SliceRowsOp {
    shape: Vec<usize>,
    start: usize,
    len: usize,
}
impl<T: Real> Backward<T> for SliceRowsOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let mut d = Tensor::zeros(&self.shape);
        d.data_mut()[self.start..self.start + self.len].copy_from_slice(g.data());
        vec![Some(d)]
    }
}

/// Row-wise `x / ‖x‖`.
struct L2NormalizeOp {
    dim: usize,
}
impl<T: Real> Backward<T> for L2NormalizeOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        x: &[&Tensor<T>],
        y: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let d = self.dim;
        let mut out = vec![T::zero(); g.len()];
        for (((o, gr), xr), yr) in out
            .chunks_mut(d)
            .zip(g.data().chunks(d))
            .zip(x[0].data().chunks(d))
            .zip(y.data().chunks(d))
        {
            let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
            let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
            for ((ov, &gv), &yv) in o.iter_mut().zip(gr).zip(yr) {
                *ov = (gv - yv * dot) / norm;
            }
        }
        vec![Some(Tensor::new(x[0].shape(), out).expect("shape"))]
    }
}

// ---------------------------------------------------------------- losses

/// Mean over rows of `-Σ_k target[k] · log softmax(logits)[k]`.
struct SoftmaxXentOp {
    probs: Vec<f64>,
    targets: Tensor<f64>,
    rows: usize,
}
impl<T: Real> Backward<T> for SoftmaxXentOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let k = x[0].dim(1);
        let scale = g.item().as_f64() / self.rows as f64;
        let mut d = Vec::with_capacity(self.probs.len());
        for r in 0..self.rows {
            let mass: f64 = self.targets.data()[r * k..(r + 1) * k].iter().sum();
            for j in 0..k {
                let idx = r * k + j;
                d.push(T::lit(
                    scale * (mass * self.probs[idx] - self.targets.data()[idx]),
                ));
            }
        }
        vec![Some(Tensor::new(x[0].shape(), d).expect("shape"))]
    }
}

struct WeightedMseOp<T> {
    target: Tensor<T>,
    weights: Tensor<T>,
    total: T,
}
impl<T: Real> Backward<T> for WeightedMseOp<T> {
    fn backward(
        &self,
        g: &Tensor<T>,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let s = g.item() * T::lit(2.0) / self.total;
        let d: Vec<T> = x[0]
            .data()
            .iter()
            .zip(self.target.data())
            .zip(self.weights.data())
            .map(|((&p, &t), &w)| s * w * (p - t))
            .collect();
        vec![Some(Tensor::new(x[0].shape(), d).expect("shape"))]
    }
}

// ---------------------------------------------------------------- spatial

struct Conv2dOp {
    geom: ConvGeom,
    n: usize,
    in_mask: Option<Mask>,
    out_mask: Option<Mask>,
}
impl<T: Real> Backward<T> for Conv2dOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (dx, dw) = conv::conv2d_backward(
            g.data(),
            x[0].data(),
            x[1].data(),
            self.n,
            &self.geom,
            self.in_mask.as_ref().map(|m| m.bits()),
            self.out_mask.as_ref().map(|m| m.bits()),
            needs[0],
            needs[1],
        );
        vec![
            dx.map(|d| Tensor::new(x[0].shape(), d).expect("shape")),
            dw.map(|d| Tensor::new(x[1].shape(), d).expect("shape")),
        ]
    }
}

struct MaxPoolOp {
    argmax: Vec<usize>,
}
impl<T: Real> Backward<T> for MaxPoolOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let mut d = Tensor::zeros(x[0].shape());
        let dd = d.data_mut();
        for (&gv, &src) in g.data().iter().zip(&self.argmax) {
            if src != usize::MAX {
                dd[src] = dd[src] + gv;
            }
        }
        vec![Some(d)]
    }
}

struct GlobalAvgPoolOp {
    plane: usize,
}
impl<T: Real> Backward<T> for GlobalAvgPoolOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let inv = T::one() / T::lit(self.plane as f64);
        let mut d = Vec::with_capacity(x[0].len());
        for &gv in g.data() {
            d.extend(std::iter::repeat_n(gv * inv, self.plane));
        }
        vec![Some(Tensor::new(x[0].shape(), d).expect("shape"))]
    }
}

struct UpsampleNearestOp {
    factor: usize,
}
impl<T: Real> Backward<T> for UpsampleNearestOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (_, _, h, w) = dims4(x[0].shape(), "upsample").expect("checked in forward");
        let f = self.factor;
        let (ho, wo) = (h * f, w * f);
        let mut d = Tensor::zeros(x[0].shape());
        let dd = d.data_mut();
        for (p, gp) in g.data().chunks(ho * wo).enumerate() {
            for y in 0..ho {
                for xx in 0..wo {
                    let dst = p * h * w + (y / f) * w + xx / f;
                    dd[dst] = dd[dst] + gp[y * wo + xx];
                }
            }
        }
        vec![Some(d)]
    }
}

/// One interpolation tap: `(source index, weight)` pairs per output element.
#[derive(Clone, Debug)]
pub(crate) struct Taps {
    pub idx: [usize; 2],
    pub wt: [f64; 2],
}

/// Half-pixel-centre linear interpolation taps along one axis.
pub(crate) fn linear_taps(src: usize, dst: usize) -> Vec<Taps> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let f = pos - i0 as f64;
            Taps {
                idx: [i0, i1],
                wt: [1.0 - f, f],
            }
        })
        .collect()
}

struct BilinearOp {
    ty: Vec<Taps>,
    tx: Vec<Taps>,
}
impl<T: Real> Backward<T> for BilinearOp {
    fn backward(
        &self,
        g: &Tensor<T>,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (_, _, h, w) = dims4(x[0].shape(), "bilinear").expect("checked in forward");
        let (ho, wo) = (self.ty.len(), self.tx.len());
        let mut d = Tensor::zeros(x[0].shape());
        let dd = d.data_mut();
        for (p, gp) in g.data().chunks(ho * wo).enumerate() {
            let base = p * h * w;
            for (oy, ty) in self.ty.iter().enumerate() {
                for (ox, tx) in self.tx.iter().enumerate() {
                    let gv = gp[oy * wo + ox];
                    for a in 0..2 {
                        for b in 0..2 {
                            let wgt = T::lit(ty.wt[a] * tx.wt[b]);
                            let dst = base + ty.idx[a] * w + tx.idx[b];
                            dd[dst] = dd[dst] + gv * wgt;
                        }
                    }
                }
            }
        }
        vec![Some(d)]
    }
}

pub(crate) fn bilinear_plane<T: Real>(
    src: &[T],
    w: usize,
    ty: &[Taps],
    tx: &[Taps],
    out: &mut [T],
) {
    let wo = tx.len();
    for (oy, a) in ty.iter().enumerate() {
        for (ox, b) in tx.iter().enumerate() {
            let mut s = T::zero();
            for i in 0..2 {
                for j in 0..2 {
                    s = s + src[a.idx[i] * w + b.idx[j]] * T::lit(a.wt[i] * b.wt[j]);
                }
            }
            out[oy * wo + ox] = s;
        }
    }
}

/// Bilinear resize (half-pixel centres) of consecutive `h × w` planes.
pub(crate) fn resize_planes<T: Real>(
    src: &[T],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let (ty, tx) = (linear_taps(h, out_h), linear_taps(w, out_w));
    let planes = src.len() / (h * w);
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for (s, o) in src.chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
        bilinear_plane(s, w, &ty, &tx, o);
    }
    out
}

// ---------------------------------------------------------------- graph API

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, &[a, b], AddOp))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, &[a, b], SubOp))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, &[a, b], MulOp))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, &[a], ScaleOp(s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, &[a], ReluOp)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(a).to_vec();
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, &[a], ReshapeOp(old)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, &[a], SumOp(shape))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Zeroes every channel at sites where `mask` is inactive.
    pub fn apply_mask(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "apply_mask")?;
        if mask.dims() != (n, h, w) {
            return Err(config_err!(
                "mask {:?} does not cover [{n},{c},{h},{w}]",
                mask.dims()
            ));
        }
        let mut v = self.value(x).clone();
        apply_mask_inplace(v.data_mut(), mask, c);
        Ok(self.push(v, &[x], MaskOp(mask.clone())))
    }

    /// Adds a `[C]` bias along axis 1 of an `[N,C,...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(b) != [shape[1]] {
            return Err(config_err!(
                "bias {:?} does not match {:?}",
                self.shape(b),
                shape
            ));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut v = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (i, chunk) in v.data_mut().chunks_mut(inner).enumerate() {
            let bv = bias[i % c];
            chunk.iter_mut().for_each(|e| *e = *e + bv);
        }
        Ok(self.push(v, &[x, b], ChannelBiasOp { channels: c, inner }))
    }

    /// `a[M,K] · b[N,K]ᵀ → [M,N]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (n, k2) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(config_err!("matmul inner extents {k} and {k2} differ"));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            m,
            k,
            n,
            false,
        );
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push(v, &[a, b], MatMulNtOp { m, k, n }))
    }

    /// Fully connected layer `x[N,I] · w[O,I]ᵀ + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, i) = dims2(self.shape(x), "linear input")?;
        let (o, i2) = dims2(self.shape(w), "linear weight")?;
        if i != i2 || self.shape(b) != [o] {
            return Err(config_err!(
                "linear: input width {i}, weight {:?}, bias {:?}",
                self.shape(w),
                self.shape(b)
            ));
        }
        let mut out = vec![T::zero(); n * o];
        matmul_into(
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            n,
            i,
            o,
            false,
        );
        for row in out.chunks_mut(o) {
            for (a, &bv) in row.iter_mut().zip(self.value(b).data()) {
                *a = *a + bv;
            }
        }
        let v = Tensor::new(&[n, o], out)?;
        Ok(self.push(v, &[x, w, b], LinearOp { n, i, o }))
    }

    /// Row-wise dot product of two `[N,D]` matrices, returned as `[N,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = dims2(self.shape(a), "row_dot")?;
        let p = self.mul(a, b)?;
        // sum over columns via a ones vector: [N,D]·[1,D]ᵀ
        let ones = self.constant(Tensor::ones(&[1, d]));
        let s = self.matmul_nt(p, ones)?;
        debug_assert_eq!(self.shape(s), [n, 1]);
        Ok(s)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = dims2(self.shape(parts[0]), "concat")?.0;
        let mut widths = Vec::new();
        for &p in parts {
            let (r, w) = dims2(self.shape(p), "concat")?;
            if r != rows {
                return Err(config_err!("concat_cols: row counts {rows} and {r} differ"));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let v = Tensor::new(&[rows, total], out)?;
        Ok(self.push(v, parts, ConcatColsOp { rows, widths }))
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut shapes = Vec::new();
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p).to_vec();
            if s[1..] != tail[..] {
                return Err(config_err!("concat_rows: {:?} vs trailing {:?}", s, tail));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
            shapes.push(s);
        }
        let mut shape = vec![lead];
        shape.extend(&tail);
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, parts, ConcatRowsOp(shapes)))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if start >= end || end > shape[0] {
            return Err(config_err!(
                "slice {start}..{end} out of range for {:?}",
                shape
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * inner..end * inner].to_vec();
        let mut new_shape = shape.clone();
        new_shape[0] = end - start;
        let v = Tensor::new(&new_shape, data)?;
        Ok(self.push(
            v,
            &[x],
            SliceRowsOp {
                shape,
                start: start * inner,
                len: (end - start) * inner,
            },
        ))
    }

    /// Divides each row of `[N,D]` by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (_, d) = dims2(self.shape(x), "l2_normalize")?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::Numeric {
                    name: "l2_normalize".into(),
                    detail: format!("row norm {norm}"),
                });
            }
            row.iter_mut().for_each(|v| *v = *v / norm);
        }
        Ok(self.push(out, &[x], L2NormalizeOp { dim: d }))
    }

    /// Mean over rows of the cross-entropy between `targets` (probability rows,
    /// no gradient) and `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let (rows, k) = dims2(self.shape(logits), "softmax_cross_entropy")?;
        same_shape(
            self.shape(logits),
            targets.shape(),
            "softmax_cross_entropy targets",
        )?;
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(rows * k);
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &z[r * k..(r + 1) * k];
            let max = row
                .iter()
                .map(|v| v.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + row
                    .iter()
                    .map(|v| (v.as_f64() - max).exp())
                    .sum::<f64>()
                    .ln();
            for (j, v) in row.iter().enumerate() {
                let logp = v.as_f64() - lse;
                probs.push(logp.exp());
                let t = targets.data()[r * k + j].as_f64();
                if t != 0.0 {
                    loss -= t * logp;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric {
                name: "softmax_cross_entropy".into(),
                detail: format!("loss {loss}"),
            });
        }
        let v = Tensor::scalar(T::lit(loss / rows as f64));
        Ok(self.push(
            v,
            &[logits],
            SoftmaxXentOp {
                probs,
                targets: targets.cast(),
                rows,
            },
        ))
    }

    /// Cross-entropy against integer class labels.
    pub fn cross_entropy_labels(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, k) = dims2(self.shape(logits), "cross_entropy")?;
        if labels.len() != rows || labels.iter().any(|&l| l >= k) {
            return Err(config_err!("labels do not match logits [{rows},{k}]"));
        }
        let mut t = Tensor::zeros(&[rows, k]);
        for (r, &l) in labels.iter().enumerate() {
            t.data_mut()[r * k + l] = T::one();
        }
        self.softmax_cross_entropy(logits, &t)
    }

    /// `Σ w·(pred − target)² / Σ w` with constant target and weights.
    pub fn weighted_mse(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        weights: &Tensor<T>,
    ) -> Result<Var> {
        same_shape(self.shape(pred), target.shape(), "weighted_mse target")?;
        same_shape(self.shape(pred), weights.shape(), "weighted_mse weights")?;
        let total = weights.sum();
        if !(total > T::zero()) {
            return Err(Error::Undefined(
                "squared error over an empty region".into(),
            ));
        }
        let s: T = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .zip(weights.data())
            .map(|((&p, &t), &w)| w * (p - t) * (p - t))
            .sum();
        let v = Tensor::scalar(s / total);
        Ok(self.push(
            v,
            &[pred],
            WeightedMseOp {
                target: target.clone(),
                weights: weights.clone(),
                total,
            },
        ))
    }

    /// 2-D convolution without bias. Optional masks restrict which input sites
    /// are read and which output sites are computed.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        stride: usize,
        pad: usize,
        in_mask: Option<&Mask>,
        out_mask: Option<&Mask>,
    ) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "conv2d input")?;
        let (k, c2, kh, kw) = dims4(self.shape(weight), "conv2d weight")?;
        if c != c2 {
            return Err(config_err!(
                "conv2d: input has {c} channels, weight expects {c2}"
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(config_err!("conv2d: kernel {kh}x{kw} must be odd"));
        }
        let ho = conv::out_extent(h, kh, stride, pad).ok_or_else(|| {
            config_err!("conv2d: height {h} with padding {pad} smaller than kernel {kh}")
        })?;
        let wo = conv::out_extent(w, kw, stride, pad).ok_or_else(|| {
            config_err!("conv2d: width {w} with padding {pad} smaller than kernel {kw}")
        })?;
        if let Some(m) = in_mask {
            if m.dims() != (n, h, w) {
                return Err(config_err!(
                    "conv2d: input mask {:?} vs [{n},{h},{w}]",
                    m.dims()
                ));
            }
        }
        if let Some(m) = out_mask {
            if m.dims() != (n, ho, wo) {
                return Err(config_err!(
                    "conv2d: output mask {:?} vs [{n},{ho},{wo}]",
                    m.dims()
                ));
            }
        }
        let geom = ConvGeom {
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
            self.value(x).data(),
            self.value(weight).data(),
            n,
            &geom,
            in_mask.map(|m| m.bits()),
            out_mask.map(|m| m.bits()),
        );
        let v = Tensor::new(&[n, k, ho, wo], out)?;
        Ok(self.push(
            v,
            &[x, weight],
            Conv2dOp {
                geom,
                n,
                in_mask: in_mask.cloned(),
                out_mask: out_mask.cloned(),
            },
        ))
    }

    /// Max pooling; with masks, only active inputs compete and inactive outputs are 0.
    pub fn maxpool2d(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
        in_mask: Option<&Mask>,
        out_mask: Option<&Mask>,
    ) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "maxpool")?;
        let ho = conv::out_extent(h, kernel, stride, pad)
            .ok_or_else(|| config_err!("maxpool: input {h} too small"))?;
        let wo = conv::out_extent(w, kernel, stride, pad)
            .ok_or_else(|| config_err!("maxpool: input {w} too small"))?;
        let geom = ConvGeom {
            c,
            h,
            w,
            k: c,
            kh: kernel,
            kw: kernel,
            stride,
            pad,
            ho,
            wo,
        };
        let (vals, argmax) = conv::maxpool_forward(
            self.value(x).data(),
            n,
            &geom,
            in_mask.map(|m| m.bits()),
            out_mask.map(|m| m.bits()),
        );
        let v = Tensor::new(&[n, c, ho, wo], vals)?;
        Ok(self.push(v, &[x], MaxPoolOp { argmax }))
    }

    /// `[N,C,H,W] → [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "global_avg_pool")?;
        let plane = h * w;
        let inv = T::one() / T::lit(plane as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::new(&[n, c], out)?;
        Ok(self.push(v, &[x], GlobalAvgPoolOp { plane }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "upsample")?;
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for p in self.value(x).data().chunks(h * w) {
            for y in 0..ho {
                for xx in 0..wo {
                    out.push(p[(y / factor) * w + xx / factor]);
                }
            }
        }
        let v = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(v, &[x], UpsampleNearestOp { factor }))
    }

    /// Bilinear resampling to `out_h × out_w` with half-pixel centres.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "bilinear")?;
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return Err(config_err!("bilinear: empty extent"));
        }
        let ty = linear_taps(h, out_h);
        let tx = linear_taps(w, out_w);
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        for (src, dst) in self
            .value(x)
            .data()
            .chunks(h * w)
            .zip(out.chunks_mut(out_h * out_w))
        {
            bilinear_plane(src, w, &ty, &tx, dst);
        }
        let v = Tensor::new(&[n, c, out_h, out_w], out)?;
        Ok(self.push(v, &[x], BilinearOp { ty, tx }))
    }
}
