//! Convolution and pooling kernels over NCHW storage.
//!
//! Both kernels accept optional activity masks. With an output mask only the
//! active output sites are computed (the submanifold case); with an input mask
//! inactive input sites read as zero regardless of what is stored there.

use rayon::prelude::*;

use super::{matmul_into, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    #[inline]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<usize> {
        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
        let ix = (ox * self.stride + kj) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some(iy as usize * self.w + ix as usize)
        }
    }
}

pub fn out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output sites to evaluate for one image.
pub(crate) fn positions(out_mask: Option<&[bool]>, count: usize) -> Vec<usize> {
    match out_mask {
        Some(m) => (0..count).filter(|&i| m[i]).collect(),
        None => (0..count).collect(),
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, in_mask: Option<&[bool]>, pos: &[usize]) -> Vec<T> {
    let p = pos.len();
    let mut cols = vec![T::zero(); g.ckk() * p];
    let plane = g.h * g.w;
    for c in 0..g.c {
        let xc = &x[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for (d, &o) in dst.iter_mut().zip(pos) {
                    if let Some(src) = g.source(o / g.wo, o % g.wo, ki, kj) {
                        if in_mask.is_none_or(|m| m[src]) {
                            *d = xc[src];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(
    cols: &[T],
    g: &ConvGeom,
    in_mask: Option<&[bool]>,
    pos: &[usize],
    dx: &mut [T],
) {
    let p = pos.len();
    let plane = g.h * g.w;
    for c in 0..g.c {
        let dxc = &mut dx[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * p..(row + 1) * p];
                for (&v, &o) in src_row.iter().zip(pos) {
                    if let Some(dst) = g.source(o / g.wo, o % g.wo, ki, kj) {
                        if in_mask.is_none_or(|m| m[dst]) {
                            dxc[dst] = dxc[dst] + v;
                        }
                    }
                }
            }
        }
    }
}

fn mask_slice(m: Option<&[bool]>, n: usize, plane: usize) -> Option<&[bool]> {
    m.map(|m| &m[n * plane..(n + 1) * plane])
}

/// Forward convolution of a batch. Masks are flattened `[N, H, W]` / `[N, Ho, Wo]`.
pub fn conv2d_forward<T: Real>(
    x: &[T],
    weight: &[T],
    n: usize,
    g: &ConvGeom,
    in_mask: Option<&[bool]>,
    out_mask: Option<&[bool]>,
) -> Vec<T> {
    let in_size = g.c * g.h * g.w;
    let out_plane = g.ho * g.wo;
    let per_image: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &x[i * in_size..(i + 1) * in_size];
            let pos = positions(mask_slice(out_mask, i, out_plane), out_plane);
            let mut out = vec![T::zero(); g.k * out_plane];
            if pos.is_empty() {
                return out;
            }
            let cols = im2col(xi, g, mask_slice(in_mask, i, g.h * g.w), &pos);
            let p = pos.len();
            if p == out_plane {
                matmul_into(
                    weight,
                    false,
                    &cols,
                    false,
                    &mut out,
                    g.k,
                    g.ckk(),
                    p,
                    false,
                );
            } else {
                let mut dense = vec![T::zero(); g.k * p];
                matmul_into(
                    weight,
                    false,
                    &cols,
                    false,
                    &mut dense,
                    g.k,
                    g.ckk(),
                    p,
                    false,
                );
                for kk in 0..g.k {
                    for (pi, &o) in pos.iter().enumerate() {
                        out[kk * out_plane + o] = dense[kk * p + pi];
                    }
                }
            }
            out
        })
        .collect();
    per_image.concat()
}

/// Returns `(dx, dw)`; either may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    grad: &[T],
    x: &[T],
    weight: &[T],
    n: usize,
    g: &ConvGeom,
    in_mask: Option<&[bool]>,
    out_mask: Option<&[bool]>,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_size = g.c * g.h * g.w;
    let out_plane = g.ho * g.wo;
    let ckk = g.ckk();
    let parts: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let pos = positions(mask_slice(out_mask, i, out_plane), out_plane);
            let p = pos.len();
            let mut dx = if need_dx {
                vec![T::zero(); in_size]
            } else {
                Vec::new()
            };
            let mut dw = if need_dw {
                vec![T::zero(); g.k * ckk]
            } else {
                Vec::new()
            };
            if p == 0 {
                return (dx, dw);
            }
            let gi = &grad[i * g.k * out_plane..(i + 1) * g.k * out_plane];
            let gp: Vec<T> = if p == out_plane {
                gi.to_vec()
            } else {
                let mut v = vec![T::zero(); g.k * p];
                for kk in 0..g.k {
                    for (pi, &o) in pos.iter().enumerate() {
                        v[kk * p + pi] = gi[kk * out_plane + o];
                    }
                }
                v
            };
            let im = mask_slice(in_mask, i, g.h * g.w);
            if need_dw {
                let cols = im2col(&x[i * in_size..(i + 1) * in_size], g, im, &pos);
                matmul_into(&gp, false, &cols, true, &mut dw, g.k, p, ckk, false);
            }
            if need_dx {
                let mut dcols = vec![T::zero(); ckk * p];
                matmul_into(weight, true, &gp, false, &mut dcols, ckk, g.k, p, false);
                col2im(&dcols, g, im, &pos, &mut dx);
            }
            (dx, dw)
        })
        .collect();
    let dx = need_dx.then(|| {
        parts
            .iter()
            .flat_map(|(dx, _)| dx.iter().copied())
            .collect()
    });
    let dw = need_dw.then(|| {
        let mut acc = vec![T::zero(); g.k * ckk];
        for (_, dw) in &parts {
            for (a, &b) in acc.iter_mut().zip(dw) {
                *a = *a + b;
            }
        }
        acc
    });
    (dx, dw)
}

/// Max-pool forward over `[N*C]` planes. Returns values and the flat argmax
/// input index per output (`usize::MAX` where the window had no active input).
pub fn maxpool_forward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    in_mask: Option<&[bool]>,
    out_mask: Option<&[bool]>,
) -> (Vec<T>, Vec<usize>) {
    let plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let parts: Vec<(Vec<T>, Vec<usize>)> = (0..n * g.c)
        .into_par_iter()
        .map(|nc| {
            let i = nc / g.c;
            let xp = &x[nc * plane..(nc + 1) * plane];
            let im = mask_slice(in_mask, i, plane);
            let om = mask_slice(out_mask, i, out_plane);
            let mut vals = vec![T::zero(); out_plane];
            let mut arg = vec![usize::MAX; out_plane];
            for o in 0..out_plane {
                if om.is_some_and(|m| !m[o]) {
                    continue;
                }
                let mut best: Option<(T, usize)> = None;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        if let Some(src) = g.source(o / g.wo, o % g.wo, ki, kj) {
                            if im.is_some_and(|m| !m[src]) {
                                continue;
                            }
                            let v = xp[src];
                            if best.is_none_or(|(b, _)| v > b) {
                                best = Some((v, src));
                            }
                        }
                    }
                }
                if let Some((v, src)) = best {
                    vals[o] = v;
                    arg[o] = nc * plane + src;
                }
            }
            (vals, arg)
        })
        .collect();
    let mut vals = Vec::with_capacity(n * g.c * out_plane);
    let mut args = Vec::with_capacity(n * g.c * out_plane);
    for (v, a) in parts {
        vals.extend(v);
        args.extend(a);
    }
    (vals, args)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.k * g.ho * g.wo];
        for k in 0..g.k {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut s = 0.0;
                    for c in 0..g.c {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w
                                {
                                    s += x[(c * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((k * g.c + c) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                    }
                    out[(k * g.ho + oy) * g.wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn matches_nested_loops() {
        let g = ConvGeom {
            c: 2,
            h: 5,
            w: 4,
            k: 3,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            ho: 3,
            wo: 2,
        };
        let x: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..54).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let got = conv2d_forward(&x, &w, 1, &g, None, None);
        let want = naive(&x, &w, &g);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn out_mask_skips_inactive_sites() {
        let g = ConvGeom {
            c: 1,
            h: 3,
            w: 3,
            k: 1,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            ho: 3,
            wo: 3,
        };
        let x = vec![1.0f64; 9];
        let w = vec![1.0f64; 9];
        let mask: Vec<bool> = (0..9).map(|i| i == 4).collect();
        let out = conv2d_forward(&x, &w, 1, &g, None, Some(&mask));
        assert_eq!(out[4], 9.0);
        assert_eq!(out.iter().filter(|&&v| v != 0.0).count(), 1);
        let masked_in = conv2d_forward(&x, &w, 1, &g, Some(&mask), Some(&mask));
        assert_eq!(masked_in[4], 1.0);
    }
}
