use crate::error::{config_err, Result};

/// Boolean activity grid `[N, H, W]`; `true` marks an active (kept) site.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    n: usize,
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(n: usize, h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n * h * w {
            return Err(config_err!(
                "mask [{n},{h},{w}] needs {} flags, got {}",
                n * h * w,
                bits.len()
            ));
        }
        Ok(Self { n, h, w, bits })
    }

    pub fn full(n: usize, h: usize, w: usize, value: bool) -> Self {
        Self {
            n,
            h,
            w,
            bits: vec![value; n * h * w],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Flags of image `i` as a row-major `H*W` slice.
    pub fn image(&self, i: usize) -> &[bool] {
        let s = self.h * self.w;
        &self.bits[i * s..(i + 1) * s]
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> bool {
        self.bits[(n * self.h + y) * self.w + x]
    }

    pub fn count_active(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn active_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.count_active() as f64 / self.bits.len() as f64
    }

    pub fn all(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    /// Output activity of a strided window op whose kernel centre for output
    /// `(i, j)` sits on input `(i*stride, j*stride)`.
    pub fn center_mapped(&self, stride: usize, out_h: usize, out_w: usize) -> Mask {
        let mut bits = Vec::with_capacity(self.n * out_h * out_w);
        for n in 0..self.n {
            for i in 0..out_h {
                for j in 0..out_w {
                    let (y, x) = (i * stride, j * stride);
                    bits.push(y < self.h && x < self.w && self.get(n, y, x));
                }
            }
        }
        Mask {
            n: self.n,
            h: out_h,
            w: out_w,
            bits,
        }
    }
}
