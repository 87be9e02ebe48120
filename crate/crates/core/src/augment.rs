//! Random resized crops, horizontal flips, Gaussian blur and multi-crop views.

use crate::error::{config_err, Result};
use crate::tensor::{resize_planes, Real, Tensor};
use rand::Rng;

/// `count` views of `size × size`, cropped at an area fraction drawn from
/// `[min_scale, max_scale]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CropGroup {
    pub size: usize,
    pub count: usize,
    pub min_scale: f64,
    pub max_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlurConfig {
    pub kernel: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub prob: f64,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self {
            kernel: 23,
            sigma_min: 0.1,
            sigma_max: 2.0,
            prob: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub groups: Vec<CropGroup>,
    pub flip_prob: f64,
    pub blur: Option<BlurConfig>,
    /// Aspect-ratio range of random crops.
    pub ratio: (f64, f64),
}

impl AugmentConfig {
    /// Two crops of `size` at scale `[0.2, 1]` with flip and blur.
    pub fn two_view(size: usize) -> Self {
        Self {
            groups: vec![CropGroup {
                size,
                count: 2,
                min_scale: 0.2,
                max_scale: 1.0,
            }],
            flip_prob: 0.5,
            blur: Some(BlurConfig::default()),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }

    /// Two large crops at scale `[0.9, 1]` and six small ones at `[0.1, 0.33]`.
    pub fn multi_crop(large: usize, small: usize) -> Self {
        Self {
            groups: vec![
                CropGroup {
                    size: large,
                    count: 2,
                    min_scale: 0.9,
                    max_scale: 1.0,
                },
                CropGroup {
                    size: small,
                    count: 6,
                    min_scale: 0.10,
                    max_scale: 0.33,
                },
            ],
            flip_prob: 0.5,
            blur: Some(BlurConfig::default()),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(config_err!("augmentation needs at least one crop group"));
        }
        for g in &self.groups {
            if g.count == 0 || g.size == 0 {
                return Err(config_err!("crop groups need a positive size and count"));
            }
            if !(0.0 < g.min_scale && g.min_scale <= g.max_scale && g.max_scale <= 1.0) {
                return Err(config_err!(
                    "crop scale [{}, {}] must satisfy 0 < min <= max <= 1",
                    g.min_scale,
                    g.max_scale
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(config_err!(
                "flip probability {} outside [0, 1]",
                self.flip_prob
            ));
        }
        if !(self.ratio.0 > 0.0 && self.ratio.0 <= self.ratio.1) {
            return Err(config_err!(
                "aspect ratio range {:?} is invalid",
                self.ratio
            ));
        }
        if let Some(b) = &self.blur {
            if b.kernel % 2 == 0
                || !(0.0 < b.sigma_min && b.sigma_min <= b.sigma_max)
                || !(0.0..=1.0).contains(&b.prob)
            {
                return Err(config_err!(
                    "blur needs an odd kernel, 0 < sigma_min <= sigma_max and a probability"
                ));
            }
        }
        Ok(())
    }

    pub fn view_count(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }
}

/// Crop window `(top, left, height, width)`.
pub fn random_crop_box(
    h: usize,
    w: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut impl Rng,
) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let r = if lr0 < lr1 {
            rng.random_range(lr0..lr1).exp()
        } else {
            ratio.0
        };
        let cw = (target * r).sqrt().round() as usize;
        let ch = (target / r).sqrt().round() as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    // central crop at the closest admissible aspect ratio
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < ratio.0 {
        (((w as f64) / ratio.0).round() as usize, w)
    } else if in_ratio > ratio.1 {
        (h, ((h as f64) * ratio.1).round() as usize)
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Crops `[C, H, W]` and resizes the window to `out × out`.
pub fn crop_resize<T: Real>(
    img: &Tensor<T>,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
    out: usize,
) -> Result<Tensor<T>> {
    let &[c, h, w] = img.shape() else {
        return Err(config_err!("image must be [C,H,W], got {:?}", img.shape()));
    };
    if top + ch > h || left + cw > w || ch == 0 || cw == 0 {
        return Err(config_err!("crop window exceeds {h}x{w}"));
    }
    let mut window = Vec::with_capacity(c * ch * cw);
    for p in img.data().chunks(h * w) {
        for y in top..top + ch {
            window.extend_from_slice(&p[y * w + left..y * w + left + cw]);
        }
    }
    let data = if (ch, cw) == (out, out) {
        window
    } else {
        resize_planes(&window, ch, cw, out, out)
    };
    Tensor::new(&[c, out, out], data)
}

/// Mirrors `[C, H, W]` left to right.
pub fn hflip<T: Real>(img: &Tensor<T>) -> Tensor<T> {
    let w = *img.shape().last().expect("non-empty shape");
    let mut out = img.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Normalised 1-D Gaussian taps of odd length.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur<T: Real>(img: &Tensor<T>, kernel: usize, sigma: f64) -> Tensor<T> {
    let s = img.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let k = gaussian_kernel(kernel, sigma);
    let r = (kernel / 2) as isize;
    let mut out = img.clone();
    let mut tmp = vec![0.0f64; h * w];
    for plane in out.data_mut().chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, &kv)| {
                        kv * plane[y * w + reflect(x as isize + i as isize - r, w)].as_f64()
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(i, &kv)| kv * tmp[reflect(y as isize + i as isize - r, h) * w + x])
                    .sum();
                plane[y * w + x] = T::lit(v);
            }
        }
    }
    out
}

/// All views of one `[C, H, W]` image, group by group. Each view is
/// crop → resize → optional flip → optional blur.
pub fn make_views<T: Real>(
    img: &Tensor<T>,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor<T>>> {
    config.validate()?;
    let &[_, h, w] = img.shape() else {
        return Err(config_err!("image must be [C,H,W], got {:?}", img.shape()));
    };
    let largest = config
        .groups
        .iter()
        .map(|g| g.size)
        .max()
        .expect("validated");
    if largest > h || largest > w {
        return Err(config_err!("crop size {largest} exceeds image {h}x{w}"));
    }
    let mut views = Vec::with_capacity(config.view_count());
    for g in &config.groups {
        for _ in 0..g.count {
            let (top, left, ch, cw) = if g.min_scale == 1.0 {
                random_crop_box(
                    h,
                    w,
                    (1.0, 1.0),
                    (w as f64 / h as f64, w as f64 / h as f64),
                    rng,
                )
            } else {
                random_crop_box(h, w, (g.min_scale, g.max_scale), config.ratio, rng)
            };
            let mut v = crop_resize(img, top, left, ch, cw, g.size)?;
            if config.flip_prob > 0.0 && rng.random_bool(config.flip_prob) {
                v = hflip(&v);
            }
            if let Some(b) = &config.blur {
                if b.prob > 0.0 && rng.random_bool(b.prob) {
                    let sigma = rng.random_range(b.sigma_min..=b.sigma_max);
                    v = gaussian_blur(&v, b.kernel, sigma);
                }
            }
            views.push(v);
        }
    }
    Ok(views)
}

/// Applies [`make_views`] to each image of `[N, C, H, W]` and stacks view `i`
/// of every image into batch `i`.
pub fn batch_views<T: Real>(
    batch: &Tensor<T>,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor<T>>> {
    let &[n, c, h, w] = batch.shape() else {
        return Err(config_err!(
            "batch must be [N,C,H,W], got {:?}",
            batch.shape()
        ));
    };
    let mut stacks: Vec<Vec<T>> = vec![Vec::new(); config.view_count()];
    let mut sizes = vec![0; config.view_count()];
    for img in batch.data().chunks(c * h * w) {
        let t = Tensor::new(&[c, h, w], img.to_vec())?;
        for (i, v) in make_views(&t, config, rng)?.into_iter().enumerate() {
            sizes[i] = v.dim(1);
            stacks[i].extend_from_slice(v.data());
        }
    }
    stacks
        .into_iter()
        .zip(sizes)
        .map(|(d, s)| Tensor::new(&[n, c, s, s], d))
        .collect()
}
