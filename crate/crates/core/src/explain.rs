//! Grad-CAM heatmaps and their pairwise correlation.

use crate::downstream::Classifier;
use crate::error::{config_err, Error, Result};
use crate::tensor::{resize_planes, ParamSet, Real, Session, Tensor};
use log::warn;
use std::io::Write;
use std::path::Path;

/// Non-negative map, max-normalised to 1 unless all zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub image_id: String,
    pub class_index: usize,
    pub method: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Resolution {
    /// Upsampled to the input size.
    #[default]
    Input,
    /// The coarsest feature-map grid.
    Native,
}

/// Grad-CAM from activations and gradients `[C, h, w]`:
/// `relu(Σ_c mean(grad_c) · act_c)`, bilinear-resized to `out_h × out_w` and
/// max-normalised.
pub fn gradcam_map(
    act: &[f64],
    grad: &[f64],
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>> {
    if act.len() != c * h * w || grad.len() != act.len() || h == 0 || w == 0 {
        return Err(config_err!(
            "grad-cam needs matching [C,h,w] activations and gradients"
        ));
    }
    let hw = h * w;
    let mut cam = vec![0.0; hw];
    for ch in 0..c {
        let g = &grad[ch * hw..(ch + 1) * hw];
        let weight = g.iter().sum::<f64>() / hw as f64;
        for (m, &a) in cam.iter_mut().zip(&act[ch * hw..(ch + 1) * hw]) {
            *m += weight * a;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut out = if (out_h, out_w) == (h, w) {
        cam
    } else {
        resize_planes(&cam, h, w, out_h, out_w)
    };
    let max = out.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        out.iter_mut().for_each(|v| *v /= max);
    } else {
        warn!("grad-cam map is zero everywhere");
    }
    Ok(out)
}

/// Grad-CAM of `class_index` for one image `[1, C, H, W]` at the last encoder stage.
pub fn gradcam<T: Real>(
    model: &Classifier,
    params: &ParamSet<T>,
    image: &Tensor<T>,
    class_index: usize,
    resolution: Resolution,
) -> Result<Heatmap> {
    let (ih, iw) = match *image.shape() {
        [1, _, h, w] => (h, w),
        ref s => return Err(config_err!("grad-cam takes one image [1,C,H,W], got {s:?}")),
    };
    if class_index >= model.num_classes {
        return Err(config_err!(
            "class {class_index} outside {} classes",
            model.num_classes
        ));
    }
    let mut sess = Session::new(params, false);
    let x = sess.input(image.clone());
    let pyr = model.encoder.forward(&mut sess, x, None)?;
    let a = pyr.last();
    let pooled = sess.g.global_avg_pool(a)?;
    let w = sess.param("head.weight")?;
    let b = sess.param("head.bias")?;
    let logits = sess.g.linear(pooled, w, b)?;
    let mut seed = Tensor::zeros(&[1, model.num_classes]);
    seed.data_mut()[class_index] = T::one();
    let grads = sess.g.backward_with(logits, seed);
    let shape = sess.g.shape(a).to_vec();
    let (c, h, wd) = (shape[1], shape[2], shape[3]);
    let act: Vec<f64> = sess.g.value(a).data().iter().map(|v| v.as_f64()).collect();
    let grad: Vec<f64> = match grads.get(a) {
        Some(g) => g.data().iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; act.len()],
    };
    let (oh, ow) = match resolution {
        Resolution::Input => (ih, iw),
        Resolution::Native => (h, wd),
    };
    Ok(Heatmap {
        height: oh,
        width: ow,
        values: gradcam_map(&act, &grad, c, h, wd, oh, ow)?,
        image_id: String::new(),
        class_index,
        method: String::new(),
    })
}

/// Pearson correlation of two maps of equal shape.
pub fn heatmap_correlation(a: &Heatmap, b: &Heatmap) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(config_err!(
            "heatmaps differ in shape: {}x{} vs {}x{}",
            a.height,
            a.width,
            b.height,
            b.width
        ));
    }
    pearson(&a.values, &b.values)
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("correlation of a constant heatmap".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean per-image correlation between every pair of methods. `maps[m][i]` is
/// the map of method `m` for image `i`. Images where either map is constant
/// are skipped; a pair with no usable image gets NaN.
pub fn correlation_matrix(maps: &[Vec<Heatmap>]) -> Result<Vec<Vec<f64>>> {
    let n_img = maps.first().map_or(0, Vec::len);
    if maps.iter().any(|m| m.len() != n_img) {
        return Err(config_err!("every method needs a map for every image"));
    }
    let k = maps.len();
    let mut out = vec![vec![f64::NAN; k]; k];
    for i in 0..k {
        for j in i..k {
            let mut rs = Vec::new();
            for img in 0..n_img {
                match heatmap_correlation(&maps[i][img], &maps[j][img]) {
                    Ok(r) => rs.push(r),
                    Err(Error::Undefined(_)) => warn!("image {img}: constant heatmap, skipped"),
                    Err(e) => return Err(e),
                }
            }
            if !rs.is_empty() {
                let r = rs.iter().sum::<f64>() / rs.len() as f64;
                out[i][j] = r;
                out[j][i] = r;
            }
        }
    }
    Ok(out)
}

pub fn write_correlation_csv(path: &Path, methods: &[String], matrix: &[Vec<f64>]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut header = vec!["method".to_string()];
    header.extend(methods.iter().cloned());
    w.write_record(&header)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for (m, row) in methods.iter().zip(matrix) {
        let mut rec = vec![m.clone()];
        rec.extend(row.iter().map(|r| format!("{r:.6}")));
        w.write_record(&rec)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

/// Palette colour for `v` in `[0, 1]`.
pub fn viridis(v: f64) -> [u8; 3] {
    let t = v.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - i as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (VIRIDIS[i][c] * (1.0 - f) + VIRIDIS[i + 1][c] * f).round() as u8;
    }
    out
}

/// Writes `{stem}.png` (palette colours) and `{stem}.f32` (u32 height, u32
/// width, then the values as little-endian f32, all row-major).
pub fn write_heatmap(map: &Heatmap, stem: &Path) -> Result<()> {
    let png = stem.with_extension("png");
    let mut rgb = Vec::with_capacity(map.values.len() * 3);
    for &v in &map.values {
        rgb.extend_from_slice(&viridis(v));
    }
    image::save_buffer(
        &png,
        &rgb,
        map.width as u32,
        map.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Image {
        path: png.clone(),
        message: e.to_string(),
    })?;
    let raw = stem.with_extension("f32");
    let mut bytes = Vec::with_capacity(8 + 4 * map.values.len());
    bytes.extend_from_slice(&(map.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(map.width as u32).to_le_bytes());
    for &v in &map.values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(&raw).map_err(|e| Error::io(&raw, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&raw, e))
}

/// Reads a map written by [`write_heatmap`] back from its `.f32` sidecar.
pub fn read_heatmap_raw(path: &Path) -> Result<Heatmap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Validation(format!("{} is not a heatmap sidecar", path.display()));
    if bytes.len() < 8 {
        return Err(bad());
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 8 + 4 * h * w {
        return Err(bad());
    }
    let values = bytes[8..]
        .chunks(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Heatmap {
        height: h,
        width: w,
        values,
        image_id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        class_index: 0,
        method: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::downstream::attach_head;
    use crate::encoder::EncoderConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(values: Vec<f64>, h: usize, w: usize) -> Heatmap {
        Heatmap {
            height: h,
            width: w,
            values,
            image_id: "x".into(),
            class_index: 0,
            method: "m".into(),
        }
    }

    #[test]
    fn single_channel_is_proportional() {
        let act = [0.0, 1.0, 2.0, 4.0];
        let m = gradcam_map(&act, &[0.3; 4], 1, 2, 2, 2, 2).unwrap();
        assert_eq!(m, [0.0, 0.25, 0.5, 1.0]);
        let m = gradcam_map(&act, &[-0.3; 4], 1, 2, 2, 2, 2).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_channel_formula() {
        let act = [1.0, 0.0, 2.0, 1.0, 0.5, 3.0, 0.0, 1.0];
        let grad = [0.2, 0.4, 0.0, 0.2, -0.1, -0.1, -0.1, -0.1];
        // weights 0.2 and −0.1
        let raw: Vec<f64> = (0..4)
            .map(|i| f64::max(0.2 * act[i] - 0.1 * act[4 + i], 0.0))
            .collect();
        let max = raw.iter().copied().fold(0.0, f64::max);
        let m = gradcam_map(&act, &grad, 2, 2, 2, 2, 2).unwrap();
        for (a, b) in m.iter().zip(&raw) {
            assert!((a - b / max).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_cases() {
        let a: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let inv: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        assert!(
            (heatmap_correlation(&map(a.clone(), 4, 4), &map(a.clone(), 4, 4)).unwrap() - 1.0)
                .abs()
                < 1e-12
        );
        assert!(
            (heatmap_correlation(&map(a.clone(), 4, 4), &map(inv, 4, 4)).unwrap() + 1.0).abs()
                < 1e-12
        );
        assert!(matches!(
            heatmap_correlation(&map(a, 4, 4), &map(vec![0.5; 16], 4, 4)),
            Err(Error::Undefined(_))
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r1: Vec<f64> = (0..56 * 56).map(|_| rng.random()).collect();
        let r2: Vec<f64> = (0..56 * 56).map(|_| rng.random()).collect();
        assert!(
            heatmap_correlation(&map(r1, 56, 56), &map(r2, 56, 56))
                .unwrap()
                .abs()
                < 0.05
        );
    }

    #[test]
    fn scale_invariant_on_model() {
        let clf = Classifier::new(EncoderConfig::toy(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: ParamSet<f64> = attach_head(&clf, None, &mut rng).unwrap();
        let img = crate::synth::textures::<f64>(1, 32, &mut rng);
        let base = gradcam(&clf, &p, &img, 1, Resolution::Input).unwrap();
        assert_eq!((base.height, base.width), (32, 32));
        assert!(base.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mut scaled = p.clone();
        for name in ["head.weight", "head.bias"] {
            let t = scaled.get_mut(name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        }
        let other = gradcam(&clf, &scaled, &img, 1, Resolution::Input).unwrap();
        for (a, b) in base.values.iter().zip(&other.values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = map(vec![0.0, 0.5, 1.0, 0.25], 2, 2);
        write_heatmap(&m, &dir.path().join("a")).unwrap();
        let back = read_heatmap_raw(&dir.path().join("a.f32")).unwrap();
        assert_eq!(back.values, m.values);
        assert!(dir.path().join("a.png").exists());
        assert_eq!(viridis(0.0), [68, 1, 84]);
        assert_eq!(viridis(1.0), [253, 231, 37]);
    }
}
