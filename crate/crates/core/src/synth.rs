//! Synthetic image generators for smoke runs, examples and tests.

use crate::tensor::{Real, Tensor};
use rand::Rng;
use std::f64::consts::PI;

/// `n` single-channel `size × size` gratings with random orientation,
/// frequency and phase, standardised to zero mean and unit variance.
pub fn textures<T: Real>(n: usize, size: usize, rng: &mut impl Rng) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * size * size);
    for _ in 0..n {
        let theta = rng.random_range(0.0..PI);
        let freq = rng.random_range(2.0..6.0) / size as f64;
        let phase = rng.random_range(0.0..2.0 * PI);
        let (c, s) = (theta.cos(), theta.sin());
        for y in 0..size {
            for x in 0..size {
                let u = c * x as f64 + s * y as f64;
                data.push(T::lit(
                    (2.0 * PI * freq * u + phase).sin() * std::f64::consts::SQRT_2,
                ));
            }
        }
    }
    Tensor::new(&[n, 1, size, size], data).expect("shape")
}

/// Two-class images that stay separable under crops and horizontal flips:
/// class 0 holds vertical stripes, class 1 horizontal ones, each with random
/// frequency and phase plus uniform noise of amplitude `noise`.
/// Returns `(images, labels)` with alternating labels.
pub fn two_orientations<T: Real>(
    n: usize,
    size: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> (Tensor<T>, Vec<usize>) {
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let freq = rng.random_range(3.0..5.0) / size as f64;
        let phase = rng.random_range(0.0..2.0 * PI);
        for y in 0..size {
            for x in 0..size {
                let u = if label == 0 { x } else { y } as f64;
                let v = (2.0 * PI * freq * u + phase).sin() * std::f64::consts::SQRT_2;
                data.push(T::lit(v + noise * rng.random_range(-1.0..1.0)));
            }
        }
        labels.push(label);
    }
    (
        Tensor::new(&[n, 1, size, size], data).expect("shape"),
        labels,
    )
}

/// Two-class images: class 0 holds one to three Gaussian blobs on a flat
/// background, class 1 a stripe pattern of random orientation. Both carry
/// uniform noise of amplitude `noise`. Labels alternate.
pub fn blobs_vs_stripes<T: Real>(
    n: usize,
    size: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> (Tensor<T>, Vec<usize>) {
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    let s = size as f64;
    for i in 0..n {
        let label = i % 2;
        let mut img = vec![0.0f64; size * size];
        if label == 0 {
            for _ in 0..rng.random_range(1..=3) {
                let (cy, cx) = (
                    rng.random_range(0.2..0.8) * s,
                    rng.random_range(0.2..0.8) * s,
                );
                let sigma = rng.random_range(0.06..0.12) * s;
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        img[y * size + x] += 2.0 * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
        } else {
            let theta = rng.random_range(0.0..PI);
            let freq = rng.random_range(3.0..6.0) / s;
            let phase = rng.random_range(0.0..2.0 * PI);
            let (c, sn) = (theta.cos(), theta.sin());
            for y in 0..size {
                for x in 0..size {
                    img[y * size + x] =
                        (2.0 * PI * freq * (c * x as f64 + sn * y as f64) + phase).sin();
                }
            }
        }
        data.extend(
            img.into_iter()
                .map(|v| T::lit(v + noise * rng.random_range(-1.0..1.0))),
        );
        labels.push(label);
    }
    (
        Tensor::new(&[n, 1, size, size], data).expect("shape"),
        labels,
    )
}

/// Writes `n` blob/stripe slices as HU PGMs with sidecars into `dir`: labels
/// `blobs`/`stripes`, one subject per slice, splits cycling through five
/// slots as train, train, train, val, test.
pub fn write_ct_fixture(
    dir: &std::path::Path,
    n: usize,
    size: usize,
    seed: u64,
) -> crate::Result<()> {
    use crate::dataio::{sidecar_path, write_hu_pgm, HuSlice};
    use rand::SeedableRng;
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (images, labels) = blobs_vs_stripes::<f64>(n, size, 0.2, &mut rng);
    for (i, img) in images.data().chunks(size * size).enumerate() {
        let id = format!("slice{i:03}");
        let slice = HuSlice {
            height: size,
            width: size,
            values: img
                .iter()
                .map(|v| (-200.0 + 400.0 * v).round() as i32)
                .collect(),
            source_id: id.clone(),
            subject_id: format!("P{i:03}"),
        };
        let path = dir.join(format!("{id}.pgm"));
        write_hu_pgm(&path, &slice)?;
        let split = ["train", "train", "train", "val", "test"][(i / 2) % 5];
        let label = ["blobs", "stripes"][labels[i]];
        let side = sidecar_path(&path);
        let text = format!("subject_id = P{i:03}\nlabel = {label}\nsplit = {split}\n");
        std::fs::write(&side, text).map_err(|e| crate::Error::io(&side, e))?;
    }
    Ok(())
}
