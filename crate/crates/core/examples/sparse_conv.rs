//! Submanifold sparse convolution keeps the active set fixed, and the masked
//! encoder matches the dense one when every patch is kept.

use ctssl::encoder::{
    build_encoder, submanifold_sparse_conv2d, EncoderConfig, PatchMask, SparseFeatureMap,
};
use ctssl::tensor::{Mask, Session, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ctssl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bits: Vec<bool> = (0..64).map(|_| rng.random_bool(0.4)).collect();
    let active = Mask::new(1, 8, 8, bits)?;
    let x = Tensor::new(
        &[1, 2, 8, 8],
        (0..128).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let w = Tensor::new(
        &[3, 2, 3, 3],
        (0..54).map(|_| rng.random_range(-0.5..0.5)).collect(),
    )?;
    let y = submanifold_sparse_conv2d(&SparseFeatureMap::new(x, active.clone())?, &w, 1)?;
    for row in active.image(0).chunks(8) {
        println!(
            "{}",
            row.iter()
                .map(|&a| if a { '#' } else { '.' })
                .collect::<String>()
        );
    }
    println!("active set unchanged: {}", y.active() == &active);

    let cfg = EncoderConfig::toy();
    let (enc, params) = build_encoder::<f64>(&cfg, "encoder.", &mut rng)?;
    let img = Tensor::new(
        &[1, 1, 32, 32],
        (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let levels = |masks: Option<&[PatchMask]>| -> ctssl::Result<Vec<f64>> {
        let mut s = Session::new(&params, false);
        let x = s.input(img.clone());
        let p = enc.forward(&mut s, x, masks)?;
        Ok(s.g.value(p.last()).data().to_vec())
    };
    let full = [PatchMask::all_kept(32, 32, 32)?];
    let diff = levels(None)?
        .iter()
        .zip(levels(Some(&full))?)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("max |dense − all-kept sparse| = {diff:e}");
    Ok(())
}
