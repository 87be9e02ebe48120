//! Contrastive pre-training of a toy encoder on two-cluster synthetic data.
//!
//! `cargo run --release --example contrastive_pretrain -- [moco|swav|byol] [steps]`

use ctssl::augment::{batch_views, AugmentConfig};
use ctssl::contrastive::{
    byol_step, moco_step, swav_step, Byol, ByolConfig, Moco, MocoConfig, Swav, SwavConfig,
};
use ctssl::synth::two_orientations;
use ctssl::tensor::{Optimizer, OptimizerConfig, OptimizerKind, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sample(images: &Tensor<f32>, batch: usize, step: usize) -> ctssl::Result<Tensor<f32>> {
    let n = images.dim(0);
    let per = images.len() / n;
    let mut out = Vec::with_capacity(batch * per);
    for i in 0..batch {
        let j = (step * batch + i) % n;
        out.extend_from_slice(&images.data()[j * per..(j + 1) * per]);
    }
    Tensor::new(&[batch, 1, images.dim(2), images.dim(3)], out)
}

fn main() -> ctssl::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let method = args.get(1).map(String::as_str).unwrap_or("moco");
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (images, _) = two_orientations::<f32>(64, 64, 0.3, &mut rng);
    let batch = 16;
    let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Adam, 1e-3))?;
    match method {
        "moco" => {
            let model = Moco::new(MocoConfig::toy())?;
            let mut params = model.init_params::<f32>(&mut rng)?;
            let mut queue = model.new_queue(&mut rng)?;
            let baseline = ((queue.len() + 1) as f64).ln();
            let aug = AugmentConfig::two_view(64);
            for step in 0..steps {
                let v = batch_views(&sample(&images, batch, step)?, &aug, &mut rng)?;
                let loss = moco_step(&model, &mut params, &mut queue, &mut opt, &v[0], &v[1])?;
                println!("step {step:>3}  loss {loss:.4}  baseline {baseline:.4}");
            }
        }
        "swav" => {
            let model = Swav::new(SwavConfig::toy())?;
            let mut params = model.init_params::<f32>(&mut rng)?;
            let baseline = 2.0 * (model.config.prototypes as f64).ln();
            let aug = AugmentConfig::multi_crop(64, 32);
            for step in 0..steps {
                let v = batch_views(&sample(&images, batch, step)?, &aug, &mut rng)?;
                let loss = swav_step(&model, &mut params, &mut opt, &v, step as u64)?;
                println!("step {step:>3}  loss {loss:.4}  baseline {baseline:.4}");
            }
        }
        "byol" => {
            let model = Byol::new(ByolConfig::toy())?;
            let mut params = model.init_params::<f32>(&mut rng)?;
            let aug = AugmentConfig::two_view(64);
            for step in 0..steps {
                let v = batch_views(&sample(&images, batch, step)?, &aug, &mut rng)?;
                let loss = byol_step(
                    &model,
                    &mut params,
                    &mut opt,
                    [&v[0], &v[1]],
                    step as u64,
                    steps as u64,
                )?;
                println!("step {step:>3}  loss {loss:.4}  baseline 4.0000");
            }
        }
        other => eprintln!("unknown method `{other}` (moco, swav, byol)"),
    }
    Ok(())
}
