//! Masked-autoencoder pre-training of a toy encoder on synthetic textures.

use ctssl::spark::{spark_pretrain_step, SparkConfig, SparkModel};
use ctssl::synth::textures;
use ctssl::tensor::{Optimizer, OptimizerConfig, OptimizerKind, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ctssl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let images = textures::<f32>(64, 64, &mut rng);
    let model = SparkModel::new(SparkConfig::toy())?;
    let mut params = model.init_params::<f32>(&mut rng)?;
    let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Adam, 2e-3))?;
    let batch = 16;
    let per_image = 64 * 64;
    for step in 0..50 {
        let start = (step * batch) % 64;
        let x = Tensor::new(
            &[batch, 1, 64, 64],
            images.data()[start * per_image..(start + batch) * per_image].to_vec(),
        )?;
        let loss = spark_pretrain_step(&model, &mut params, &mut opt, &x, &mut rng)?;
        println!("step {step:>2}  loss {loss:.4}");
    }
    Ok(())
}
