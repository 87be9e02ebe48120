//! Balanced soft assignment of a batch to prototypes and the swapped
//! prediction loss on top of it.

use ctssl::contrastive::{cluster_scores, sinkhorn_codes, swav_swapped_loss};
use ctssl::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn unit_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut data: Vec<f64> = (0..rows * dim)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    for r in data.chunks_mut(dim) {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= n);
    }
    Tensor::new(&[rows, dim], data).unwrap()
}

fn main() -> ctssl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (batch, k) = (32, 10);
    let prototypes = unit_rows(k, 16, &mut rng);
    let a = unit_rows(batch, 16, &mut rng);
    let b = unit_rows(batch, 16, &mut rng);
    let (sa, sb) = (
        cluster_scores(&a, &prototypes, 1.0)?,
        cluster_scores(&b, &prototypes, 1.0)?,
    );
    let (qa, qb) = (sinkhorn_codes(&sa, 0.05, 3)?, sinkhorn_codes(&sb, 0.05, 3)?);
    let usage: Vec<String> = (0..k)
        .map(|c| {
            format!(
                "{:.3}",
                (0..batch).map(|r| qa.data()[r * k + c]).sum::<f64>() / batch as f64
            )
        })
        .collect();
    println!(
        "prototype usage (target {:.3}): {}",
        1.0 / k as f64,
        usage.join(" ")
    );
    let la = cluster_scores(&a, &prototypes, 0.1)?;
    let lb = cluster_scores(&b, &prototypes, 0.1)?;
    println!(
        "swapped loss {:.4} (uniform {:.4})",
        swav_swapped_loss(&la, &lb, &qa, &qb)?,
        2.0 * (k as f64).ln()
    );
    Ok(())
}
