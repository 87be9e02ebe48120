//! Data-reduction sweep: scratch training at shrinking train fractions,
//! stopping once no method reaches the F1 threshold.

use ctssl::dataio::Dataset;
use ctssl::downstream::{finetune_sweep, Classifier, FinetuneConfig, ReductionPlan, Splits};
use ctssl::encoder::EncoderConfig;
use ctssl::synth::blobs_vs_stripes;
use ctssl::tensor::OptimizerConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn set(n: usize, seed: u64) -> Dataset {
    let (images, labels) = blobs_vs_stripes(n, 32, 0.3, &mut ChaCha8Rng::seed_from_u64(seed));
    Dataset {
        images,
        labels,
        classes: vec!["blobs".into(), "stripes".into()],
    }
}

fn main() -> ctssl::Result<()> {
    let splits = Splits {
        train: set(160, 1),
        val: None,
        test: set(80, 3),
    };
    let clf = Classifier::new(EncoderConfig::toy(), 2)?;
    let cfg = FinetuneConfig {
        optimizer: OptimizerConfig::adam(3e-3),
        batch_size: 16,
        head_epochs: 1,
        epochs: 4,
        repeats: 2,
        ..FinetuneConfig::default()
    };
    let plan = ReductionPlan::new(vec![1.0, 0.5, 0.25, 0.1], 0.7)?;
    println!("train sizes {:?}", plan.sizes(splits.train.len())?);
    let rows = finetune_sweep(&clf, &[("scratch".into(), None)], &splits, &plan, &cfg)?;
    for r in &rows {
        println!(
            "{:>8} {:.2} n={:<4} f1 {:.3} ± {:.3}  auc {:.3} ± {:.3}",
            r.method, r.fraction, r.size, r.f1_mean, r.f1_std, r.auc_mean, r.auc_std
        );
    }
    Ok(())
}
