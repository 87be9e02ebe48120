//! Two-phase fine-tuning of a randomly initialised toy encoder on synthetic
//! blob-vs-stripe slices.

use ctssl::dataio::Dataset;
use ctssl::downstream::{finetune_run, Classifier, FinetuneConfig, Phase, Splits};
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
        train: set(200, 1),
        val: Some(set(40, 2)),
        test: set(100, 3),
    };
    let clf = Classifier::new(EncoderConfig::toy(), 2)?;
    let cfg = FinetuneConfig {
        optimizer: OptimizerConfig::adam(3e-3),
        batch_size: 16,
        head_epochs: 1,
        epochs: 5,
        ..FinetuneConfig::default()
    };
    let run = finetune_run(&clf, None, &splits, &cfg, 7, &mut |_, _| {})?;
    for e in &run.history {
        let phase = if e.phase == Phase::Head {
            "head"
        } else {
            "full"
        };
        println!(
            "epoch {} [{phase}] loss {:.4} val f1 {:.3}",
            e.epoch, e.train_loss, e.val.f1
        );
    }
    println!(
        "best epoch {}: test acc {:.3} auc {:.3} f1 {:.3}",
        run.best_epoch, run.test.accuracy, run.test.auc, run.test.f1
    );
    Ok(())
}
