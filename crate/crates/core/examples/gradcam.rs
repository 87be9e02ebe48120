//! Grad-CAM maps of a briefly trained classifier, written as viridis PNGs with
//! raw float sidecars, plus the correlation between two checkpoints.

use ctssl::dataio::Dataset;
use ctssl::downstream::{finetune_run, Classifier, FinetuneConfig, Splits};
use ctssl::encoder::EncoderConfig;
use ctssl::explain::{correlation_matrix, gradcam, write_heatmap, Resolution};
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
        train: set(120, 1),
        val: Some(set(20, 2)),
        test: set(4, 3),
    };
    let clf = Classifier::new(EncoderConfig::toy(), 2)?;
    let cfg = FinetuneConfig {
        optimizer: OptimizerConfig::adam(3e-3),
        batch_size: 16,
        head_epochs: 1,
        epochs: 3,
        ..FinetuneConfig::default()
    };
    let out = std::env::temp_dir().join("ctssl-gradcam");
    std::fs::create_dir_all(&out).map_err(|e| ctssl::Error::io(&out, e))?;
    let mut per_seed = Vec::new();
    for seed in [1, 2] {
        let run = finetune_run(&clf, None, &splits, &cfg, seed, &mut |_, _| {})?;
        let mut maps = Vec::new();
        for i in 0..splits.test.len() {
            let image = splits.test.subset(&[i]).images;
            let mut map = gradcam(
                &clf,
                &run.params,
                &image,
                splits.test.labels[i],
                Resolution::Input,
            )?;
            map.image_id = format!("img{i}");
            map.method = format!("seed{seed}");
            write_heatmap(&map, &out.join(format!("seed{seed}_img{i}")))?;
            maps.push(map);
        }
        per_seed.push(maps);
    }
    let corr = correlation_matrix(&per_seed)?;
    println!("heatmaps in {}", out.display());
    println!("correlation between seeds: {:.3}", corr[0][1]);
    Ok(())
}
