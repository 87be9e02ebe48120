//! Writes a synthetic HU fixture, converts it into a PNG dataset with
//! manifest and statistics, and prints the result.

use ctssl::cli::{cmd_preprocess, RunConfig};
use ctssl::dataio::load_manifest;
use ctssl::synth::write_ct_fixture;

fn main() -> ctssl::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("ctssl-preprocess"));
    let raw = dir.join("raw");
    let out = dir.join("dataset");
    write_ct_fixture(&raw, 40, 64, 1)?;
    let mut cfg = RunConfig::default();
    cfg.set("preprocess.input", raw.to_str().expect("utf-8 path"))?;
    cfg.set("preprocess.window", "0,800")?;
    cfg.resolve()?;
    let report = cmd_preprocess(&cfg, &out)?;
    let manifest = load_manifest(&out.join("manifest.csv"))?;
    println!("{} images written to {}", report.written, out.display());
    for (split, n) in manifest.split_counts() {
        println!("  {split}: {n}");
    }
    println!("classes: {:?}", manifest.classes());
    println!(
        "stats:\n{}",
        std::fs::read_to_string(out.join("stats.txt"))
            .map_err(|e| ctssl::Error::Validation(e.to_string()))?
    );
    Ok(())
}
