use super::checkpoint::Checkpoint;
use super::config::{Method, RunConfig};
use crate::augment::{batch_views, AugmentConfig};
use crate::contrastive::{byol_step, moco_step, swav_step, Byol, KeyQueue, Moco, Swav};
use crate::dataio::{
    apply_window, compute_stats, hu_interval_map, load_manifest, load_split, read_gray_png,
    read_hu_pgm, read_sidecar, resize_bilinear, sidecar_path, write_gray_png, write_manifest,
    Dataset, DatasetStats, Gray8, Manifest, Record, Split,
};
use crate::downstream::{finetune, finetune_sweep, write_sweep_csv, Classifier, Splits, SweepRow};
use crate::error::{config_err, Error, Result};
use crate::explain::{
    correlation_matrix, gradcam, write_correlation_csv, write_heatmap, Heatmap, Resolution,
};
use crate::seeds::stream;
use crate::spark::{spark_pretrain_step, SparkModel};
use crate::tensor::{Optimizer, ParamSet};
use log::{info, warn};
use rand::seq::SliceRandom;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Fresh `{out}/{timestamp}-seed{seed}` directory holding `config.txt`.
pub fn run_dir(out: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let seed = cfg.seed()?;
    let mut dir = out.join(format!("{stamp}-seed{seed}"));
    let mut n = 1;
    while dir.exists() {
        dir = out.join(format!("{stamp}-seed{seed}-{n}"));
        n += 1;
    }
    create_dir(&dir)?;
    write_text(&dir.join("config.txt"), &cfg.to_text())?;
    Ok(dir)
}

/// Summary of a preprocessing run.
#[derive(Debug, Default)]
pub struct PreprocessReport {
    pub written: usize,
    pub failed: Vec<(PathBuf, String)>,
}

fn preprocess_one(
    path: &Path,
    window: Option<(f64, f64)>,
    size: usize,
) -> Result<(Gray8, String, String, Split)> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let gray = if ext == "pgm" {
        let hu = read_hu_pgm(path)?;
        match window {
            Some((level, width)) => apply_window(&hu, level, width)?,
            None => hu_interval_map(&hu),
        }
    } else {
        read_gray_png(path)?
    };
    let gray = if size > 0 {
        resize_bilinear(&gray, size, size)?
    } else {
        gray
    };
    let side = sidecar_path(path);
    let meta = if side.exists() {
        read_sidecar(&side)?
    } else {
        Default::default()
    };
    let split = match meta.split {
        Some(s) => s.parse()?,
        None => Split::Train,
    };
    Ok((
        gray,
        meta.label.unwrap_or_else(|| "unlabeled".into()),
        meta.subject_id.unwrap_or(stem),
        split,
    ))
}

/// HU PGMs and grayscale PNGs of `input` → `out/images/*.png`,
/// `out/manifest.csv` and `out/stats.txt` (train split).
pub fn cmd_preprocess(cfg: &RunConfig, out: &Path) -> Result<PreprocessReport> {
    let input = cfg.existing_path("preprocess.input")?;
    let window = match cfg.get("preprocess.window") {
        "" => None,
        w => {
            let (l, wd) = w.split_once(',').ok_or_else(|| {
                config_err!("`preprocess.window` must be `level,width`, got `{w}`")
            })?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| config_err!("`preprocess.window`: bad number `{s}`"))
            };
            Some((parse(l)?, parse(wd)?))
        }
    };
    let size: usize = cfg.parsed("preprocess.size")?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&input)
        .map_err(|e| Error::io(&input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(str::to_ascii_lowercase)
                    .as_deref(),
                Some("pgm" | "png")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        warn!("no .pgm or .png files in {}", input.display());
    }
    let images_dir = out.join("images");
    create_dir(&images_dir)?;
    let mut report = PreprocessReport::default();
    let mut records = Vec::new();
    let mut train_images = Vec::new();
    for path in &files {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let rel = PathBuf::from("images").join(format!("{stem}.png"));
        if records.iter().any(|r: &Record| r.image_path == rel) {
            report.failed.push((
                path.clone(),
                format!("another input already produced {}", rel.display()),
            ));
            continue;
        }
        match preprocess_one(path, window, size) {
            Ok((gray, label, subject_id, split)) => {
                write_gray_png(&out.join(&rel), &gray)?;
                if split == Split::Train {
                    train_images.push(gray);
                }
                records.push(Record {
                    image_path: rel,
                    label,
                    subject_id,
                    split,
                });
                report.written += 1;
            }
            Err(e) => {
                warn!("{}: {e}", path.display());
                report.failed.push((path.clone(), e.to_string()));
            }
        }
    }
    Manifest::new(records.clone(), out.to_path_buf())?;
    write_manifest(&out.join("manifest.csv"), &records)?;
    if train_images.is_empty() {
        warn!("no training images; stats.txt not written");
    } else {
        compute_stats(&train_images)?.save(&out.join("stats.txt"))?;
    }
    Ok(report)
}

fn manifest_and_stats(cfg: &RunConfig) -> Result<(Manifest, DatasetStats)> {
    let path = cfg.existing_path("data.manifest")?;
    let manifest = load_manifest(&path)?;
    let stats = match cfg.path("data.stats") {
        Some(p) => DatasetStats::load(&p)?,
        None => {
            let beside = manifest.root.join("stats.txt");
            if beside.exists() {
                DatasetStats::load(&beside)?
            } else {
                train_stats(&manifest)?
            }
        }
    };
    Ok((manifest, stats))
}

fn train_stats(manifest: &Manifest) -> Result<DatasetStats> {
    let imgs = manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| read_gray_png(&manifest.resolve(&r.image_path)))
        .collect::<Result<Vec<_>>>()?;
    compute_stats(&imgs)
}

/// Statistics of the train split, written to `out/stats.txt`.
pub fn cmd_stats(cfg: &RunConfig, out: &Path) -> Result<DatasetStats> {
    let manifest = load_manifest(&cfg.existing_path("data.manifest")?)?;
    let stats = train_stats(&manifest)?;
    create_dir(out)?;
    stats.save(&out.join("stats.txt"))?;
    for (split, n) in manifest.split_counts() {
        info!("{split}: {n} images");
    }
    Ok(stats)
}

enum Learner {
    Spark(SparkModel),
    Moco(Moco, KeyQueue<f32>, AugmentConfig),
    Swav(Swav, AugmentConfig),
    Byol(Byol, AugmentConfig),
}

const QUEUE: &str = "queue";

/// Pre-trains on the train split. Checkpoints land in `dir/checkpoints`
/// every `pretrain.checkpoint_every` epochs and after the last epoch.
/// Returns the checkpoint paths written by this call.
pub fn cmd_pretrain(cfg: &RunConfig, dir: &Path, resume: Option<&Path>) -> Result<Vec<PathBuf>> {
    let method = cfg.method()?;
    let seed = cfg.seed()?;
    let size: usize = cfg.parsed("data.size")?;
    let batch: usize = cfg.parsed("pretrain.batch")?;
    let epochs: u64 = cfg.parsed("pretrain.epochs")?;
    let every: u64 = cfg.parsed("pretrain.checkpoint_every")?;
    if batch < 2 || every == 0 {
        return Err(config_err!(
            "`pretrain.batch` must be ≥ 2 and `pretrain.checkpoint_every` ≥ 1"
        ));
    }
    let (manifest, stats) = manifest_and_stats(cfg)?;
    let data = load_split(&manifest, Split::Train, size, &stats)?;
    if data.len() < 2 {
        return Err(Error::Validation(
            "pre-training needs at least 2 training images".into(),
        ));
    }
    let steps_per_epoch = data.len().div_ceil(batch) as u64;
    let total_steps = cfg.pretrain_steps(data.len())?;
    let mut init = stream(seed, "pretrain/init");
    let (mut learner, mut params): (Learner, ParamSet<f32>) = match method {
        Method::Spark => {
            let m = SparkModel::new(cfg.spark()?)?;
            let p = m.init_params(&mut init)?;
            (Learner::Spark(m), p)
        }
        Method::Moco => {
            let m = Moco::new(cfg.moco()?)?;
            let p = m.init_params(&mut init)?;
            let q = m.new_queue(&mut stream(seed, "pretrain/queue"))?;
            (Learner::Moco(m, q, AugmentConfig::two_view(size)), p)
        }
        Method::Swav => {
            let m = Swav::new(cfg.swav()?)?;
            let p = m.init_params(&mut init)?;
            (
                Learner::Swav(
                    m,
                    AugmentConfig::multi_crop(size, cfg.parsed("swav.small_crop")?),
                ),
                p,
            )
        }
        Method::Byol => {
            let m = Byol::new(cfg.byol()?)?;
            let p = m.init_params(&mut init)?;
            (Learner::Byol(m, AugmentConfig::two_view(size)), p)
        }
        Method::None => return Err(config_err!("`method = none` has nothing to pre-train")),
    };
    let mut opt = Optimizer::new(cfg.scheduled_optimizer(steps_per_epoch)?)?;
    let (mut start, mut step) = (1, 0u64);
    if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        if ck.method != method.to_string() {
            return Err(config_err!(
                "checkpoint {} was written by `{}`, config asks for `{method}`",
                path.display(),
                ck.method
            ));
        }
        for p in params.iter().map(|p| p.name.clone()).collect::<Vec<_>>() {
            let v = ck.params.get(&p).ok_or_else(|| {
                Error::Checkpoint(format!("tensor `{p}` missing from {}", path.display()))
            })?;
            params.set(&p, v.clone())?;
        }
        opt.import_state(ck.optimizer_steps, ck.optimizer.clone())?;
        if let Learner::Moco(_, q, _) = &mut learner {
            let keys = ck
                .extra(QUEUE)
                .ok_or_else(|| Error::Checkpoint("MoCo checkpoint lacks its key queue".into()))?;
            *q = KeyQueue::from_keys(q.capacity(), keys)?;
        }
        start = ck.epoch + 1;
        step = ck.step;
        info!("resuming {method} from epoch {}", ck.epoch);
    }

    let ck_dir = dir.join("checkpoints");
    create_dir(&ck_dir)?;
    let loss_path = dir.join("losses.csv");
    let mut losses = if resume.is_some() && loss_path.exists() {
        std::fs::read_to_string(&loss_path).map_err(|e| Error::io(&loss_path, e))?
    } else {
        "epoch,step,loss\n".to_string()
    };
    let mut written = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in start..=epochs {
        let mut rng = stream(seed, &format!("pretrain/epoch/{epoch}"));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for idx in order.chunks(batch) {
            if idx.len() < 2 {
                continue;
            }
            let images = data.subset(idx).images;
            let loss = match &mut learner {
                Learner::Spark(m) => {
                    spark_pretrain_step(m, &mut params, &mut opt, &images, &mut rng)?
                }
                Learner::Moco(m, q, aug) => {
                    let v = batch_views(&images, aug, &mut rng)?;
                    moco_step(m, &mut params, q, &mut opt, &v[0], &v[1])?
                }
                Learner::Swav(m, aug) => {
                    let v = batch_views(&images, aug, &mut rng)?;
                    swav_step(m, &mut params, &mut opt, &v, step)?
                }
                Learner::Byol(m, aug) => {
                    let v = batch_views(&images, aug, &mut rng)?;
                    byol_step(m, &mut params, &mut opt, [&v[0], &v[1]], step, total_steps)?
                }
            };
            step += 1;
            writeln!(losses, "{epoch},{step},{loss}").expect("string write");
        }
        write_text(&loss_path, &losses)?;
        info!("{method} epoch {epoch}/{epochs} done");
        if epoch % every == 0 || epoch == epochs {
            let (opt_steps, opt_state) = opt.export_state();
            let mut ck = Checkpoint::new(&method.to_string(), params.clone());
            ck.epoch = epoch;
            ck.step = step;
            ck.config = cfg.to_text();
            ck.optimizer_steps = opt_steps;
            ck.optimizer = opt_state;
            if let Learner::Moco(_, q, _) = &learner {
                ck.extra.push((QUEUE.into(), q.keys()));
            }
            let path = ck_dir.join(format!("epoch_{epoch:04}.ckpt"));
            ck.save(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn splits(cfg: &RunConfig) -> Result<(Manifest, Splits)> {
    let (manifest, stats) = manifest_and_stats(cfg)?;
    let size: usize = cfg.parsed("data.size")?;
    let train = load_split(&manifest, Split::Train, size, &stats)?;
    let val = load_split(&manifest, Split::Val, size, &stats)?;
    let test = load_split(&manifest, Split::Test, size, &stats)?;
    if test.is_empty() {
        return Err(Error::Validation("the manifest has no test split".into()));
    }
    let val = (!val.is_empty()).then_some(val);
    Ok((manifest, Splits { train, val, test }))
}

fn load_encoder(path: Option<&Path>) -> Result<Option<ParamSet<f32>>> {
    match path {
        None => Ok(None),
        Some(p) if !p.exists() => Err(config_err!("checkpoint {} does not exist", p.display())),
        Some(p) => Ok(Some(Checkpoint::load(p)?.params)),
    }
}

/// Repeated two-phase fine-tuning; writes `metrics.csv`, `runs.csv`,
/// `history.csv` and `model_best.ckpt` into `dir`.
pub fn cmd_finetune(cfg: &RunConfig, dir: &Path) -> Result<SweepRow> {
    let (manifest, splits) = splits(cfg)?;
    let ft = cfg.finetune()?;
    let pretrained = load_encoder(cfg.path("finetune.checkpoint").as_deref())?;
    let clf = Classifier::new(cfg.encoder()?, manifest.classes().len())?;
    let report = finetune(&clf, pretrained.as_ref(), &splits, &ft)?;
    let name = if pretrained.is_some() {
        cfg.get("method")
    } else {
        "none"
    };
    let row = SweepRow::new(name, 1.0, splits.train.len(), &report.summary);
    write_sweep_csv(&dir.join("metrics.csv"), std::slice::from_ref(&row))?;
    let mut runs = String::from("repeat,seed,best_epoch,val_f1,accuracy,auc,f1\n");
    let mut hist = String::from("repeat,epoch,phase,train_loss,val_accuracy,val_auc,val_f1\n");
    for (r, run) in report.runs.iter().enumerate() {
        writeln!(
            runs,
            "{r},{},{},{},{},{},{}",
            run.seed, run.best_epoch, run.val.f1, run.test.accuracy, run.test.auc, run.test.f1
        )
        .expect("string write");
        for e in &run.history {
            writeln!(
                hist,
                "{r},{},{:?},{},{},{},{}",
                e.epoch, e.phase, e.train_loss, e.val.accuracy, e.val.auc, e.val.f1
            )
            .expect("string write");
        }
    }
    write_text(&dir.join("runs.csv"), &runs)?;
    write_text(&dir.join("history.csv"), &hist)?;
    let best = report.best();
    let mut ck = Checkpoint::new("classifier", best.params.clone());
    ck.epoch = best.best_epoch as u64;
    ck.config = cfg.to_text();
    ck.save(&dir.join("model_best.ckpt"))?;
    Ok(row)
}

/// Reduction sweep over `sweep.methods`; writes `sweep.csv` into `dir`.
pub fn cmd_sweep(cfg: &RunConfig, dir: &Path) -> Result<Vec<SweepRow>> {
    let named = cfg.named_paths("sweep.methods")?;
    if named.is_empty() {
        return Err(config_err!("`sweep.methods` lists no methods"));
    }
    let mut methods = Vec::new();
    for (name, path) in named {
        methods.push((name, load_encoder(path.as_deref())?));
    }
    let (manifest, splits) = splits(cfg)?;
    let clf = Classifier::new(cfg.encoder()?, manifest.classes().len())?;
    let rows = finetune_sweep(&clf, &methods, &splits, &cfg.plan()?, &cfg.finetune()?)?;
    write_sweep_csv(&dir.join("sweep.csv"), &rows)?;
    Ok(rows)
}

/// Grad-CAM maps of the first `gradcam.limit` images of `gradcam.split` for
/// every classifier checkpoint in `gradcam.checkpoints`, plus their
/// correlation matrix. Returns the number of maps written.
pub fn cmd_gradcam(cfg: &RunConfig, dir: &Path) -> Result<usize> {
    let named = cfg.named_paths("gradcam.checkpoints")?;
    if named.is_empty() {
        return Err(config_err!("`gradcam.checkpoints` lists no checkpoints"));
    }
    let split: Split = cfg.get("gradcam.split").parse()?;
    let limit: usize = cfg.parsed("gradcam.limit")?;
    let resolution = match cfg.get("gradcam.resolution") {
        "input" => Resolution::Input,
        "native" => Resolution::Native,
        other => {
            return Err(config_err!(
                "`gradcam.resolution` must be input or native, got `{other}`"
            ))
        }
    };
    let (manifest, stats) = manifest_and_stats(cfg)?;
    let data = load_split(&manifest, split, cfg.parsed("data.size")?, &stats)?;
    let ids: Vec<String> = manifest
        .records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            r.image_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .take(limit)
        .collect();
    let images = Dataset::subset(&data, &(0..ids.len()).collect::<Vec<_>>());
    let encoder = cfg.encoder()?;
    let mut maps: Vec<Vec<Heatmap>> = Vec::new();
    let mut names = Vec::new();
    for (name, path) in &named {
        let path = path
            .as_ref()
            .ok_or_else(|| config_err!("gradcam needs a checkpoint for `{name}`"))?;
        if !path.exists() {
            return Err(config_err!("checkpoint {} does not exist", path.display()));
        }
        let params = Checkpoint::load(path)?.params;
        let k = params.get("head.weight").map(|w| w.dim(0)).ok_or_else(|| {
            Error::Checkpoint(format!("{} holds no classifier head", path.display()))
        })?;
        let clf = Classifier::new(encoder.clone(), k)?;
        let out = dir.join("heatmaps").join(name);
        create_dir(&out)?;
        let mut per = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            let img = images.subset(&[i]).images;
            let mut map = gradcam(&clf, &params, &img, images.labels[i].min(k - 1), resolution)?;
            map.image_id = id.clone();
            map.method = name.clone();
            write_heatmap(&map, &out.join(id))?;
            per.push(map);
        }
        maps.push(per);
        names.push(name.clone());
    }
    write_correlation_csv(
        &dir.join("correlation.csv"),
        &names,
        &correlation_matrix(&maps)?,
    )?;
    Ok(maps.iter().map(Vec::len).sum())
}
