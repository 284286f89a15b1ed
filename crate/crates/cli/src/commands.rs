use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};

use sdn_core::assembly::PartCatalog;
use sdn_core::dataset::{build_suites, load_all, load_pair, standard_suite_configs, Manifest};
use sdn_core::eval::{emit_report, evaluate, Metric, StrataConfig};
use sdn_core::par::Execution;
use sdn_core::render::AugmentConfig;
use sdn_core::RgbImage;
use sdn_nn::train::{train, TrainOptions};
use sdn_nn::{checkpoint, gradcheck, ArchConfig, Model, TrainConfig};

use crate::config::{Command, RunConfig};
use crate::oracle;

/// Splits generated with the training distribution; gen overrides apply to these.
const TRAINING_SPLITS: [&str; 3] = ["train", "val", "ablation_train"];

pub fn execution(cfg: &RunConfig) -> Execution {
    if cfg.jobs == Some(1) {
        Execution::Sequential
    } else {
        Execution::available()
    }
}

pub fn load_catalog(cfg: &RunConfig) -> Result<PartCatalog> {
    match &cfg.catalog {
        Some(p) => {
            if !p.is_file() {
                bail!("catalog file not found: {}", p.display());
            }
            PartCatalog::load(p).with_context(|| format!("loading catalog {}", p.display()))
        }
        None => Ok(PartCatalog::default_catalog()),
    }
}

fn load_manifest(root: &Path, split: &str) -> Result<Manifest> {
    let dir = root.join(split);
    if !dir.join("manifest.jsonl").is_file() {
        bail!("no dataset split at {} (run `sdn gen` first)", dir.display());
    }
    Manifest::load(&dir).with_context(|| format!("loading split {}", dir.display()))
}

fn require_checkpoint(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("checkpoint not found: {}", path.display());
    }
    Ok(())
}

pub fn dispatch(command: &Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Gen(_) => gen(cfg),
        Command::Train(_) => train_cmd(cfg),
        Command::Eval(_) => eval_cmd(cfg),
        Command::Attn(_) => attn_cmd(cfg),
        Command::Gradcheck => gradcheck_cmd(cfg),
        Command::Oracle => oracle_cmd(cfg),
    }
}

pub fn gen(cfg: &RunConfig) -> Result<()> {
    if cfg.out.is_file() {
        bail!("output path is a file: {}", cfg.out.display());
    }
    let catalog = load_catalog(cfg)?;
    let mut configs = standard_suite_configs(&catalog, cfg.scale, cfg.seed)?;
    for c in configs.iter_mut().filter(|c| TRAINING_SPLITS.contains(&c.name.as_str())) {
        if let Some(v) = cfg.max_nqd {
            c.max_nqd = v;
        }
        if let Some(v) = cfg.diff_min {
            c.d_min = v;
        }
        if let Some(v) = cfg.diff_max {
            c.d_max = v;
        }
    }
    for c in &configs {
        c.validate(&catalog)?;
    }
    let start = Instant::now();
    let manifests = build_suites(&catalog, &cfg.out, &configs, execution(cfg))?;
    for m in &manifests {
        println!("{:<24} {:>6} pairs  {}", m.dir.file_name().unwrap_or_default().to_string_lossy(), m.len(), m.dir.display());
    }
    println!("generated {} splits in {:.1}s", manifests.len(), start.elapsed().as_secs_f64());
    Ok(())
}

pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let tc = TrainConfig {
        epochs: cfg.epochs.unwrap_or(d.epochs),
        batch_size: cfg.batch_size.unwrap_or(d.batch_size),
        warmup_epochs: cfg.warmup_epochs.unwrap_or(d.warmup_epochs),
        peak_lr: cfg.peak_lr.unwrap_or(d.peak_lr),
        seed: cfg.seed,
        augment: if cfg.augment { d.augment } else { AugmentConfig::NONE },
        ..d
    };
    tc.validate()?;
    Ok(tc)
}

pub fn arch_config(cfg: &RunConfig) -> Result<ArchConfig> {
    let mut arch = ArchConfig::desk(cfg.mechanism);
    if let Some(w) = &cfg.windows {
        arch.attention.windows = w.clone();
    }
    arch.validate()?;
    Ok(arch)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let split = cfg.split.as_deref().unwrap_or("train");
    let train_m = load_manifest(&cfg.out, split)?;
    let val_m = load_manifest(&cfg.out, &cfg.val_split)?;
    let tc = train_config(cfg)?;
    let arch = arch_config(cfg)?;
    let exec = execution(cfg);
    let train_set = load_all(&train_m, exec)?;
    let val_set = load_all(&val_m, exec)?;
    let model = Model::<f32>::new(arch, cfg.seed)?;
    println!(
        "training {} ({} params) on {} pairs, validating on {}",
        cfg.mechanism.as_str(),
        model.param_count(),
        train_set.len(),
        val_set.len()
    );
    let last_path = with_suffix(&cfg.checkpoint, ".last.ckpt");
    let log_path = with_suffix(&cfg.checkpoint, ".log.jsonl");
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut log_file = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut write_err = None;
    let opts = TrainOptions {
        exec,
        best_path: Some(cfg.checkpoint.clone()),
        last_path: Some(last_path.clone()),
        on_epoch: Some(Box::new(|e| {
            println!(
                "epoch {:>3}  loss {:.4}  val mean IoU {:.4}  median {:.4}  lr {:.2e}  {:.1}s",
                e.epoch, e.train_loss, e.val_mean_iou, e.val_median_iou, e.lr, e.seconds
            );
            let line = serde_json::to_string(e).expect("epoch log serializes");
            if let Err(err) = writeln!(log_file, "{line}") {
                write_err.get_or_insert(err);
            }
        })),
    };
    let out = train(model, &train_set, &val_set, &tc, opts)?;
    if let Some(err) = write_err {
        return Err(err).with_context(|| format!("writing {}", log_path.display()));
    }
    println!("best epoch {}; checkpoints {} and {}", out.best_epoch, cfg.checkpoint.display(), last_path.display());
    Ok(())
}

pub fn report_dir(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.report.clone().unwrap_or_else(|| cfg.out.join("reports").join(split).join(cfg.mechanism.as_str()))
}

fn eval_cmd(cfg: &RunConfig) -> Result<()> {
    require_checkpoint(&cfg.checkpoint)?;
    let split = cfg.split.as_deref().unwrap_or("test_seen_pose");
    let manifest = load_manifest(&cfg.out, split)?;
    let ck = checkpoint::load::<f32>(&cfg.checkpoint).with_context(|| format!("loading {}", cfg.checkpoint.display()))?;
    let report = evaluate(&ck.model, &manifest, &StrataConfig::default(), cfg.panels, execution(cfg))?;
    let dir = report_dir(cfg, split);
    let files = emit_report(&report, &dir)?;
    println!("{} on {split}: {} pairs", ck.model.arch.attention.mechanism.as_str(), report.rows.len());
    for a in report.aggregates.iter().filter(|a| a.metric == Metric::Iou && !a.stratum.contains('|')) {
        match a.summary {
            Some(s) => println!("  {:<14} n={:<5} median {:.4}  mean {:.4}", a.stratum, a.count, s.median, s.mean),
            None => println!("  {:<14} n=0", a.stratum),
        }
    }
    println!("report written to {}", files.rows.parent().unwrap_or(&dir).display());
    Ok(())
}

/// Sample image tinted red by the heatmap, next to the anchor with the
/// query marked.
pub fn attention_overlay(anchor: &RgbImage, sample: &RgbImage, heatmap: &[f64], query: (usize, usize)) -> RgbImage {
    let (w, h) = (anchor.width, anchor.height);
    let mut out = RgbImage::new(2 * w, h);
    for y in 0..h {
        for x in 0..w {
            let mut a = anchor.get(x, y);
            if x.abs_diff(query.0) <= 1 && y.abs_diff(query.1) <= 1 {
                a = [255, 0, 0];
            }
            out.set(x, y, a);
            let s = sample.get(x, y);
            let t = heatmap[y * w + x];
            let mix = |c: u8, target: f64| ((1.0 - t) * c as f64 * 0.6 + t * target).round().clamp(0.0, 255.0) as u8;
            out.set(w + x, y, [mix(s[0], 255.0), mix(s[1], 0.0), mix(s[2], 0.0)]);
        }
    }
    out
}

fn attn_cmd(cfg: &RunConfig) -> Result<()> {
    require_checkpoint(&cfg.checkpoint)?;
    let split = cfg.split.as_deref().unwrap_or("test_seen_pose");
    let manifest = load_manifest(&cfg.out, split)?;
    let pair_id = cfg.pair.unwrap_or(0);
    let rec = load_pair(&manifest, pair_id)?;
    let ck = checkpoint::load::<f32>(&cfg.checkpoint).with_context(|| format!("loading {}", cfg.checkpoint.display()))?;
    let n = ck.model.arch.input_size;
    let q = cfg.query.map(|q| (q.x, q.y)).unwrap_or((n / 2, n / 2));
    let r = &rec.rasters;
    let map = ck.model.extract_attention(&r.anchor_rgb, &r.sample_rgb, cfg.level as usize, q.0, q.1)?;
    let best = (0..map.weights.len()).max_by(|&a, &b| map.weights[a].total_cmp(&map.weights[b])).unwrap_or(0);
    let dir = cfg.report.clone().unwrap_or_else(|| cfg.out.join("reports").join("attention"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(format!(
        "{}_{split}_{pair_id:08}_l{}_{}x{}.png",
        ck.model.arch.attention.mechanism.as_str(),
        cfg.level,
        q.0,
        q.1
    ));
    let img = attention_overlay(&r.anchor_rgb, &r.sample_rgb, &map.heatmap, q);
    write_file(&path, &img.encode_png()?)?;
    println!(
        "level {} ({}x{}): query cell ({}, {}), argmax cell ({}, {}) weight {:.4}",
        cfg.level,
        map.resolution,
        map.resolution,
        map.cell.0,
        map.cell.1,
        best % map.resolution,
        best / map.resolution,
        map.weights[best]
    );
    println!("overlay written to {}", path.display());
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn gradcheck_cmd(cfg: &RunConfig) -> Result<()> {
    let reports = gradcheck::standard_suite_seeded(1e-4, cfg.seed)?;
    let mut failed = 0;
    for r in &reports {
        let tag = if r.passed() { "PASS" } else { "FAIL" };
        println!("{tag} {:<24} max rel error {:.3e} (tolerance {:.0e})", r.name, r.max_rel_error, r.tolerance);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", reports.len());
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

fn oracle_cmd(cfg: &RunConfig) -> Result<()> {
    let catalog = load_catalog(cfg)?;
    let checks = oracle::run_all(&catalog, cfg.seed);
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} of {} oracle checks failed", checks.len());
    }
    println!("all {} oracle checks passed", checks.len());
    Ok(())
}
