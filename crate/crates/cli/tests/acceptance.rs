//! Acceptance suite: one PASS/FAIL line per criterion, each with its
//! measured value and runtime. Exits non-zero if any criterion fails.
//!
//! `SDN_ACCEPTANCE_ONLY=3,9` runs a subset (criterion 9 reuses the reports
//! of criterion 8 when both run).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use sdn_cli::oracle::{self, aggregate_mismatches, parse_aggregates_csv, Check};
use sdn_core::assembly::PartCatalog;
use sdn_core::dataset::{self, GenConfig, Manifest};
use sdn_core::eval::{change_iou, emit_report, evaluate, parse_rows_csv, Metric, StrataConfig, ZeroPredictor};
use sdn_core::par::Execution;
use sdn_core::BinaryMask;
use sdn_nn::attention::{linear_attention_forward, reference};
use sdn_nn::gradcheck::{random_values, standard_suite};
use sdn_nn::train::overfit;
use sdn_nn::{ArchConfig, Mechanism, Model, TrainConfig};

struct Outcome {
    passed: bool,
    summary: String,
}

fn outcome(checks: &[Check]) -> Outcome {
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    let worst = checks.iter().map(|c| format!("{}={:.2e}", c.name, c.measured)).collect::<Vec<_>>().join(" ");
    Outcome {
        passed: failed.is_empty(),
        summary: if failed.is_empty() { worst } else { failed.join("; ") },
    }
}

fn sdn(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sdn")).env_clear().args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("sdn {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn nqd_metric() -> Outcome {
    outcome(&oracle::nqd_suite(1000, 1))
}

fn change_masks() -> Outcome {
    let cat = PartCatalog::default_catalog();
    let pairs = oracle::oracle_pairs(&cat, 100, 2);
    outcome(&oracle::change_mask_suite(&cat, &pairs, 2))
}

fn dataset_determinism(work: &Path) -> Outcome {
    let (a, b) = (work.join("gen_jobs1"), work.join("gen_default"));
    for (root, jobs) in [(&a, Some("1")), (&b, None)] {
        let mut args = vec!["--out", root.to_str().unwrap(), "--seed", "0"];
        if let Some(j) = jobs {
            args.extend(["--jobs", j]);
        }
        args.extend(["gen", "--scale", "tiny"]);
        if let Err(e) = sdn(&args) {
            return Outcome { passed: false, summary: e };
        }
    }
    let (fa, fb) = (files_under(&a), files_under(&b));
    if fa != fb {
        return Outcome { passed: false, summary: "file lists differ".into() };
    }
    let compared: Vec<&PathBuf> = fa.iter().filter(|f| f.ends_with("manifest.jsonl") || f.ends_with("mask.png")).collect();
    let differing = compared.iter().filter(|f| fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok()).count();
    let all_identical = fa.iter().all(|f| fs::read(a.join(f)).ok() == fs::read(b.join(f)).ok());
    Outcome {
        passed: differing == 0 && compared.len() > 7,
        summary: format!(
            "{} manifest/mask files compared, {differing} differ; all {} files identical: {all_identical}",
            compared.len(),
            fa.len()
        ),
    }
}

fn gradients() -> Outcome {
    let cli = sdn(&["gradcheck"]);
    let reports = match standard_suite(1e-4) {
        Ok(r) => r,
        Err(e) => return Outcome { passed: false, summary: e.to_string() },
    };
    let required = ["conv2d", "maxpool2", "upsample2", "concat", "softmax_ce", "gca", "lca", "linear_msa", "relu"];
    let missing: Vec<&str> = required.iter().copied().filter(|r| !reports.iter().any(|x| x.name.starts_with(r))).collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    Outcome {
        passed: cli.is_ok() && missing.is_empty() && failed.is_empty(),
        summary: format!(
            "{} ops, worst rel error {worst:.2e} (< 1e-4); failed {failed:?}; missing {missing:?}; cli {}",
            reports.len(),
            if cli.is_ok() { "ok" } else { "failed" }
        ),
    }
}

fn attention_oracles() -> Outcome {
    outcome(&oracle::attention_suite(5))
}

/// Median wall time of `f`, repeated until each sample takes at least 20 ms.
fn time_per_call(mut f: impl FnMut()) -> f64 {
    let mut reps = 1usize;
    loop {
        let t = Instant::now();
        for _ in 0..reps {
            f();
        }
        if t.elapsed() >= Duration::from_millis(20) {
            break;
        }
        reps *= 2;
    }
    let mut samples: Vec<f64> = (0..5)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..reps {
                f();
            }
            t.elapsed().as_secs_f64() / reps as f64
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    samples[2]
}

/// Least-squares slope of log(time) against log(N).
fn fitted_exponent(ns: &[f64], ts: &[f64]) -> f64 {
    let (x, y): (Vec<f64>, Vec<f64>) = ns.iter().zip(ts).map(|(n, t)| (n.ln(), t.ln())).unzip();
    let (mx, my) = (x.iter().sum::<f64>() / x.len() as f64, y.iter().sum::<f64>() / y.len() as f64);
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

fn complexity() -> Outcome {
    let (c, heads) = (32, 4);
    let (mut ns, mut lin, mut quad) = (Vec::new(), Vec::new(), Vec::new());
    for side in [8usize, 16, 32, 64] {
        let n = side * side;
        let q = random_values(c * n, 0.1, 1.0, 1);
        let k = random_values(c * n, 0.1, 1.0, 2);
        let v = random_values(c * n, -1.0, 1.0, 3);
        ns.push(n as f64);
        lin.push(time_per_call(|| {
            std::hint::black_box(linear_attention_forward(&q, &k, &v, c, n, heads));
        }));
        quad.push(time_per_call(|| {
            std::hint::black_box(reference::linear_attention_quadratic(&q, &k, &v, c, n, heads));
        }));
    }
    let (el, eq) = (fitted_exponent(&ns, &lin), fitted_exponent(&ns, &quad));
    Outcome {
        passed: el < 1.3 && eq > 1.7,
        summary: format!("linear exponent {el:.3} (< 1.3), quadratic exponent {eq:.3} (> 1.7)"),
    }
}

fn trainability() -> Outcome {
    let cat = PartCatalog::default_catalog();
    let cfg = GenConfig { name: "train_aligned".into(), max_nqd: 0.0, ..GenConfig::train(32, 7) };
    let recs: Vec<_> = (0..32).map(|i| dataset::generate_pair(&cat, &cfg, i, &Default::default()).unwrap()).collect();
    let tc = TrainConfig { peak_lr: 3e-3, batch_size: 8, ..TrainConfig::default() };
    let mut parts = Vec::new();
    let mut passed = true;
    for mech in [Mechanism::Gca, Mechanism::ConcatOnly] {
        let model = Model::<f32>::new(ArchConfig::tiny(mech), 1).unwrap();
        match overfit(model, &recs, &tc, 50, 2000, 50, 0.8, Execution::available()) {
            Ok(o) => {
                passed &= o.mean_iou >= 0.8;
                parts.push(format!("{}: IoU {:.3} after {} steps", mech.as_str(), o.mean_iou, o.steps));
            }
            Err(e) => {
                passed = false;
                parts.push(format!("{}: {e}", mech.as_str()));
            }
        }
    }
    Outcome { passed, summary: parts.join("; ") }
}

const VARIANTS: [&str; 3] = ["gca", "lca", "concat"];
const EVAL_SPLITS: [&str; 3] = ["test_seen_pose", "test_novel_pose", "test_seen_pose_aligned"];

fn report_path(root: &Path, split: &str, who: &str) -> PathBuf {
    root.join("reports").join(split).join(who)
}

fn medians(root: &Path, split: &str, who: &str) -> Option<BTreeMap<&'static str, f64>> {
    let text = fs::read_to_string(report_path(root, split, who).join("aggregates.csv")).ok()?;
    let aggs = parse_aggregates_csv(&text).ok()?;
    let mut out = BTreeMap::new();
    for m in Metric::ALL {
        if let Some(s) = aggs.iter().find(|a| a.stratum == "all" && a.metric == m).and_then(|a| a.summary) {
            out.insert(m.as_str(), s.median);
        }
    }
    Some(out)
}

/// Report has every stratum and metric, parseable rows, and IoUs in [0, 1].
fn report_well_formed(dir: &Path, pairs: usize) -> Result<(), String> {
    let rows = parse_rows_csv(&fs::read_to_string(dir.join("rows.csv")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let aggs = parse_aggregates_csv(&fs::read_to_string(dir.join("aggregates.csv")).map_err(|e| e.to_string())?)?;
    if rows.len() != pairs {
        return Err(format!("{}: {} rows, expected {pairs}", dir.display(), rows.len()));
    }
    let strata = StrataConfig::default();
    if aggs.len() != strata.all_strata().len() * Metric::ALL.len() {
        return Err(format!("{}: {} aggregate lines", dir.display(), aggs.len()));
    }
    let unit = |v: f64| (0.0..=1.0).contains(&v);
    let rows_ok = rows.iter().all(|r| unit(r.iou) && r.iou_anchor_origin.is_none_or(unit) && r.iou_sample_origin.is_none_or(unit));
    let aggs_ok = aggs.iter().filter_map(|a| a.summary).all(|s| {
        [s.mean, s.q1, s.median, s.q3, s.whisker_lo, s.whisker_hi].into_iter().all(unit)
    });
    if !rows_ok || !aggs_ok {
        return Err(format!("{}: IoU outside [0, 1]", dir.display()));
    }
    if !dir.join("boxplot.svg").is_file() {
        return Err(format!("{}: no boxplot", dir.display()));
    }
    Ok(())
}

fn end_to_end(data: &Path) -> Outcome {
    let root = data.to_str().unwrap();
    if !data.join("test_seen_pose_aligned").join("manifest.jsonl").is_file() {
        if let Err(e) = sdn(&["--out", root, "--seed", "0", "gen", "--scale", "tiny"]) {
            return Outcome { passed: false, summary: e };
        }
    }
    let mut notes = Vec::new();
    for mech in VARIANTS {
        let t = Instant::now();
        if let Err(e) = sdn(&["--out", root, "--seed", "0", "train", "--mechanism", mech]) {
            return Outcome { passed: false, summary: e };
        }
        notes.push(format!("{mech} trained in {:.0}s", t.elapsed().as_secs_f64()));
        for split in EVAL_SPLITS {
            if let Err(e) = sdn(&["--out", root, "eval", "--mechanism", mech, "--split", split]) {
                return Outcome { passed: false, summary: e };
            }
        }
    }
    for split in EVAL_SPLITS {
        let m = Manifest::load(&data.join(split)).unwrap();
        let report = evaluate(&ZeroPredictor(64), &m, &StrataConfig::default(), 4, Execution::available()).unwrap();
        emit_report(&report, &report_path(data, split, "zero")).unwrap();
    }

    let mut problems = Vec::new();
    for split in EVAL_SPLITS {
        let pairs = Manifest::load(&data.join(split)).unwrap().len();
        for who in VARIANTS.iter().chain(&["zero"]) {
            if let Err(e) = report_well_formed(&report_path(data, split, who), pairs) {
                problems.push(e);
            }
        }
    }
    let med = |split, who| medians(data, split, who).and_then(|m| m.get("iou").copied()).unwrap_or(f64::NAN);
    let (gca_seen, zero_seen) = (med("test_seen_pose", "gca"), med("test_seen_pose", "zero"));
    let margin = gca_seen - zero_seen;
    if !(margin >= 0.2) {
        problems.push(format!("GCA median {gca_seen:.4} vs zero {zero_seen:.4}: margin {margin:.4} < 0.2"));
    }

    // directional expectations, reported only
    let expect = |label: &str, holds: bool, detail: String| format!("[{}] {label}: {detail}", if holds { "holds" } else { "not observed" });
    let (ca, ga) = (med("test_seen_pose_aligned", "concat"), med("test_seen_pose_aligned", "gca"));
    eprintln!("    {}", expect("concat >= GCA on aligned test", ca >= ga, format!("{ca:.4} vs {ga:.4}")));
    for mech in VARIANTS {
        let (s, n) = (med("test_seen_pose", mech), med("test_novel_pose", mech));
        eprintln!("    {}", expect(&format!("{mech} novel < seen"), n < s, format!("{n:.4} vs {s:.4}")));
        let m = medians(data, "test_seen_pose", mech).unwrap_or_default();
        let (a, b) = (m.get("iou_anchor_origin").copied().unwrap_or(f64::NAN), m.get("iou_sample_origin").copied().unwrap_or(f64::NAN));
        eprintln!("    {}", expect(&format!("{mech} anchor-origin >= sample-origin"), a >= b, format!("{a:.4} vs {b:.4}")));
    }
    for mech in VARIANTS {
        notes.push(format!("{mech} seen median {:.3}", med("test_seen_pose", mech)));
    }
    Outcome {
        passed: problems.is_empty(),
        summary: format!(
            "GCA - zero median on test_seen_pose = {margin:.4} (>= 0.2); {}{}",
            notes.join(", "),
            if problems.is_empty() { String::new() } else { format!("; problems: {}", problems.join("; ")) }
        ),
    }
}

fn self_consistency(data: &Path) -> Outcome {
    let strata = StrataConfig::default();
    let mut dirs: Vec<PathBuf> = Vec::new();
    for split in EVAL_SPLITS {
        for who in VARIANTS.iter().chain(&["zero"]) {
            let d = report_path(data, split, who);
            if d.join("rows.csv").is_file() {
                dirs.push(d);
            }
        }
    }
    if dirs.is_empty() {
        // no trained reports available: score the zero predictor on fresh pairs
        let d = data.join("consistency");
        let cfg = GenConfig { name: "pairs".into(), d_max: 10, max_nqd: 0.4, ..GenConfig::train(64, 9) };
        let m = dataset::generate_dataset(&PartCatalog::default_catalog(), &cfg, &d.join("pairs"), &Default::default(), Execution::available()).unwrap();
        let report = evaluate(&ZeroPredictor(64), &m, &strata, 0, Execution::available()).unwrap();
        emit_report(&report, &d.join("report")).unwrap();
        dirs.push(d.join("report"));
    }
    let mut mismatches = 0;
    let mut rows_seen = 0;
    for d in &dirs {
        let rows = parse_rows_csv(&fs::read_to_string(d.join("rows.csv")).unwrap()).unwrap();
        let aggs = parse_aggregates_csv(&fs::read_to_string(d.join("aggregates.csv")).unwrap()).unwrap();
        rows_seen += rows.len();
        mismatches += aggregate_mismatches(&rows, &aggs, &strata);
    }
    let empty = BinaryMask::new(64, 64);
    let empty_iou = change_iou(&empty, &empty).unwrap_or(f64::NAN);
    let mut one_pixel = BinaryMask::new(64, 64);
    one_pixel.data[0] = 1;
    let miss = change_iou(&empty, &one_pixel).unwrap_or(f64::NAN);
    Outcome {
        passed: mismatches == 0 && empty_iou == 1.0 && miss == 0.0,
        summary: format!(
            "{} reports, {rows_seen} rows, {mismatches} aggregate fields differ; IoU(empty, empty) = {empty_iou}, IoU(empty, one pixel) = {miss}",
            dirs.len()
        ),
    }
}

fn main() -> ExitCode {
    // libtest flags (e.g. --nocapture) are accepted and ignored
    let only: Option<Vec<usize>> = std::env::var("SDN_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let work = tempfile::tempdir().expect("temporary directory");
    let data = work.path().join("gen_default");

    type Criterion<'a> = (usize, &'a str, Duration, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        (1, "nQD metric suite", Duration::from_secs(1), Box::new(nqd_metric)),
        (2, "change-mask oracle", Duration::from_secs(30), Box::new(change_masks)),
        (3, "dataset determinism", Duration::from_secs(120), Box::new(|| dataset_determinism(work.path()))),
        (4, "gradient checks", Duration::from_secs(120), Box::new(gradients)),
        (5, "attention oracles", Duration::from_secs(60), Box::new(attention_oracles)),
        (6, "complexity property", Duration::from_secs(120), Box::new(complexity)),
        (7, "trainability smoke test", Duration::from_secs(15 * 60), Box::new(trainability)),
        (8, "end-to-end tiny experiment", Duration::from_secs(2 * 3600), Box::new(|| end_to_end(&data))),
        (9, "evaluation self-consistency", Duration::from_secs(10), Box::new(|| self_consistency(&data))),
    ];

    let mut failures = 0;
    for (id, name, limit, run) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        let t = Instant::now();
        let out = run();
        let elapsed = t.elapsed();
        let in_time = elapsed <= *limit;
        let passed = out.passed && in_time;
        failures += usize::from(!passed);
        println!(
            "{} criterion {id} ({name}): {} | runtime {:.2}s (limit {}s{})",
            if passed { "PASS" } else { "FAIL" },
            out.summary,
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", exceeded" }
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    }
}
