//! Change-class IoU, stratified aggregation and report emission.
//!
//! The headline numbers are per-pair IoU distributions (quartiles, median,
//! mean) within strata of orientation difference and part-difference count.
//! Change pixels are also attributed to their origin: parts visible in the
//! anchor only, or parts of the sample state only (seen at the anchor pose).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::{self, DatasetError, Manifest, PairRecord};
use crate::image::{BinaryMask, RgbImage};
use crate::par::{self, Execution};

pub const ROWS_HEADER: &str = "pair_id,split,nqd,diff_count,only_in_a,only_in_b,iou,iou_anchor_origin,iou_sample_origin";
pub const AGGREGATES_HEADER: &str = "stratum,metric,count,mean,q1,median,q3,whisker_lo,whisker_hi";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    Shape(usize, usize, usize, usize),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed csv: {0}")]
    Csv(String),
    #[error("predictor input size {0} does not match dataset size {1}")]
    InputSize(usize, usize),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
}

fn check_shape(a: &BinaryMask, b: &BinaryMask) -> Result<(), EvalError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(EvalError::Shape(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

/// `|pred ∧ gt| / |pred ∨ gt|`; two empty masks score 1.
pub fn change_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, EvalError> {
    check_shape(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (p != 0, g != 0);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// IoU restricted to `footprint`; `None` when the footprint is empty.
pub fn restricted_iou(pred: &BinaryMask, gt: &BinaryMask, footprint: &BinaryMask) -> Result<Option<f64>, EvalError> {
    check_shape(pred, gt)?;
    check_shape(pred, footprint)?;
    if footprint.count() == 0 {
        return Ok(None);
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for ((&p, &g), &f) in pred.data.iter().zip(&gt.data).zip(&footprint.data) {
        if f == 0 {
            continue;
        }
        let (p, g) = (p != 0, g != 0);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(Some(if union == 0 { 1.0 } else { inter as f64 / union as f64 }))
}

/// Disjoint origin footprints: pixels showing an anchor-only part in the
/// anchor, and the remaining pixels showing a sample-only part at the anchor
/// pose.
pub fn origin_footprints(record: &PairRecord) -> (BinaryMask, BinaryMask) {
    let diff = record.meta.diff();
    let r = &record.rasters;
    let (w, h) = r.size();
    let mut anchor = BinaryMask::new(w, h);
    let mut sample = BinaryMask::new(w, h);
    for i in 0..w * h {
        if diff.only_in_a.contains(&r.anchor_instance.data[i]) {
            anchor.data[i] = 1;
        } else if diff.only_in_b.contains(&r.aligned_instance.data[i]) {
            sample.data[i] = 1;
        }
    }
    (anchor, sample)
}

/// Anything that maps a pair to a full-resolution change mask. Predictors
/// must only look at `record.rasters.anchor_rgb` and `sample_rgb`; the
/// reference predictors below are the exception.
pub trait ChangePredictor: Sync {
    fn input_size(&self) -> usize;
    fn predict(&self, record: &PairRecord) -> BinaryMask;
}

/// Predicts no change anywhere.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPredictor(pub usize);

impl ChangePredictor for ZeroPredictor {
    fn input_size(&self) -> usize {
        self.0
    }
    fn predict(&self, record: &PairRecord) -> BinaryMask {
        let (w, h) = record.rasters.size();
        BinaryMask::new(w, h)
    }
}

/// Returns the ground truth.
#[derive(Debug, Clone, Copy)]
pub struct OraclePredictor(pub usize);

impl ChangePredictor for OraclePredictor {
    fn input_size(&self) -> usize {
        self.0
    }
    fn predict(&self, record: &PairRecord) -> BinaryMask {
        record.rasters.mask.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrataConfig {
    /// Half-open `(lo, hi]` bins; the first bin also includes `lo`.
    pub nqd_bins: Vec<(f64, f64)>,
    /// Inclusive part-difference count ranges.
    pub diff_bins: Vec<(usize, usize)>,
}

impl Default for StrataConfig {
    fn default() -> Self {
        StrataConfig {
            nqd_bins: vec![(0.0, 0.1), (0.1, 0.2), (0.2, 0.3), (0.3, 0.4)],
            diff_bins: vec![(1, 3), (4, 6), (7, 10)],
        }
    }
}

impl StrataConfig {
    fn nqd_bin(&self, v: f64) -> Option<usize> {
        self.nqd_bins.iter().enumerate().position(|(i, &(lo, hi))| (v > lo || (i == 0 && v >= lo)) && v <= hi)
    }

    fn diff_bin(&self, d: usize) -> Option<usize> {
        self.diff_bins.iter().position(|&(lo, hi)| (lo..=hi).contains(&d))
    }

    /// Stratum names a row belongs to, `"all"` first.
    pub fn strata_of(&self, row: &EvalRow) -> Vec<String> {
        let mut out = vec!["all".to_string()];
        let nb = self.nqd_bin(row.nqd).map(|i| {
            let (lo, hi) = self.nqd_bins[i];
            format!("nqd:{lo:.1}-{hi:.1}")
        });
        let db = self.diff_bin(row.diff_count).map(|i| {
            let (lo, hi) = self.diff_bins[i];
            format!("diff:{lo}-{hi}")
        });
        if let Some(n) = &nb {
            out.push(n.clone());
        }
        if let Some(d) = &db {
            out.push(d.clone());
        }
        if let (Some(n), Some(d)) = (nb, db) {
            out.push(format!("{n}|{d}"));
        }
        out
    }

    /// Every stratum name, including empty ones, in report order.
    pub fn all_strata(&self) -> Vec<String> {
        let ns: Vec<String> = self.nqd_bins.iter().map(|(lo, hi)| format!("nqd:{lo:.1}-{hi:.1}")).collect();
        let ds: Vec<String> = self.diff_bins.iter().map(|(lo, hi)| format!("diff:{lo}-{hi}")).collect();
        let mut out = vec!["all".to_string()];
        out.extend(ns.iter().cloned());
        out.extend(ds.iter().cloned());
        for n in &ns {
            for d in &ds {
                out.push(format!("{n}|{d}"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub pair_id: u64,
    pub split: String,
    pub nqd: f64,
    pub diff_count: usize,
    pub only_in_a: usize,
    pub only_in_b: usize,
    pub iou: f64,
    pub iou_anchor_origin: Option<f64>,
    pub iou_sample_origin: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Iou,
    AnchorOrigin,
    SampleOrigin,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Iou, Metric::AnchorOrigin, Metric::SampleOrigin];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Iou => "iou",
            Metric::AnchorOrigin => "iou_anchor_origin",
            Metric::SampleOrigin => "iou_sample_origin",
        }
    }

    fn value(&self, row: &EvalRow) -> Option<f64> {
        match self {
            Metric::Iou => Some(row.iou),
            Metric::AnchorOrigin => row.iou_anchor_origin,
            Metric::SampleOrigin => row.iou_sample_origin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Tukey whiskers: furthest data within 1.5 IQR of the box.
    pub whisker_lo: f64,
    pub whisker_hi: f64,
}

/// Linear interpolation between order statistics of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let (q1, median, q3) = (quantile_sorted(&s, 0.25), quantile_sorted(&s, 0.5), quantile_sorted(&s, 0.75));
    let iqr = q3 - q1;
    let whisker_lo = s.iter().copied().find(|&v| v >= q1 - 1.5 * iqr).unwrap_or(s[0]);
    let whisker_hi = s.iter().rev().copied().find(|&v| v <= q3 + 1.5 * iqr).unwrap_or(s[s.len() - 1]);
    Some(Summary { mean: values.iter().sum::<f64>() / values.len() as f64, q1, median, q3, whisker_lo, whisker_hi })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub stratum: String,
    pub metric: Metric,
    pub count: usize,
    pub summary: Option<Summary>,
}

/// Aggregates per stratum and metric; rows are taken in pair-id order.
pub fn aggregate(rows: &[EvalRow], strata: &StrataConfig) -> Vec<Aggregate> {
    let mut sorted: Vec<&EvalRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.pair_id);
    let memberships: Vec<Vec<String>> = sorted.iter().map(|r| strata.strata_of(r)).collect();
    let mut out = Vec::new();
    for name in strata.all_strata() {
        for metric in Metric::ALL {
            let values: Vec<f64> = sorted
                .iter()
                .zip(&memberships)
                .filter(|(_, m)| m.contains(&name))
                .filter_map(|(r, _)| metric.value(r))
                .collect();
            out.push(Aggregate { stratum: name.clone(), metric, count: values.len(), summary: summarize(&values) });
        }
    }
    out
}

/// Side-by-side panel inputs for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub pair_id: u64,
    pub anchor: RgbImage,
    pub sample: RgbImage,
    pub gt: BinaryMask,
    pub pred: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregates: Vec<Aggregate>,
    pub panels: Vec<Panel>,
}

impl EvalReport {
    pub fn find(&self, stratum: &str, metric: Metric) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.stratum == stratum && a.metric == metric)
    }

    pub fn median(&self, stratum: &str, metric: Metric) -> Option<f64> {
        self.find(stratum, metric).and_then(|a| a.summary).map(|s| s.median)
    }
}

pub fn evaluate_row(record: &PairRecord, pred: &BinaryMask) -> Result<EvalRow, EvalError> {
    let gt = &record.rasters.mask;
    let (fa, fs) = origin_footprints(record);
    Ok(EvalRow {
        pair_id: record.meta.pair_id,
        split: record.split.as_str().to_string(),
        nqd: record.meta.nqd,
        diff_count: record.meta.diff_count(),
        only_in_a: record.meta.only_in_a.len(),
        only_in_b: record.meta.only_in_b.len(),
        iou: change_iou(pred, gt)?,
        iou_anchor_origin: restricted_iou(pred, gt, &fa)?,
        iou_sample_origin: restricted_iou(pred, gt, &fs)?,
    })
}

/// Scores `predictor` on every pair of `manifest`; the first `panels` pairs
/// by ID are kept for qualitative output.
pub fn evaluate<P: ChangePredictor + ?Sized>(
    predictor: &P,
    manifest: &Manifest,
    strata: &StrataConfig,
    panels: usize,
    exec: Execution,
) -> Result<EvalReport, EvalError> {
    let mut order: Vec<usize> = (0..manifest.records.len()).collect();
    order.sort_by_key(|&i| manifest.records[i].meta.pair_id);
    let results = par::try_map_indexed(exec, order.len(), |k| {
        let record = dataset::load_record(manifest, &manifest.records[order[k]])?;
        let (w, _) = record.rasters.size();
        if w != predictor.input_size() {
            return Err(EvalError::InputSize(predictor.input_size(), w));
        }
        let pred = predictor.predict(&record);
        let row = evaluate_row(&record, &pred)?;
        let panel = (k < panels).then(|| Panel {
            pair_id: record.meta.pair_id,
            anchor: record.rasters.anchor_rgb.clone(),
            sample: record.rasters.sample_rgb.clone(),
            gt: record.rasters.mask.clone(),
            pred,
        });
        Ok((row, panel))
    })?;
    let mut rows = Vec::with_capacity(results.len());
    let mut panel_list = Vec::new();
    for (row, panel) in results {
        rows.push(row);
        panel_list.extend(panel);
    }
    let aggregates = aggregate(&rows, strata);
    Ok(EvalReport { rows, aggregates, panels: panel_list })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn rows_csv(rows: &[EvalRow]) -> String {
    let mut s = format!("{ROWS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.pair_id,
            r.split,
            r.nqd,
            r.diff_count,
            r.only_in_a,
            r.only_in_b,
            r.iou,
            opt(r.iou_anchor_origin),
            opt(r.iou_sample_origin)
        );
    }
    s
}

pub fn aggregates_csv(aggs: &[Aggregate]) -> String {
    let mut s = format!("{AGGREGATES_HEADER}\n");
    for a in aggs {
        match a.summary {
            Some(x) => {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{}",
                    a.stratum,
                    a.metric.as_str(),
                    a.count,
                    x.mean,
                    x.q1,
                    x.median,
                    x.q3,
                    x.whisker_lo,
                    x.whisker_hi
                );
            }
            None => {
                let _ = writeln!(s, "{},{},{},,,,,,", a.stratum, a.metric.as_str(), a.count);
            }
        }
    }
    s
}

pub fn parse_rows_csv(text: &str) -> Result<Vec<EvalRow>, EvalError> {
    let mut lines = text.lines();
    if lines.next() != Some(ROWS_HEADER) {
        return Err(EvalError::Csv("unexpected header".into()));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| EvalError::Csv(format!("{s}: {e}")));
    let int = |s: &str| s.parse::<u64>().map_err(|e| EvalError::Csv(format!("{s}: {e}")));
    let optf = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 9 {
                return Err(EvalError::Csv(format!("expected 9 fields: {l}")));
            }
            Ok(EvalRow {
                pair_id: int(f[0])?,
                split: f[1].to_string(),
                nqd: num(f[2])?,
                diff_count: int(f[3])? as usize,
                only_in_a: int(f[4])? as usize,
                only_in_b: int(f[5])? as usize,
                iou: num(f[6])?,
                iou_anchor_origin: optf(f[7])?,
                iou_sample_origin: optf(f[8])?,
            })
        })
        .collect()
}

/// Box-plot geometry of the `iou` metric per stratum with data.
pub fn boxplot_svg(aggs: &[Aggregate]) -> String {
    let boxes: Vec<(&str, Summary)> = aggs
        .iter()
        .filter(|a| a.metric == Metric::Iou)
        .filter_map(|a| a.summary.map(|s| (a.stratum.as_str(), s)))
        .collect();
    let (slot, top, plot_h, left) = (56.0, 20.0, 300.0, 50.0);
    let width = left + slot * boxes.len().max(1) as f64 + 20.0;
    let height = top + plot_h + 140.0;
    let y = |v: f64| top + (1.0 - v) * plot_h;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{}" x2="{left}" y2="{}" stroke="black"/>"#, y(1.0), y(0.0));
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, left - 4.0, y(v) + 3.0);
    }
    for (i, (name, b)) in boxes.iter().enumerate() {
        let cx = left + slot * (i as f64 + 0.5);
        let hw = slot * 0.3;
        let _ = writeln!(s, r#"<g class="box" data-stratum="{name}">"#);
        let _ = writeln!(s, r#"<line x1="{cx}" y1="{}" x2="{cx}" y2="{}" stroke="black"/>"#, y(b.whisker_hi), y(b.q3));
        let _ = writeln!(s, r#"<line x1="{cx}" y1="{}" x2="{cx}" y2="{}" stroke="black"/>"#, y(b.q1), y(b.whisker_lo));
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="{}" width="{}" height="{}" fill="#9ecae1" stroke="black"/>"##,
            cx - hw,
            y(b.q3),
            2.0 * hw,
            (y(b.q1) - y(b.q3)).max(0.0)
        );
        let _ = writeln!(s, r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="2"/>"#, cx - hw, y(b.median), cx + hw, y(b.median));
        let _ = writeln!(
            s,
            r#"<text transform="translate({cx},{}) rotate(60)">{name}</text>"#,
            y(0.0) + 10.0
        );
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

/// Anchor | sample | ground truth | prediction, left to right.
pub fn panel_image(p: &Panel) -> RgbImage {
    let n = p.anchor.width;
    let h = p.anchor.height;
    let mut out = RgbImage::new(4 * n, h);
    for y in 0..h {
        for x in 0..n {
            out.set(x, y, p.anchor.get(x, y));
            out.set(n + x, y, p.sample.get(x, y));
            let g = if p.gt.get(x, y) { 255 } else { 0 };
            out.set(2 * n + x, y, [g, g, g]);
            let q = if p.pred.get(x, y) { 255 } else { 0 };
            out.set(3 * n + x, y, [q, q, q]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub rows: PathBuf,
    pub aggregates: PathBuf,
    pub boxplot: PathBuf,
    pub panels: Vec<PathBuf>,
}

pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<ReportFiles, EvalError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let files = ReportFiles {
        rows: out_dir.join("rows.csv"),
        aggregates: out_dir.join("aggregates.csv"),
        boxplot: out_dir.join("boxplot.svg"),
        panels: report.panels.iter().map(|p| out_dir.join(format!("panel_{:08}.png", p.pair_id))).collect(),
    };
    fs::write(&files.rows, rows_csv(&report.rows)).map_err(io(&files.rows))?;
    fs::write(&files.aggregates, aggregates_csv(&report.aggregates)).map_err(io(&files.aggregates))?;
    fs::write(&files.boxplot, boxplot_svg(&report.aggregates)).map_err(io(&files.boxplot))?;
    for (p, path) in report.panels.iter().zip(&files.panels) {
        crate::image::write_file(path, &panel_image(p).encode_png()?)?;
    }
    Ok(files)
}

/// Median change between two reports for one stratum and metric, as
/// absolute IoU points and relative to `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct MedianDelta {
    pub stratum: String,
    pub metric: Metric,
    pub base: f64,
    pub other: f64,
    pub absolute: f64,
    pub relative: Option<f64>,
}

pub fn median_deltas(base: &EvalReport, other: &EvalReport) -> Vec<MedianDelta> {
    base.aggregates
        .iter()
        .filter_map(|a| {
            let b = a.summary?.median;
            let o = other.median(&a.stratum, a.metric)?;
            Some(MedianDelta {
                stratum: a.stratum.clone(),
                metric: a.metric,
                base: b,
                other: o,
                absolute: o - b,
                relative: (b != 0.0).then(|| (o - b) / b),
            })
        })
        .collect()
}
