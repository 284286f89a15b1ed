//! Brute-force oracle suites. Each check measures a worst-case discrepancy
//! between an implementation and a direct, independent computation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::f64::consts::{PI, SQRT_2};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdn_core::assembly::{sample_state, PartCatalog, StateConstraints};
use sdn_core::dataset::{generate_pair, pair_rng, GenConfig, PairRecord};
use sdn_core::eval::{aggregate, change_iou, Aggregate, EvalRow, Metric, StrataConfig};
use sdn_core::geometry::{nqd, perturb_pose, sample_pose, Intrinsics, PoseRange, Quaternion, Vec3};
use sdn_core::render::{self, diff_set_mask, instance_change_mask, RenderParams};
use sdn_core::BinaryMask;
use sdn_nn::attention::{gca_forward, lca_forward, linear_attention_forward, phi};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    /// Worst observed discrepancy (or the checked quantity).
    pub measured: f64,
    pub limit: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn at_most(name: &str, measured: f64, limit: f64, detail: String) -> Self {
        Check { name: name.into(), measured, limit, passed: measured <= limit, detail }
    }

    fn below(name: &str, measured: f64, limit: f64, detail: String) -> Self {
        Check { name: name.into(), measured, limit, passed: measured < limit, detail }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<28} measured {:.3e} limit {:.3e}  {}", self.name, self.measured, self.limit, self.detail)
    }
}

fn random_axis(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if (0.1..=1.0).contains(&n) {
            return v.normalized();
        }
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Quaternion {
    Quaternion::from_axis_angle(random_axis(rng), rng.gen_range(0.0..2.0 * PI))
}

/// nQD against the rotation-angle formula, identities, and the √2 bound.
pub fn nqd_suite(samples: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut identity, mut formula, mut max_seen) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..samples {
        let q = random_rotation(&mut rng);
        identity = identity.max(nqd(&q, &q).unwrap()).max(nqd(&q, &-q).unwrap());
        // relative rotation with a known angle, folded to [0, π]
        let angle = rng.gen_range(0.0..2.0 * PI);
        let q2 = (q * Quaternion::from_axis_angle(random_axis(&mut rng), angle)).normalized();
        let folded = if angle > PI { 2.0 * PI - angle } else { angle };
        let got = nqd(&q, &q2).unwrap();
        formula = formula.max((got - 2.0 * (folded / 4.0).sin()).abs());
        max_seen = max_seen.max(got).max(nqd(&q, &random_rotation(&mut rng)).unwrap());
    }
    let q = random_rotation(&mut rng);
    let half_turn = (q * Quaternion::from_axis_angle(random_axis(&mut rng), PI)).normalized();
    max_seen = max_seen.max(nqd(&q, &half_turn).unwrap());
    vec![
        Check::at_most("nqd_identity", identity, 0.0, "max of nqd(q,q) and nqd(q,-q)".into()),
        Check::at_most("nqd_formula", formula, 1e-9, format!("|nqd - 2 sin(theta/4)| over {samples} rotations")),
        Check::at_most("nqd_upper_bound", max_seen, SQRT_2, "largest nqd observed, including a half turn".into()),
    ]
}

/// Pose perturbation never exceeds its nQD budget.
pub fn perturb_budget(samples: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intrinsics = Intrinsics::from_fov(64, 50.0);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..samples {
        let budget = [0.05, 0.1, 0.2, 0.4, SQRT_2][i % 5];
        let base = sample_pose(&PoseRange::training(), intrinsics, &mut rng).unwrap();
        let p = perturb_pose(&base, budget, 0.05, &mut rng).unwrap();
        worst = worst.max(nqd(&base.orientation, &p.orientation).unwrap() - budget);
    }
    Check::at_most("perturb_within_budget", worst, 0.0, format!("max (nqd - budget) over {samples} perturbations"))
}

/// Sampled states are valid per exhaustive enumeration and diverse.
pub fn state_diversity(catalog: &PartCatalog, samples: usize, seed: u64) -> Vec<Check> {
    let valid: HashSet<u64> = catalog.enumerate_states(&StateConstraints::default()).iter().map(|s| s.present).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut invalid = 0;
    for _ in 0..samples {
        let s = sample_state(catalog, &mut rng);
        invalid += usize::from(!valid.contains(&s.present));
        seen.insert(s.present);
    }
    vec![
        Check::at_most("sampled_states_valid", invalid as f64, 0.0, format!("{} valid states enumerated", valid.len())),
        Check {
            name: "sampled_state_diversity".into(),
            measured: seen.len() as f64,
            limit: 100.0,
            passed: seen.len() >= 100,
            detail: format!("distinct states in {samples} samples (at least 100 required)"),
        },
    ]
}

/// Generated pairs used by the change-mask oracle: test-distribution poses
/// and part differences.
pub fn oracle_pairs(catalog: &PartCatalog, count: usize, seed: u64) -> Vec<PairRecord> {
    let cfg = GenConfig { name: "oracle".into(), d_max: 10, max_nqd: 0.4, ..GenConfig::train(count, seed) };
    (0..count as u64).map(|i| generate_pair(catalog, &cfg, i, &HashSet::new()).expect("oracle pair")).collect()
}

/// Instance-inequality mask equals diff-set membership, and a view
/// compared with itself shows no change.
pub fn change_mask_suite(catalog: &PartCatalog, pairs: &[PairRecord], seed: u64) -> Vec<Check> {
    let mut mismatched = 0usize;
    let mut wrong_size = 0usize;
    for p in pairs {
        let r = &p.rasters;
        let by_label = instance_change_mask(&r.anchor_instance, &r.aligned_instance).unwrap();
        let by_diff = diff_set_mask(&r.anchor_instance, &r.aligned_instance, &p.meta.diff());
        mismatched += by_label.data.iter().zip(&by_diff.data).filter(|(a, b)| a != b).count();
        mismatched += by_label.data.iter().zip(&r.mask.data).filter(|(a, b)| a != b).count();
        wrong_size += usize::from((r.mask.width, r.mask.height) != (64, 64));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = RenderParams::new(64);
    let mut self_changes = 0usize;
    for _ in 0..pairs.len().min(20) {
        let state = sample_state(catalog, &mut rng);
        let pose = sample_pose(&PoseRange::training(), Intrinsics::from_fov(64, 50.0), &mut rng).unwrap();
        let view = render::rasterize(catalog, &state, &pose, &params).unwrap();
        self_changes += render::change_mask(&view, &view).unwrap().count();
    }
    vec![
        Check::at_most(
            "change_mask_rules_agree",
            (mismatched + wrong_size) as f64,
            0.0,
            format!("differing pixels over {} pairs at 64x64", pairs.len()),
        ),
        Check::at_most("change_mask_self_empty", self_changes as f64, 0.0, "changed pixels of v vs v".into()),
    ]
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Softmax attention of every query over the keys admitted by `admit`.
fn attention_double_loop(f1: &[f64], f2: &[f64], c: usize, h: usize, w: usize, admit: impl Fn(usize, usize) -> bool) -> Vec<f64> {
    let n = h * w;
    let mut out = vec![0.0; c * n];
    for i in 0..n {
        let keys: Vec<usize> = (0..n).filter(|&j| admit(i, j)).collect();
        let logits: Vec<f64> =
            keys.iter().map(|&j| (0..c).map(|ch| f1[ch * n + i] * f2[ch * n + j]).sum::<f64>() / (c as f64).sqrt()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for ch in 0..c {
            out[ch * n + i] = keys.iter().zip(&e).map(|(&j, &ej)| ej / z * f2[ch * n + j]).sum();
        }
    }
    out
}

/// Attention kernels against direct loops; tolerance 1e-6.
pub fn attention_suite(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut gca_err, mut full_err, mut w1_err, mut lin_err, mut perm_err, mut lca_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (c, h, w) in [(4, 3, 5), (8, 6, 6), (16, 4, 4), (6, 8, 8)] {
        let n = h * w;
        let (f1, f2) = (rand_vec(&mut rng, c * n), rand_vec(&mut rng, c * n));
        let (gca, _) = gca_forward(&f1, &f2, c, n);
        gca_err = gca_err.max(max_abs(&gca, &attention_double_loop(&f1, &f2, c, h, w, |_, _| true)));

        let full = 2 * h.max(w) + 1;
        let (lca_full, _) = lca_forward(&f1, &f2, c, h, w, full);
        full_err = full_err.max(max_abs(&lca_full, &gca));

        let (lca1, _) = lca_forward(&f1, &f2, c, h, w, 1);
        w1_err = w1_err.max(max_abs(&lca1, &f2));

        for win in [3usize, 5] {
            let half = win / 2;
            let (lca, _) = lca_forward(&f1, &f2, c, h, w, win);
            let oracle = attention_double_loop(&f1, &f2, c, h, w, |i, j| {
                (i / w).abs_diff(j / w) <= half && (i % w).abs_diff(j % w) <= half
            });
            lca_err = lca_err.max(max_abs(&lca, &oracle));
        }

        let mut perm: Vec<usize> = (0..n).collect();
        for k in (1..n).rev() {
            perm.swap(k, rng.gen_range(0..=k));
        }
        let f2p: Vec<f64> = (0..c * n).map(|k| f2[(k / n) * n + perm[k % n]]).collect();
        let (permuted, _) = gca_forward(&f1, &f2p, c, n);
        perm_err = perm_err.max(max_abs(&gca, &permuted));
    }
    for (c, n, heads) in [(8, 16, 2), (12, 9, 3), (4, 64, 1), (16, 25, 4)] {
        let (q, k, v) = (rand_vec(&mut rng, c * n), rand_vec(&mut rng, c * n), rand_vec(&mut rng, c * n));
        let pq: Vec<f64> = q.iter().map(|&x| phi(x)).collect();
        let pk: Vec<f64> = k.iter().map(|&x| phi(x)).collect();
        let st = linear_attention_forward(&pq, &pk, &v, c, n, heads);
        let d = c / heads;
        let mut want = vec![0.0; c * n];
        for hd in 0..heads {
            for i in 0..n {
                let s: Vec<f64> = (0..n).map(|j| (0..d).map(|t| pq[(hd * d + t) * n + i] * pk[(hd * d + t) * n + j]).sum()).collect();
                let z: f64 = s.iter().sum();
                for t in 0..d {
                    want[(hd * d + t) * n + i] = (0..n).map(|j| s[j] * v[(hd * d + t) * n + j]).sum::<f64>() / z;
                }
            }
        }
        lin_err = lin_err.max(max_abs(&st.out, &want));
    }
    let tol = 1e-6;
    vec![
        Check::below("gca_vs_double_loop", gca_err, tol, "max abs error".into()),
        Check::below("lca_full_window_eq_gca", full_err, tol, "max abs error".into()),
        Check::below("lca_window1_eq_f2", w1_err, tol, "max abs error".into()),
        Check::below("lca_vs_windowed_loop", lca_err, tol, "windows 3 and 5, max abs error".into()),
        Check::below("linear_msa_vs_quadratic", lin_err, tol, "explicit N x N kernel, max abs error".into()),
        Check::below("gca_key_permutation", perm_err, tol, "max abs change".into()),
    ]
}

/// Change-IoU against set arithmetic on pixel indices.
pub fn iou_suite(cases: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (w, h) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let (pa, pb) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let a = BinaryMask { width: w, height: h, data: (0..w * h).map(|_| rng.gen_bool(pa) as u8).collect() };
        let b = BinaryMask { width: w, height: h, data: (0..w * h).map(|_| rng.gen_bool(pb) as u8).collect() };
        let sa: BTreeSet<usize> = (0..w * h).filter(|&i| a.data[i] == 1).collect();
        let sb: BTreeSet<usize> = (0..w * h).filter(|&i| b.data[i] == 1).collect();
        let union = sa.union(&sb).count();
        let want = if union == 0 { 1.0 } else { sa.intersection(&sb).count() as f64 / union as f64 };
        worst = worst.max((change_iou(&a, &b).unwrap() - want).abs());
    }
    let empty = BinaryMask::new(8, 8);
    let empty_iou = change_iou(&empty, &empty).unwrap();
    vec![
        Check::at_most("iou_vs_set_arithmetic", worst, 1e-15, format!("{cases} random mask pairs")),
        Check::at_most("iou_empty_empty_is_one", (empty_iou - 1.0).abs(), 0.0, "empty/empty convention".into()),
    ]
}

fn oracle_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Recomputes every aggregate from rows with separate binning code and
/// reports the number of disagreeing fields; equality is exact.
pub fn aggregate_mismatches(rows: &[EvalRow], aggregates: &[Aggregate], strata: &StrataConfig) -> usize {
    let mut rows: Vec<&EvalRow> = rows.iter().collect();
    rows.sort_by_key(|r| r.pair_id);
    let mut groups: BTreeMap<String, Vec<&EvalRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry("all".into()).or_default().push(r);
        let nb = strata.nqd_bins.iter().enumerate().find(|(i, (lo, hi))| r.nqd <= *hi && (r.nqd > *lo || (*i == 0 && r.nqd == *lo)));
        let db = strata.diff_bins.iter().find(|(lo, hi)| r.diff_count >= *lo && r.diff_count <= *hi);
        let nn = nb.map(|(_, (lo, hi))| format!("nqd:{lo:.1}-{hi:.1}"));
        let dn = db.map(|(lo, hi)| format!("diff:{lo}-{hi}"));
        if let Some(n) = &nn {
            groups.entry(n.clone()).or_default().push(r);
        }
        if let Some(d) = &dn {
            groups.entry(d.clone()).or_default().push(r);
        }
        if let (Some(n), Some(d)) = (&nn, &dn) {
            groups.entry(format!("{n}|{d}")).or_default().push(r);
        }
    }
    let mut bad = 0;
    let mut seen = 0;
    for a in aggregates {
        let members = groups.get(&a.stratum).map(Vec::as_slice).unwrap_or(&[]);
        let vals: Vec<f64> = members
            .iter()
            .filter_map(|r| match a.metric {
                Metric::Iou => Some(r.iou),
                Metric::AnchorOrigin => r.iou_anchor_origin,
                Metric::SampleOrigin => r.iou_sample_origin,
            })
            .collect();
        bad += usize::from(vals.len() != a.count);
        match (&a.summary, vals.is_empty()) {
            (None, true) => {}
            (Some(s), false) => {
                let mut sorted = vals.clone();
                sorted.sort_by(f64::total_cmp);
                let (q1, med, q3) = (oracle_quantile(&sorted, 0.25), oracle_quantile(&sorted, 0.5), oracle_quantile(&sorted, 0.75));
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let iqr = q3 - q1;
                let lo = sorted.iter().copied().filter(|&v| v >= q1 - 1.5 * iqr).fold(f64::INFINITY, f64::min);
                let hi = sorted.iter().copied().filter(|&v| v <= q3 + 1.5 * iqr).fold(f64::NEG_INFINITY, f64::max);
                let want = [mean, q1, med, q3, lo, hi];
                let got = [s.mean, s.q1, s.median, s.q3, s.whisker_lo, s.whisker_hi];
                bad += want.iter().zip(&got).filter(|(w, g)| w.to_bits() != g.to_bits()).count();
            }
            _ => bad += 1,
        }
        seen += 1;
    }
    // every non-empty group must be reported
    let reported: BTreeSet<&str> = aggregates.iter().map(|a| a.stratum.as_str()).collect();
    bad += groups.keys().filter(|k| !reported.contains(k.as_str())).count();
    bad + usize::from(seen == 0)
}

/// Parses `aggregates.csv` as written by the report emitter.
pub fn parse_aggregates_csv(text: &str) -> Result<Vec<Aggregate>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(sdn_core::eval::AGGREGATES_HEADER) {
        return Err("aggregates header mismatch".into());
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(format!("line {}: expected 9 fields, got {}", i + 2, f.len()));
            }
            let metric = Metric::ALL
                .into_iter()
                .find(|m| m.as_str() == f[1])
                .ok_or_else(|| format!("line {}: unknown metric {:?}", i + 2, f[1]))?;
            let count = f[2].parse().map_err(|e| format!("line {}: {e}", i + 2))?;
            let summary = if f[3].is_empty() {
                None
            } else {
                let v = f[3..]
                    .iter()
                    .map(|x| x.parse::<f64>().map_err(|e| format!("line {}: {e}", i + 2)))
                    .collect::<Result<Vec<_>, _>>()?;
                Some(sdn_core::eval::Summary { mean: v[0], q1: v[1], median: v[2], q3: v[3], whisker_lo: v[4], whisker_hi: v[5] })
            };
            Ok(Aggregate { stratum: f[0].to_string(), metric, count, summary })
        })
        .collect()
}

/// Aggregation on synthetic rows, through the CSV round trip.
pub fn aggregate_suite(seed: u64) -> Vec<Check> {
    let mut rng = pair_rng(seed, "oracle_rows", 0);
    let rows: Vec<EvalRow> = (0..300)
        .map(|i| {
            let has_a = rng.gen_bool(0.7);
            let has_b = rng.gen_bool(0.7);
            EvalRow {
                pair_id: (i * 7919) % 1000,
                split: "test_seen_pose".into(),
                nqd: rng.gen_range(0.0..0.4),
                diff_count: rng.gen_range(1..=10),
                only_in_a: 0,
                only_in_b: 0,
                iou: if rng.gen_bool(0.1) { 1.0 } else { rng.gen_range(0.0..1.0) },
                iou_anchor_origin: has_a.then(|| rng.gen_range(0.0..1.0)),
                iou_sample_origin: has_b.then(|| rng.gen_range(0.0..1.0)),
            }
        })
        .collect();
    let strata = StrataConfig::default();
    let text = sdn_core::eval::rows_csv(&rows);
    let parsed = sdn_core::eval::parse_rows_csv(&text).unwrap();
    let direct = aggregate(&rows, &strata);
    let reparsed = parse_aggregates_csv(&sdn_core::eval::aggregates_csv(&direct)).unwrap();
    let mismatches = aggregate_mismatches(&parsed, &reparsed, &strata) + usize::from(reparsed != direct);
    vec![Check::at_most("aggregates_from_csv_rows", mismatches as f64, 0.0, "fields differing from recomputation".into())]
}

/// Every oracle suite, as run by the `oracle` subcommand.
pub fn run_all(catalog: &PartCatalog, seed: u64) -> Vec<Check> {
    let mut out = nqd_suite(1000, seed);
    out.push(perturb_budget(10_000, seed));
    out.extend(state_diversity(catalog, 10_000, seed));
    let pairs = oracle_pairs(catalog, 100, seed);
    out.extend(change_mask_suite(catalog, &pairs, seed));
    out.extend(attention_suite(seed));
    out.extend(iou_suite(500, seed));
    out.extend(aggregate_suite(seed));
    out
}
