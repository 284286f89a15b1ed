use std::collections::HashSet;

use sdn_core::assembly::PartCatalog;
use sdn_core::dataset::{generate_pair, GenConfig, PairRecord};
use sdn_core::par::Execution;
use sdn_nn::attention::gca_forward;
use sdn_nn::checkpoint;
use sdn_nn::gradcheck::random_values;
use sdn_nn::{ArchConfig, Mechanism, Model, NnError, TrainConfig};

fn pairs(n: u64) -> Vec<PairRecord> {
    let cat = PartCatalog::default_catalog();
    let cfg = GenConfig::train(n as usize, 3);
    (0..n).map(|i| generate_pair(&cat, &cfg, i, &HashSet::new()).unwrap()).collect()
}

fn image(seed: u64) -> Vec<f32> {
    random_values(3 * 64 * 64, 0.0, 1.0, seed).into_iter().map(|v| v as f32).collect()
}

#[test]
fn gca_skip_is_invariant_to_permuting_sample_features() {
    let m = Model::<f64>::new(ArchConfig::desk(Mechanism::Gca), 2).unwrap();
    let a = random_values(3 * 64 * 64, 0.0, 1.0, 1);
    let b = random_values(3 * 64 * 64, 0.0, 1.0, 2);
    let g = m.graph(a, b).unwrap();
    let mut probed = 0;
    for probe in g.skips.iter().filter(|p| p.fused.is_some()) {
        let (c, n) = (g.tape.shape(probe.f2)[0], probe.resolution * probe.resolution);
        let f1 = g.tape.value(probe.f1);
        let f2 = g.tape.value(probe.f2);
        let perm: Vec<usize> = (0..n).rev().collect();
        let f2p: Vec<f64> = (0..c * n).map(|k| f2[(k / n) * n + perm[k % n]]).collect();
        let (permuted, _) = gca_forward(f1, &f2p, c, n);
        let fused = g.tape.value(probe.fused.unwrap());
        let err = fused.iter().zip(&permuted).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "resolution {}: {err}", probe.resolution);
        probed += 1;
    }
    assert_eq!(probed, 3);
}

#[test]
fn batch_forward_matches_single_forwards() {
    let m = Model::<f32>::new(ArchConfig::desk(Mechanism::Lca), 4).unwrap();
    let batch: Vec<(Vec<f32>, Vec<f32>)> = (0..3).map(|i| (image(10 + i), image(20 + i))).collect();
    for exec in [Execution::Sequential, Execution::available()] {
        let out = m.forward_batch(&batch, exec).unwrap();
        for ((a, s), o) in batch.iter().zip(&out) {
            let single = m.forward(a, s).unwrap();
            let err = single.iter().zip(o).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
            assert!(err < 1e-6);
        }
    }
}

#[test]
fn encoder_weights_are_shared_between_branches() {
    let m = Model::<f32>::new(ArchConfig::desk(Mechanism::Gca), 0).unwrap();
    let names: HashSet<&str> = m.params.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names.len(), m.params.len());
    assert!(names.iter().all(|n| !n.contains("sample") && !n.contains("anchor")));
    // Perturbing one encoder weight moves both branches' features.
    let g0 = m.graph(image(1), image(1)).unwrap();
    let p0 = &g0.skips[0];
    assert_eq!(g0.tape.value(p0.f1), g0.tape.value(p0.f2));
}

#[test]
fn mechanism_parameter_counts() {
    let count = |m| Model::<f32>::new(ArchConfig::desk(m), 0).unwrap().param_count();
    let gca = count(Mechanism::Gca);
    assert_eq!(gca, count(Mechanism::Lca));
    assert_eq!(gca, count(Mechanism::ConcatOnly));
    assert_eq!(count(Mechanism::GcaMsa) - gca, [32usize, 64, 128].iter().map(|c| 4 * c * c).sum::<usize>());
}

#[test]
fn attention_extraction_contract() {
    let rec = &pairs(1)[0];
    let (a, s) = (&rec.rasters.anchor_rgb, &rec.rasters.sample_rgb);
    let gca = Model::<f32>::new(ArchConfig::desk(Mechanism::Gca), 1).unwrap();
    for level in 0..3 {
        let map = gca.extract_attention(a, s, level, 31, 40).unwrap();
        assert!((map.weights.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert_eq!(map.heatmap.len(), 64 * 64);
        assert!(map.heatmap.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(map.heatmap.iter().any(|&v| v == 1.0));
    }
    assert_eq!(gca.extract_attention(a, s, 0, 0, 0).unwrap().resolution, 16);
    assert_eq!(gca.extract_attention(a, s, 2, 0, 0).unwrap().resolution, 4);

    let lca = Model::<f32>::new(ArchConfig::desk(Mechanism::Lca), 1).unwrap();
    // Level 1 is the 8x8 map with a 5x5 window; (32, 32) is its central cell.
    let map = lca.extract_attention(a, s, 1, 32, 32).unwrap();
    assert_eq!(map.resolution, 8);
    assert!(map.weights.iter().filter(|&&w| w != 0.0).count() <= 25);
    assert!((map.weights.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    let (cx, cy) = map.cell;
    for (k, &w) in map.weights.iter().enumerate() {
        let (x, y) = (k % 8, k / 8);
        if x.abs_diff(cx) > 2 || y.abs_diff(cy) > 2 {
            assert_eq!(w, 0.0);
        }
    }

    let concat = Model::<f32>::new(ArchConfig::desk(Mechanism::ConcatOnly), 1).unwrap();
    assert!(matches!(concat.extract_attention(a, s, 0, 1, 1), Err(NnError::Unsupported(_))));
    assert!(gca.extract_attention(a, s, 3, 1, 1).is_err());
    assert!(gca.extract_attention(a, s, 0, 64, 1).is_err());
}

#[test]
fn checkpoint_file_roundtrip_reproduces_forward() {
    let dir = tempfile::tempdir().unwrap();
    for mech in [Mechanism::Gca, Mechanism::Lca, Mechanism::GcaMsa, Mechanism::ConcatOnly] {
        let m = Model::<f32>::new(ArchConfig::desk(mech), 9).unwrap();
        let path = dir.path().join(format!("{}.ckpt", mech.as_str()));
        let cfg = TrainConfig { seed: 77, ..TrainConfig::default() };
        checkpoint::save(&path, &m, Some(&cfg), 12, None).unwrap();
        let ck = checkpoint::load::<f32>(&path).unwrap();
        assert_eq!(ck.model.arch, m.arch);
        assert_eq!(ck.epoch, 12);
        assert_eq!(ck.train.unwrap().seed, 77);
        let (a, s) = (image(5), image(6));
        assert_eq!(m.forward(&a, &s).unwrap(), ck.model.forward(&a, &s).unwrap());
    }
    let missing = dir.path().join("nope.ckpt");
    let err = checkpoint::load::<f32>(&missing).unwrap_err().to_string();
    assert!(err.contains("nope.ckpt"), "{err}");
}

#[test]
fn size_mismatch_is_rejected() {
    let m = Model::<f32>::new(ArchConfig::desk(Mechanism::Gca), 0).unwrap();
    assert!(m.forward(&vec![0.0; 3 * 32 * 32], &vec![0.0; 3 * 32 * 32]).is_err());
}
