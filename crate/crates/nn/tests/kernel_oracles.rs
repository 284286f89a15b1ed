use sdn_nn::attention::{gca_forward, lca_forward, linear_attention_forward, phi, reference};
use sdn_nn::gradcheck::random_values;

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct per-query softmax attention over all keys.
fn gca_double_loop(f1: &[f64], f2: &[f64], c: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * n];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| (0..c).map(|ch| f1[ch * n + i] * f2[ch * n + j]).sum::<f64>() / (c as f64).sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for ch in 0..c {
            out[ch * n + i] = (0..n).map(|j| e[j] / z * f2[ch * n + j]).sum();
        }
    }
    out
}

#[test]
fn gca_matches_double_loop() {
    for (c, h, w, seed) in [(4, 3, 5, 1), (8, 6, 6, 2), (16, 4, 4, 3)] {
        let n = h * w;
        let f1 = random_values(c * n, -2.0, 2.0, seed);
        let f2 = random_values(c * n, -2.0, 2.0, seed + 100);
        let (att, p) = gca_forward(&f1, &f2, c, n);
        assert!(max_abs(&att, &gca_double_loop(&f1, &f2, c, n)) < 1e-6);
        for row in p.chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn lca_full_window_equals_gca() {
    let (c, h, w) = (6, 5, 5);
    let f1 = random_values(c * h * w, -1.0, 1.0, 7);
    let f2 = random_values(c * h * w, -1.0, 1.0, 8);
    let (lca, _) = lca_forward(&f1, &f2, c, h, w, 9);
    assert!(max_abs(&lca, &gca_double_loop(&f1, &f2, c, h * w)) < 1e-6);
}

#[test]
fn lca_window_one_is_identity_on_f2() {
    let (c, h, w) = (5, 4, 7);
    let f1 = random_values(c * h * w, -3.0, 3.0, 9);
    let f2 = random_values(c * h * w, -3.0, 3.0, 10);
    let (lca, p) = lca_forward(&f1, &f2, c, h, w, 1);
    assert_eq!(lca, f2);
    assert!(p.iter().all(|&v| v == 1.0));
}

#[test]
fn lca_matches_windowed_double_loop() {
    let (c, h, w, win) = (4, 6, 5, 3);
    let n = h * w;
    let f1 = random_values(c * n, -1.0, 1.0, 11);
    let f2 = random_values(c * n, -1.0, 1.0, 12);
    let (lca, _) = lca_forward(&f1, &f2, c, h, w, win);
    let mut want = vec![0.0; c * n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let keys: Vec<usize> = (0..n)
                .filter(|&j| ((j / w) as isize - y as isize).abs() <= 1 && ((j % w) as isize - x as isize).abs() <= 1)
                .collect();
            let l: Vec<f64> = keys.iter().map(|&j| (0..c).map(|ch| f1[ch * n + i] * f2[ch * n + j]).sum::<f64>() / 2.0).collect();
            let z: f64 = l.iter().map(|v| v.exp()).sum();
            for ch in 0..c {
                want[ch * n + i] = keys.iter().zip(&l).map(|(&j, v)| v.exp() / z * f2[ch * n + j]).sum();
            }
        }
    }
    assert!(max_abs(&lca, &want) < 1e-9);
}

#[test]
fn gca_invariant_under_key_permutation() {
    let (c, n) = (8, 20);
    let f1 = random_values(c * n, -1.5, 1.5, 13);
    let f2 = random_values(c * n, -1.5, 1.5, 14);
    let perm: Vec<usize> = (0..n).map(|j| (j * 7 + 3) % n).collect();
    let mut f2p = vec![0.0; c * n];
    for ch in 0..c {
        for j in 0..n {
            f2p[ch * n + j] = f2[ch * n + perm[j]];
        }
    }
    let (a, _) = gca_forward(&f1, &f2, c, n);
    let (b, _) = gca_forward(&f1, &f2p, c, n);
    assert!(max_abs(&a, &b) < 1e-6);
}

/// Explicit `φ(q)·φ(k)` weights, normalized per query, per head.
fn linear_double_loop(q: &[f64], k: &[f64], v: &[f64], c: usize, n: usize, heads: usize) -> Vec<f64> {
    let d = c / heads;
    let mut out = vec![0.0; c * n];
    for hd in 0..heads {
        let ch = |i: usize| hd * d + i;
        for i in 0..n {
            let s: Vec<f64> = (0..n).map(|j| (0..d).map(|t| phi(q[ch(t) * n + i]) * phi(k[ch(t) * n + j])).sum()).collect();
            let z: f64 = s.iter().sum();
            for t in 0..d {
                out[ch(t) * n + i] = (0..n).map(|j| s[j] * v[ch(t) * n + j]).sum::<f64>() / z;
            }
        }
    }
    out
}

#[test]
fn linear_attention_matches_quadratic_expansion() {
    for (c, n, heads, seed) in [(8, 16, 2, 20), (12, 9, 3, 21), (4, 64, 1, 22)] {
        let q = random_values(c * n, -2.0, 2.0, seed);
        let k = random_values(c * n, -2.0, 2.0, seed + 1);
        let v = random_values(c * n, -2.0, 2.0, seed + 2);
        // the kernel consumes feature-mapped queries and keys
        let (pq, pk): (Vec<f64>, Vec<f64>) = (q.iter().map(|&x| phi(x)).collect(), k.iter().map(|&x| phi(x)).collect());
        let st = linear_attention_forward(&pq, &pk, &v, c, n, heads);
        let want = linear_double_loop(&q, &k, &v, c, n, heads);
        assert!(max_abs(&st.out, &want) < 1e-6);
        assert!(max_abs(&reference::linear_attention_quadratic(&pq, &pk, &v, c, n, heads), &want) < 1e-9);
        assert!(max_abs(&st.out, &reference::softmax_attention(&q, &k, &v, c, n, heads)) > 1e-3);
    }
}

#[test]
fn f32_kernels_track_f64() {
    let (c, n) = (8, 25);
    let f1 = random_values(c * n, -1.0, 1.0, 30);
    let f2 = random_values(c * n, -1.0, 1.0, 31);
    let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let (a64, _) = gca_forward(&f1, &f2, c, n);
    let (a32, _) = gca_forward(&to32(&f1), &to32(&f2), c, n);
    let back: Vec<f64> = a32.iter().map(|&x| x as f64).collect();
    assert!(max_abs(&a64, &back) < 1e-5);
}
