//! Feature-registration kernels on channel-major `[C, N]` maps (`N = H·W`).
//!
//! Each kernel has a forward pass returning the state its backward pass
//! needs, and a backward pass accumulating into caller-provided gradients.
//! The `reference` module holds slow, direct implementations used as oracles.

use crate::scalar::Scalar;

/// Softmax over `row` in place, with max subtraction.
fn softmax_inplace<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Global cross-attention. Returns `(att [C,N], P [N,N])` where row `i` of
/// `P` is the softmax over all keys for query `i`.
pub fn gca_forward<T: Scalar>(f1: &[T], f2: &[T], c: usize, n: usize) -> (Vec<T>, Vec<T>) {
    let scale = T::one() / T::c(c as f64).sqrt();
    let mut p = vec![T::zero(); n * n];
    T::gemm(n, c, n, scale, f1, true, f2, false, T::zero(), &mut p);
    for row in p.chunks_exact_mut(n) {
        softmax_inplace(row);
    }
    let mut att = vec![T::zero(); c * n];
    T::gemm(c, n, n, T::one(), f2, false, &p, true, T::zero(), &mut att);
    (att, p)
}

/// Backward of [`gca_forward`]; accumulates into `df1` and `df2`.
#[allow(clippy::too_many_arguments)]
pub fn gca_backward<T: Scalar>(f1: &[T], f2: &[T], p: &[T], datt: &[T], c: usize, n: usize, df1: &mut [T], df2: &mut [T]) {
    let scale = T::one() / T::c(c as f64).sqrt();
    let mut ds = vec![T::zero(); n * n];
    T::gemm(n, c, n, T::one(), datt, true, f2, false, T::zero(), &mut ds);
    T::gemm(c, n, n, T::one(), datt, false, p, false, T::one(), df2);
    softmax_backward_rows(p, &mut ds, n);
    T::gemm(c, n, n, scale, f2, false, &ds, true, T::one(), df1);
    T::gemm(c, n, n, scale, f1, false, &ds, false, T::one(), df2);
}

/// Turns `dP` into `dS` in place for row-wise softmax outputs `p`.
fn softmax_backward_rows<T: Scalar>(p: &[T], dp: &mut [T], width: usize) {
    for (pr, dr) in p.chunks_exact(width).zip(dp.chunks_exact_mut(width)) {
        let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
        for (d, &pv) in dr.iter_mut().zip(pr) {
            *d = pv * (*d - dot);
        }
    }
}

fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for col in 0..cols {
            out[col * rows + r] = x[r * cols + col];
        }
    }
    out
}

/// Clipped window bounds `[lo, hi)` along one axis.
#[inline]
fn span(center: usize, radius: usize, len: usize) -> (usize, usize) {
    (center.saturating_sub(radius), (center + radius + 1).min(len))
}

/// Local cross-attention with an odd `window`. Returns `(att [C,N], P)`
/// where `P` is `[N, window²]`; entries outside the clipped window are 0.
pub fn lca_forward<T: Scalar>(f1: &[T], f2: &[T], c: usize, h: usize, w: usize, window: usize) -> (Vec<T>, Vec<T>) {
    let n = h * w;
    let r = window / 2;
    let ww = window * window;
    let scale = T::one() / T::c(c as f64).sqrt();
    let (q, k) = (transpose(f1, c, n), transpose(f2, c, n));
    let mut p = vec![T::zero(); n * ww];
    let mut out_t = vec![T::zero(); n * c];
    let mut logits = Vec::with_capacity(ww);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let qi = &q[i * c..(i + 1) * c];
            let (y0, y1) = span(y, r, h);
            let (x0, x1) = span(x, r, w);
            logits.clear();
            for yy in y0..y1 {
                for xx in x0..x1 {
                    let kj = &k[(yy * w + xx) * c..][..c];
                    logits.push(qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale);
                }
            }
            softmax_inplace(&mut logits);
            let prow = &mut p[i * ww..(i + 1) * ww];
            let orow = &mut out_t[i * c..(i + 1) * c];
            let mut t = 0;
            for yy in y0..y1 {
                for xx in x0..x1 {
                    let wt = logits[t];
                    prow[(yy + r - y) * window + (xx + r - x)] = wt;
                    let kj = &k[(yy * w + xx) * c..][..c];
                    for (o, &v) in orow.iter_mut().zip(kj) {
                        *o += wt * v;
                    }
                    t += 1;
                }
            }
        }
    }
    (transpose(&out_t, n, c), p)
}

/// Backward of [`lca_forward`].
#[allow(clippy::too_many_arguments)]
pub fn lca_backward<T: Scalar>(
    f1: &[T],
    f2: &[T],
    p: &[T],
    datt: &[T],
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    df1: &mut [T],
    df2: &mut [T],
) {
    let n = h * w;
    let r = window / 2;
    let ww = window * window;
    let scale = T::one() / T::c(c as f64).sqrt();
    let (q, k, da) = (transpose(f1, c, n), transpose(f2, c, n), transpose(datt, c, n));
    let mut dq = vec![T::zero(); n * c];
    let mut dk = vec![T::zero(); n * c];
    let mut ds = vec![T::zero(); ww];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let prow = &p[i * ww..(i + 1) * ww];
            let dai = &da[i * c..(i + 1) * c];
            let (y0, y1) = span(y, r, h);
            let (x0, x1) = span(x, r, w);
            let mut dot = T::zero();
            for yy in y0..y1 {
                for xx in x0..x1 {
                    let s = (yy + r - y) * window + (xx + r - x);
                    let kj = &k[(yy * w + xx) * c..][..c];
                    ds[s] = dai.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                    dot += ds[s] * prow[s];
                }
            }
            for yy in y0..y1 {
                for xx in x0..x1 {
                    let j = yy * w + xx;
                    let s = (yy + r - y) * window + (xx + r - x);
                    let pw = prow[s];
                    let g = pw * (ds[s] - dot) * scale;
                    for ch in 0..c {
                        dq[i * c + ch] += g * k[j * c + ch];
                        dk[j * c + ch] += g * q[i * c + ch] + pw * dai[ch];
                    }
                }
            }
        }
    }
    for (d, v) in df1.iter_mut().zip(transpose(&dq, n, c)) {
        *d += v;
    }
    for (d, v) in df2.iter_mut().zip(transpose(&dk, n, c)) {
        *d += v;
    }
}

/// Floor applied to the linear-attention normalizer.
pub const LINEAR_DEN_FLOOR: f64 = 1e-30;

/// `elu(u) + 1`: `u + 1` for `u ≥ 0`, `exp(u)` otherwise.
#[inline]
pub fn phi<T: Scalar>(u: T) -> T {
    if u >= T::zero() {
        u + T::one()
    } else {
        u.exp()
    }
}

#[inline]
pub fn phi_grad<T: Scalar>(u: T) -> T {
    if u >= T::zero() {
        T::one()
    } else {
        u.exp()
    }
}

/// Saved state of [`linear_attention_forward`].
#[derive(Debug, Clone)]
pub struct LinearAttnState<T> {
    pub kv: Vec<T>,
    pub z: Vec<T>,
    pub den: Vec<T>,
    pub out: Vec<T>,
}

/// Kernelized attention core on already feature-mapped `q`, `k` and values
/// `v`, all `[C, N]`, with `heads` equal channel groups. Per head, output
/// column `i` is `(Σ_j k_j v_jᵀ)ᵀ q_i / (q_i · Σ_j k_j)`.
pub fn linear_attention_forward<T: Scalar>(q: &[T], k: &[T], v: &[T], c: usize, n: usize, heads: usize) -> LinearAttnState<T> {
    let d = c / heads;
    let floor = T::c(LINEAR_DEN_FLOOR);
    let mut kv = vec![T::zero(); heads * d * d];
    let mut z = vec![T::zero(); c];
    let mut den = vec![T::zero(); heads * n];
    let mut out = vec![T::zero(); c * n];
    for hd in 0..heads {
        let rows = hd * d * n..(hd + 1) * d * n;
        let (qh, kh, vh) = (&q[rows.clone()], &k[rows.clone()], &v[rows.clone()]);
        let kvh = &mut kv[hd * d * d..(hd + 1) * d * d];
        T::gemm(d, n, d, T::one(), kh, false, vh, true, T::zero(), kvh);
        let zh = &mut z[hd * d..(hd + 1) * d];
        for (a, row) in zh.iter_mut().zip(kh.chunks_exact(n)) {
            *a = row.iter().copied().sum();
        }
        let oh = &mut out[rows];
        T::gemm(d, d, n, T::one(), kvh, true, qh, false, T::zero(), oh);
        let denh = &mut den[hd * n..(hd + 1) * n];
        for (a, row) in zh.iter().zip(qh.chunks_exact(n)) {
            for (dn, &qv) in denh.iter_mut().zip(row) {
                *dn += *a * qv;
            }
        }
        for dn in denh.iter_mut() {
            *dn = dn.max(floor);
        }
        for row in oh.chunks_exact_mut(n) {
            for (o, &dn) in row.iter_mut().zip(denh.iter()) {
                *o = *o / dn;
            }
        }
    }
    LinearAttnState { kv, z, den, out }
}

/// Backward of [`linear_attention_forward`].
#[allow(clippy::too_many_arguments)]
pub fn linear_attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    st: &LinearAttnState<T>,
    dout: &[T],
    c: usize,
    n: usize,
    heads: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let d = c / heads;
    let mut dnum = vec![T::zero(); d * n];
    let mut dden = vec![T::zero(); n];
    let mut dkv = vec![T::zero(); d * d];
    for hd in 0..heads {
        let rows = hd * d * n..(hd + 1) * d * n;
        let (qh, kh, vh) = (&q[rows.clone()], &k[rows.clone()], &v[rows.clone()]);
        let (oh, doh) = (&st.out[rows.clone()], &dout[rows.clone()]);
        let kvh = &st.kv[hd * d * d..(hd + 1) * d * d];
        let zh = &st.z[hd * d..(hd + 1) * d];
        let denh = &st.den[hd * n..(hd + 1) * n];
        dden.iter_mut().for_each(|x| *x = T::zero());
        for ((dn, o), g) in dnum.chunks_exact_mut(n).zip(oh.chunks_exact(n)).zip(doh.chunks_exact(n)) {
            for i in 0..n {
                dn[i] = g[i] / denh[i];
                dden[i] -= g[i] * o[i] / denh[i];
            }
        }
        let dqh = &mut dq[rows.clone()];
        T::gemm(d, d, n, T::one(), kvh, false, &dnum, false, T::one(), dqh);
        for (row, &zk) in dqh.chunks_exact_mut(n).zip(zh) {
            for (x, &g) in row.iter_mut().zip(&dden) {
                *x += zk * g;
            }
        }
        T::gemm(d, n, d, T::one(), qh, false, &dnum, true, T::zero(), &mut dkv);
        let dkh = &mut dk[rows.clone()];
        T::gemm(d, d, n, T::one(), &dkv, false, vh, false, T::one(), dkh);
        for (row, qrow) in dkh.chunks_exact_mut(n).zip(qh.chunks_exact(n)) {
            let dz: T = qrow.iter().zip(&dden).map(|(&a, &b)| a * b).sum();
            for x in row.iter_mut() {
                *x += dz;
            }
        }
        T::gemm(d, d, n, T::one(), &dkv, true, kh, false, T::one(), &mut dv[rows]);
    }
}

/// 2D sinusoidal encoding `[C, H·W]`: channel quarters hold sin/cos of the
/// x coordinate and sin/cos of the y coordinate over `C/4` frequencies.
pub fn positional_encoding<T: Scalar>(c: usize, h: usize, w: usize) -> Vec<T> {
    let bands = c / 4;
    let mut out = vec![T::zero(); c * h * w];
    for b in 0..bands {
        let freq = 1.0 / 10000f64.powf(b as f64 / bands.max(1) as f64);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (ax, ay) = (x as f64 * freq, y as f64 * freq);
                out[b * h * w + i] = T::c(ax.sin());
                out[(bands + b) * h * w + i] = T::c(ax.cos());
                out[(2 * bands + b) * h * w + i] = T::c(ay.sin());
                out[(3 * bands + b) * h * w + i] = T::c(ay.cos());
            }
        }
    }
    out
}

/// Direct, loop-based implementations used as independent oracles.
pub mod reference {
    /// Global cross-attention by explicit double loop, `[C, N]` in and out.
    pub fn gca(f1: &[f64], f2: &[f64], c: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; c * n];
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..c).map(|ch| f1[ch * n + i] * f2[ch * n + j]).sum::<f64>() / (c as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for j in 0..n {
                for ch in 0..c {
                    out[ch * n + i] += e[j] / s * f2[ch * n + j];
                }
            }
        }
        out
    }

    /// Linear attention through the explicit `N x N` kernel matrix.
    pub fn linear_attention_quadratic(q: &[f64], k: &[f64], v: &[f64], c: usize, n: usize, heads: usize) -> Vec<f64> {
        let d = c / heads;
        let mut out = vec![0.0; c * n];
        for h in 0..heads {
            for i in 0..n {
                let a: Vec<f64> =
                    (0..n).map(|j| (0..d).map(|t| q[(h * d + t) * n + i] * k[(h * d + t) * n + j]).sum()).collect();
                let s: f64 = a.iter().sum();
                for t in 0..d {
                    let num: f64 = (0..n).map(|j| a[j] * v[(h * d + t) * n + j]).sum();
                    out[(h * d + t) * n + i] = num / s;
                }
            }
        }
        out
    }

    /// Softmax attention with the same inputs, for contrast with the
    /// kernelized form.
    pub fn softmax_attention(q: &[f64], k: &[f64], v: &[f64], c: usize, n: usize, heads: usize) -> Vec<f64> {
        let d = c / heads;
        let mut out = vec![0.0; c * n];
        for h in 0..heads {
            for i in 0..n {
                let a: Vec<f64> = (0..n)
                    .map(|j| ((0..d).map(|t| q[(h * d + t) * n + i] * k[(h * d + t) * n + j]).sum::<f64>()).exp())
                    .collect();
                let s: f64 = a.iter().sum();
                for t in 0..d {
                    out[(h * d + t) * n + i] = (0..n).map(|j| a[j] * v[(h * d + t) * n + j]).sum::<f64>() / s;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(len: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn gca_matches_reference() {
        let (c, n) = (6, 20);
        let (f1, f2) = (rand_vec(c * n, 1), rand_vec(c * n, 2));
        let (att, p) = gca_forward(&f1, &f2, c, n);
        assert!(max_diff(&att, &reference::gca(&f1, &f2, c, n)) < 1e-12);
        for row in p.chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn lca_window_one_and_border_support() {
        let (c, h, w) = (3, 8, 8);
        let (f1, f2) = (rand_vec(c * h * w, 3), rand_vec(c * h * w, 4));
        let (att, _) = lca_forward(&f1, &f2, c, h, w, 1);
        assert!(max_diff(&att, &f2) < 1e-15);
        let (_, p) = lca_forward(&f1, &f2, c, h, w, 5);
        assert_eq!(p[..25].iter().filter(|&&v| v > 0.0).count(), 9);
    }

    #[test]
    fn lca_full_window_is_gca() {
        let (c, h, w) = (4, 5, 7);
        let (f1, f2) = (rand_vec(c * h * w, 5), rand_vec(c * h * w, 6));
        let (a, _) = lca_forward(&f1, &f2, c, h, w, 2 * 7 - 1);
        let (g, _) = gca_forward(&f1, &f2, c, h * w);
        assert!(max_diff(&a, &g) < 1e-12);
    }

    #[test]
    fn linear_attention_matches_quadratic_but_not_softmax() {
        let (c, n, heads) = (8, 30, 2);
        let q: Vec<f64> = rand_vec(c * n, 7).into_iter().map(phi).collect();
        let k: Vec<f64> = rand_vec(c * n, 8).into_iter().map(phi).collect();
        let v = rand_vec(c * n, 9);
        let st = linear_attention_forward(&q, &k, &v, c, n, heads);
        let quad = reference::linear_attention_quadratic(&q, &k, &v, c, n, heads);
        assert!(max_diff(&st.out, &quad) < 1e-12);
        assert!(max_diff(&st.out, &reference::softmax_attention(&q, &k, &v, c, n, heads)) > 1e-3);
    }

    #[test]
    fn positional_encoding_layout() {
        let pe: Vec<f64> = positional_encoding(8, 2, 3);
        // Band 0 has unit frequency: sin(x) over the first row.
        assert_eq!(pe[1], 1f64.sin());
        assert_eq!(pe[2 * 6 + 1], 1f64.cos());
        assert_eq!(pe[4 * 6 + 3], 1f64.sin());
    }
}
