//! Central-difference gradient checks in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::NnError;

/// Builds a graph from the input leaves and returns a (non-scalar) output.
pub type OpClosure<'f> = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var, NnError> + 'f;

#[derive(Debug, Clone, PartialEq)]
pub struct InputCheck {
    pub shape: Vec<usize>,
    /// Largest relative error over random directional derivatives.
    pub directional: f64,
    /// Largest coordinate error relative to the gradient's max magnitude.
    pub coordinate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub inputs: Vec<InputCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Scalar loss `Σ r ⊙ op(inputs)` with a fixed random projection `r`, so
/// the check covers the full Jacobian of the op.
fn eval_loss(op: &OpClosure<'_>, inputs: &[(Vec<usize>, Vec<f64>)], proj: &mut Option<Vec<f64>>, seed: u64) -> Result<(f64, Vec<Vec<f64>>), NnError> {
    let mut t = Tape::<f64>::new();
    let vars = inputs.iter().map(|(s, v)| t.input(s, v.clone())).collect::<Result<Vec<_>, _>>()?;
    let out = op(&mut t, &vars)?;
    let n = t.value(out).len();
    let r = proj.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    });
    let loss = if t.shape(out).is_empty() { out } else { t.weighted_sum(out, r.clone())? };
    let value = t.value(loss)[0];
    if !value.is_finite() {
        return Err(NnError::Numerical(format!("non-finite loss {value}")));
    }
    let mut g = t.backward(loss);
    let grads = vars.iter().map(|&v| g.take(v).unwrap_or_else(|| vec![0.0; t.value(v).len()])).collect();
    Ok((value, grads))
}

/// Checks analytic gradients of `op` at the given inputs.
///
/// Every coordinate up to `max_coords` per input is probed (a deterministic
/// subset beyond that), plus three random directions per input.
pub fn grad_check(
    name: &str,
    op: &OpClosure<'_>,
    inputs: &[(Vec<usize>, Vec<f64>)],
    h: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradReport, NnError> {
    const MAX_COORDS: usize = 256;
    let mut proj = None;
    let (_, analytic) = eval_loss(op, inputs, &mut proj, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::with_capacity(inputs.len());
    for (idx, (shape, data)) in inputs.iter().enumerate() {
        let ga = &analytic[idx];
        let mut perturbed = |delta: &dyn Fn(usize) -> f64| -> Result<f64, NnError> {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            for i in 0..data.len() {
                let d = delta(i);
                plus[idx].1[i] += h * d;
                minus[idx].1[i] -= h * d;
            }
            let lp = eval_loss(op, &plus, &mut proj, seed)?.0;
            let lm = eval_loss(op, &minus, &mut proj, seed)?.0;
            Ok((lp - lm) / (2.0 * h))
        };

        let mut directional: f64 = 0.0;
        for _ in 0..3 {
            let dir: Vec<f64> = (0..data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let num = perturbed(&|i| dir[i])?;
            let ana: f64 = ga.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let denom = ana.abs().max(num.abs()).max(1e-10);
            directional = directional.max((ana - num).abs() / denom);
        }

        let step = data.len().div_ceil(MAX_COORDS).max(1);
        let gmax = ga.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut coord_err: f64 = 0.0;
        let mut nmax: f64 = 0.0;
        for i in (0..data.len()).step_by(step) {
            let num = perturbed(&|j| if j == i { 1.0 } else { 0.0 })?;
            nmax = nmax.max(num.abs());
            coord_err = coord_err.max((ga[i] - num).abs());
        }
        let coordinate = coord_err / gmax.max(nmax).max(1e-10);
        checks.push(InputCheck { shape: shape.clone(), directional, coordinate });
    }
    let max_rel_error = checks.iter().map(|c| c.directional.max(c.coordinate)).fold(0.0, f64::max);
    Ok(GradReport { name: name.to_string(), inputs: checks, max_rel_error, tolerance })
}

/// Deterministic uniform values in `[lo, hi)`.
pub fn random_values(len: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values with magnitude in `[margin, 1)` and random sign, keeping ReLU and
/// max-pool probes away from their kinks.
pub fn values_away_from_zero(len: usize, margin: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let m = rng.gen_range(margin..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Gradient checks for every differentiable op, as run by the CLI and the
/// acceptance suite.
pub fn standard_suite(tolerance: f64) -> Result<Vec<GradReport>, NnError> {
    standard_suite_seeded(tolerance, 0)
}

/// [`standard_suite`] with inputs drawn from streams offset by `base_seed`.
pub fn standard_suite_seeded(tolerance: f64, base_seed: u64) -> Result<Vec<GradReport>, NnError> {
    let h = 1e-5;
    let shp = |s: &[usize]| s.to_vec();
    let k = |seed: u64| base_seed.wrapping_mul(1_000_003).wrapping_add(seed);
    let x = |s: &[usize], seed| (shp(s), random_values(s.iter().product(), -1.0, 1.0, k(seed)));
    let mut out = Vec::new();
    let mut run = |name: &str, op: &OpClosure<'_>, inputs: Vec<(Vec<usize>, Vec<f64>)>| -> Result<(), NnError> {
        out.push(grad_check(name, op, &inputs, h, tolerance, name.len() as u64)?);
        Ok(())
    };

    run("conv2d_3x3_s1", &|t, v| t.conv2d(v[0], v[1], 1), vec![x(&[2, 6, 6], 1), x(&[3, 2, 3, 3], 2)])?;
    run("conv2d_3x3_s2", &|t, v| t.conv2d(v[0], v[1], 2), vec![x(&[2, 6, 6], 3), x(&[3, 2, 3, 3], 4)])?;
    run("conv2d_1x1", &|t, v| t.conv2d(v[0], v[1], 1), vec![x(&[3, 4, 4], 5), x(&[2, 3, 1, 1], 6)])?;
    run("add_bias", &|t, v| t.add_bias(v[0], v[1]), vec![x(&[3, 4, 4], 7), x(&[3], 8)])?;
    run("relu", &|t, v| Ok(t.relu(v[0])), vec![(shp(&[2, 4, 4]), values_away_from_zero(32, 0.1, k(9)))])?;
    run("elu_plus_one", &|t, v| Ok(t.phi(v[0])), vec![(shp(&[2, 4, 4]), values_away_from_zero(32, 0.1, k(10)))])?;
    run("maxpool2", &|t, v| t.maxpool2(v[0]), vec![x(&[2, 4, 6], 11)])?;
    run("upsample2", &|t, v| t.upsample2(v[0]), vec![x(&[2, 3, 3], 12)])?;
    run("concat", &|t, v| t.concat(v[0], v[1]), vec![x(&[2, 3, 3], 13), x(&[1, 3, 3], 14)])?;
    run("add", &|t, v| t.add(v[0], v[1]), vec![x(&[2, 3, 3], 15), x(&[2, 3, 3], 16)])?;
    let target: Vec<u8> = (0..12).map(|i| (i % 3 == 0) as u8).collect();
    run("softmax_ce", &|t, v| t.softmax_ce(v[0], &target), vec![x(&[2, 3, 4], 17)])?;
    run("gca", &|t, v| t.gca(v[0], v[1]), vec![x(&[4, 3, 4], 18), x(&[4, 3, 4], 19)])?;
    run("lca_w3", &|t, v| t.lca(v[0], v[1], 3), vec![x(&[4, 4, 5], 20), x(&[4, 4, 5], 21)])?;
    run("lca_w5", &|t, v| t.lca(v[0], v[1], 5), vec![x(&[3, 5, 5], 22), x(&[3, 5, 5], 23)])?;
    run(
        "linear_attention",
        &|t, v| {
            let q = t.phi(v[0]);
            let k = t.phi(v[1]);
            t.linear_attention(q, k, v[2], 2)
        },
        vec![x(&[4, 3, 3], 24), x(&[4, 3, 3], 25), x(&[4, 3, 3], 26)],
    )?;
    run(
        "linear_msa",
        &|t, v| {
            let msa = crate::model::MsaParamsRef { wq: v[1], wk: v[2], wv: v[3], wo: v[4] };
            crate::model::linear_msa(t, v[0], &msa, 2, true)
        },
        vec![x(&[4, 3, 3], 27), x(&[4, 4, 1, 1], 28), x(&[4, 4, 1, 1], 29), x(&[4, 4, 1, 1], 30), x(&[4, 4, 1, 1], 31)],
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        let inputs = vec![(vec![3, 4, 4], random_values(48, -1.0, 1.0, 1)), (vec![2, 3, 1, 1], random_values(6, -1.0, 1.0, 2))];
        let r = grad_check("conv1x1", &|t, v| t.conv2d(v[0], v[1], 1), &inputs, 1e-5, 1e-8, 3).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // ReLU probed across its kink with a huge step is not smooth; the
        // checker must notice.
        let inputs = vec![(vec![1, 1, 4], vec![-0.01, 0.02, -0.03, 0.04])];
        let r = grad_check("relu_kink", &|t, v| Ok(t.relu(v[0])), &inputs, 0.1, 1e-4, 1).unwrap();
        assert!(!r.passed());
    }
}
