//! Finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Maximum over checked tensors of the relative gradient error.
    pub max_rel_error: f32,
    /// `(tensor name, relative error)` for every checked parameter or input.
    pub per_tensor: Vec<(String, f32)>,
}

/// Options for [`finite_diff_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Initial step; Ridders' method shrinks it from there.
    pub eps: f32,
    /// Coordinates probed per tensor; tensors at or below this size are probed fully.
    pub probes_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 2e-2,
            probes_per_tensor: 24,
            seed: 0,
        }
    }
}

/// Compare the tape's analytic gradients with numerical derivatives.
///
/// Each probed coordinate is differentiated with Ridders' method: central
/// differences at steps shrinking from `eps`, Richardson-extrapolated, keeping
/// the estimate with the smallest error estimate. This balances truncation
/// against float32 rounding per coordinate.
///
/// `graph` must build a scalar from the trainable parameters in `store` and the
/// differentiable `inputs`. For each trainable parameter and each input, a set of
/// coordinates is probed and the error is `‖analytic − numeric‖ / (‖numeric‖ + 1e-8)`
/// over those coordinates.
pub fn finite_diff_check<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    opts: GradCheckOptions,
    graph: F,
) -> Result<GradCheckReport>
where
    F: for<'s> Fn(&mut Tape<'s>, &'s ParamStore, &[Var]) -> Result<Var>,
{
    let eval = |params: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let loss = graph(&mut tape, params, &vars)?;
        Ok(tape.value(loss).item() as f64)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = graph(&mut tape, store, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per_tensor = Vec::new();
    let eps = opts.eps as f64;

    let mut work = store.clone();
    let names: Vec<String> = store
        .names()
        .filter(|n| store.is_trainable(n))
        .map(str::to_string)
        .collect();
    for name in names {
        let n = store.get(&name).unwrap().len();
        let coords = probe_coords(n, opts.probes_per_tensor, &mut rng);
        let analytic = grads.param(&name);
        let mut num = Vec::with_capacity(coords.len());
        let mut ana = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = work.get(&name).unwrap().data()[c];
            let d = ridders(orig, eps, |x| {
                work.get_mut(&name).unwrap().data_mut()[c] = x;
                eval(&work, inputs)
            })?;
            work.get_mut(&name).unwrap().data_mut()[c] = orig;
            num.push(d);
            ana.push(analytic.map_or(0.0, |g| g.data()[c] as f64));
        }
        per_tensor.push((name, relative_error(&ana, &num)));
    }

    let mut work_inputs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let coords = probe_coords(n, opts.probes_per_tensor, &mut rng);
        let analytic = grads.wrt(*v);
        let mut num = Vec::with_capacity(coords.len());
        let mut ana = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = work_inputs[i].data()[c];
            let d = ridders(orig, eps, |x| {
                work_inputs[i].data_mut()[c] = x;
                eval(store, &work_inputs)
            })?;
            work_inputs[i].data_mut()[c] = orig;
            num.push(d);
            ana.push(analytic.map_or(0.0, |g| g.data()[c] as f64));
        }
        per_tensor.push((format!("input[{i}]"), relative_error(&ana, &num)));
    }

    let max_rel_error = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f32::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_tensor,
    })
}

const SHRINK: f64 = 1.4;
const TABLE: usize = 8;

/// Derivative at `x` of `f` evaluated at float32 points, by Ridders' method.
fn ridders(x: f32, h0: f64, mut f: impl FnMut(f32) -> Result<f64>) -> Result<f64> {
    let mut central = |h: f64| -> Result<f64> {
        let (up, down) = ((x as f64 + h) as f32, (x as f64 - h) as f32);
        Ok((f(up)? - f(down)?) / (up as f64 - down as f64))
    };
    let mut table = [[0.0f64; TABLE]; TABLE];
    let mut h = h0;
    table[0][0] = central(h)?;
    let mut best = table[0][0];
    let mut err = f64::INFINITY;
    for i in 1..TABLE {
        h /= SHRINK;
        table[0][i] = central(h)?;
        let mut fac = SHRINK * SHRINK;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let e = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    Ok(best)
}

fn probe_coords(n: usize, probes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= probes {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, probes).into_vec();
        v.sort_unstable();
        v
    }
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f32 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    (diff / (scale + 1e-8)) as f32
}

/// Scalar `Σ out ⊙ c` with a seeded Gaussian `c`, normalised so the scalar is O(1).
pub fn random_projection<'s>(tape: &mut Tape<'s>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(out).shape().to_vec();
    let n = tape.value(out).len().max(1);
    let c = Tensor::randn(&shape, 1.0 / (n as f32).sqrt(), &mut rng);
    tape.dot_const(out, c)
}
