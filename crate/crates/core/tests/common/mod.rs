#![allow(dead_code)]

pub mod suite;

use ace_core::tensor::{Graph, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central finite-difference step.
pub const EPS: f64 = 1e-5;

/// Norm-wise relative error `|a - n| / max(|a| + |n|, tiny)`.
pub fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

/// Compare tape gradients of a scalar function against central differences
/// for every input. Returns the worst relative error.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.input(x.clone())).collect();
        let out = f(&mut t, &vars);
        t.value(&out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let mut worst: f64 = 0.0;
    for (idx, x) in inputs.iter().enumerate() {
        let analytic = tape.grad_of(out, vars[idx]);
        let mut numeric = vec![0.0; x.len()];
        for j in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[idx].data_mut()[j] += EPS;
            let up = eval(&xs);
            xs[idx].data_mut()[j] -= 2.0 * EPS;
            let down = eval(&xs);
            numeric[j] = (up - down) / (2.0 * EPS);
        }
        worst = worst.max(rel_error(analytic.data(), &numeric));
    }
    worst
}

/// Reduce any output to a scalar with a fixed random weighting so every
/// entry contributes to the checked gradient.
pub fn weighted_sum(t: &mut Tape, out: &Var, seed: u64) -> Var {
    let (r, c) = t.value(out).shape();
    let w = t.constant(Tensor::randn(r, c, 1.0, &mut rng(seed)));
    let p = t.mul(out, &w);
    t.sum(&p)
}
