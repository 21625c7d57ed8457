//! Central finite-difference oracle for checking reverse-mode gradients.
//!
//! The oracle only ever evaluates the forward function; it never reads the
//! gradients recorded by the tape except to compare against them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Magnitude below which errors are measured absolutely rather than
/// relative to the gradient entry.
pub const REL_FLOOR: f64 = 1e-3;

/// Elementwise relative error `|a - b| / max(|a|, |b|, REL_FLOOR)`, maximised.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Uniform(-1, 1) tensor from a seed.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Central differences of a scalar function of `inputs`, one entry at a time.
pub fn numeric_gradients<F>(inputs: &[Tensor<f64>], f: F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward failed during finite differences");
        tape.value(out).item()
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut result = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            g.push((up - down) / (2.0 * STEP));
        }
        result.push(g);
    }
    result
}

/// Analytic gradients of `f` at `inputs` via one backward pass.
pub fn analytic_gradients<F>(inputs: &[Tensor<f64>], f: F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward failed");
    let grads = tape.backward(out).expect("backward failed");
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect()
}

/// Largest elementwise relative error between backward and finite-difference
/// gradients over all inputs.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let analytic = analytic_gradients(inputs, &f);
    let numeric = numeric_gradients(inputs, &f);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_rel_error(a, n))
        .fold(0.0, f64::max)
}
