//! Finite-difference oracle for the reverse-mode rules. Runs in `f64`:
//! central differences at `h = 1e-4` resolve ~11 significant digits, so any
//! real rule error dwarfs the truncation noise.

use super::{backward, no_grad, Tensor};
use crate::error::{Error, Result};

/// Default relative-error bound; loose enough for chained transcendentals,
/// tight enough to catch a wrong sign, factor, or stride anywhere.
pub const DEFAULT_TOL: f64 = 1e-5;

const H: f64 = 1e-4;

/// Checks `∂f/∂input` for every listed leaf against central differences.
///
/// `f` must rebuild the graph from the same leaves on every call (each call
/// makes a fresh tape). Inputs are perturbed in place one coordinate at a
/// time and restored exactly. Fails with the first offending coordinate,
/// reporting analytic vs numeric values.
///
/// Callers are responsible for keeping inputs away from kinks (relu at 0,
/// max ties); [`well_separated`] produces suitable data.
pub fn gradcheck<F>(inputs: &[&Tensor<f64>], f: F, tol: f64) -> Result<()>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    for t in inputs {
        t.zero_grad();
    }
    let loss = f()?;
    backward(&loss)?;

    for (ti, t) in inputs.iter().enumerate() {
        let analytic = t.grad().ok_or_else(|| {
            Error::Autodiff(format!("input {ti} received no gradient"))
        })?;
        for i in 0..t.numel() {
            let orig = t.with_data(|d| d[i]);
            t.with_data_mut(|d| d[i] = orig + H);
            let up = no_grad(|| f())?.item()?;
            t.with_data_mut(|d| d[i] = orig - H);
            let down = no_grad(|| f())?.item()?;
            t.with_data_mut(|d| d[i] = orig);

            let numeric = (up - down) / (2.0 * H);
            let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            if !rel.is_finite() || rel > tol {
                return Err(Error::Autodiff(format!(
                    "input {ti} coord {i}: analytic {} vs numeric {} (rel err {rel:.3e})",
                    analytic[i], numeric
                )));
            }
        }
    }
    for t in inputs {
        t.zero_grad();
    }
    Ok(())
}

/// Deterministic pseudo-random values in roughly `[-2, 2]`, spaced so that
/// no two entries collide and none sits near zero — keeps relu/max/clamp
/// branches stable under the `±h` probes.
pub fn well_separated(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        // offset each slot by its index so values stay distinct
        let u = (state >> 11) as f64 / (1u64 << 53) as f64; // [0,1)
        let mut v = (u * 3.0) - 1.5 + (i % 7) as f64 * 0.071;
        if v.abs() < 0.05 {
            v += 0.1;
        }
        out.push(v);
    }
    out
}
