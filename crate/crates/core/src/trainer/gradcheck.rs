use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Largest relative error between analytic gradients and central finite
/// differences over `coordinates` randomly chosen parameters.
///
/// `f` returns the loss and its analytic gradient at the given parameters.
/// The relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[f64], epsilon: f64, coordinates: usize, seed: u64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-6..=1e-2).contains(&epsilon) {
        return Err(Error::invalid(
            "grad_check",
            format!("epsilon {epsilon} outside [1e-6, 1e-2]"),
        ));
    }
    if params.is_empty() {
        return Err(Error::invalid("grad_check", "no parameters"));
    }
    let (_, analytic) = f(params)?;
    if analytic.len() != params.len() {
        return Err(Error::shape(
            "grad_check",
            "gradient length",
            params.len(),
            analytic.len(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    let mut probe = params.to_vec();
    for _ in 0..coordinates {
        let i = rng.random_range(0..params.len());
        probe[i] = params[i] + epsilon;
        let plus = f(&probe)?.0;
        probe[i] = params[i] - epsilon;
        let minus = f(&probe)?.0;
        probe[i] = params[i];
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
