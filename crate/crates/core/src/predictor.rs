//! Low-cost exit-point prediction: recursively zero-pad the current
//! exit-head output, convolve it with a short filter, and return the first
//! look-ahead step whose predicted confidence exceeds one.

use crate::error::{Error, Result};
use crate::exit_head::weight_ratio;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorConfig<T> {
    /// First exit position tried (`L0`).
    pub l0: usize,
    pub beta: T,
    /// Maximum look-ahead in layers.
    pub tau: usize,
    /// Convolution filter `h`; its length `K` must be odd.
    pub filter: Vec<T>,
    /// Rescale `G` to unit sum after every step.
    pub normalize_steps: bool,
}

impl<T: Scalar> PredictorConfig<T> {
    /// `K = 3`, all-ones filter and `tau = L_total - L0`.
    pub fn with_defaults(l0: usize, beta: T, l_total: usize) -> Result<Self> {
        let cfg = Self {
            l0,
            beta,
            tau: l_total.saturating_sub(l0),
            filter: vec![T::one(); 3],
            normalize_steps: false,
        };
        cfg.validate(l_total)?;
        Ok(cfg)
    }

    pub fn k(&self) -> usize {
        self.filter.len()
    }

    pub fn validate(&self, l_total: usize) -> Result<()> {
        const OP: &str = "predictor";
        if self.filter.is_empty() || self.filter.len().is_multiple_of(2) {
            return Err(Error::invalid(
                OP,
                format!("filter length {} must be odd", self.filter.len()),
            ));
        }
        if !(self.beta > T::zero()) || !self.beta.is_finite() {
            return Err(Error::invalid(OP, "beta must be positive and finite"));
        }
        if self.l0 == 0 || self.l0 >= l_total {
            return Err(Error::invalid(OP, format!("l0 {} must lie in 1..{l_total}", self.l0)));
        }
        if self.tau == 0 || self.tau > l_total - self.l0 {
            return Err(Error::invalid(
                OP,
                format!("tau {} must lie in 1..={}", self.tau, l_total - self.l0),
            ));
        }
        Ok(())
    }
}

/// One recursion step of the engine.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorState<T> {
    /// Padded vector `J`, length `K + N_c - 1`.
    pub padded: Tensor<T>,
    /// Predicted head output `G`, length `N_c`.
    pub predicted: Tensor<T>,
    pub zeta: usize,
    pub confidence: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    /// Predicted look-ahead in `1..=tau`.
    pub zeta: usize,
    /// Whether a step passed the confidence check (`false` means `tau` fallback).
    pub confident: bool,
    pub trace: Vec<PredictorState<T>>,
    /// Multiply-adds spent in the convolution steps.
    pub ops: u64,
}

/// Extends `g` with `(K-1)/2` zeros on each side.
pub fn zero_pad<T: Scalar>(g: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    if k.is_multiple_of(2) {
        return Err(Error::invalid("zero_pad", format!("K = {k} must be odd")));
    }
    g.expect_rank("zero_pad", 1)?;
    let half = (k - 1) / 2;
    let mut out = vec![T::zero(); g.len() + k - 1];
    out[half..half + g.len()].copy_from_slice(g.data());
    Tensor::new(vec![out.len()], out)
}

/// `G[i] = sum_k h[k] * J[i + k]` for `i` in `0..len(J) - K + 1`.
pub fn conv1d_step<T: Scalar>(padded: &Tensor<T>, filter: &[T]) -> Result<Tensor<T>> {
    let k = filter.len();
    if k == 0 || padded.len() < k {
        return Err(Error::shape(
            "conv1d_step",
            "padded length",
            format!(">= {k}"),
            padded.len(),
        ));
    }
    let j = padded.data();
    let out = (0..j.len() - k + 1)
        .map(|i| {
            let mut acc = 0f64;
            for (hk, jv) in filter.iter().zip(&j[i..i + k]) {
                acc += hk.widen() * jv.widen();
            }
            T::narrow(acc)
        })
        .collect();
    Tensor::from_kernel("conv1d_step", vec![j.len() - k + 1], out)
}

/// `max(G) / (beta * mu)`.
pub fn predicted_confidence<T: Scalar>(predicted: &Tensor<T>, mu: T, beta: T) -> T {
    weight_ratio(predicted.data(), mu, beta)
}

/// Forecasts how many layers past `cfg.l0` the network will exit.
///
/// `mu_by_position[p - 1]` is the calibrated `mu` of exit position `p`; it
/// must cover positions `l0 + 1 ..= l0 + tau`.
pub fn predict<T: Scalar>(g: &Tensor<T>, cfg: &PredictorConfig<T>, mu_by_position: &[T]) -> Result<Prediction<T>> {
    const OP: &str = "predict";
    if cfg.filter.is_empty() || cfg.k().is_multiple_of(2) {
        return Err(Error::invalid(OP, "filter length must be odd"));
    }
    if cfg.tau == 0 || cfg.l0 == 0 {
        return Err(Error::invalid(OP, "l0 and tau must be positive"));
    }
    if !(cfg.beta > T::zero()) {
        return Err(Error::invalid(OP, "beta must be positive"));
    }
    if mu_by_position.len() < cfg.l0 + cfg.tau {
        return Err(Error::invalid(
            OP,
            format!("no mu for position {}", mu_by_position.len() + 1),
        ));
    }
    let n_c = g.len();
    let mut trace = Vec::with_capacity(cfg.tau);
    let mut ops = 0u64;
    let mut current = g.clone();
    for zeta in 1..=cfg.tau {
        let padded = zero_pad(&current, cfg.k())?;
        let mut predicted = conv1d_step(&padded, &cfg.filter)?;
        ops += (n_c * cfg.k()) as u64;
        if cfg.normalize_steps {
            let total = predicted.sum();
            if total > 0.0 {
                predicted = predicted.map(OP, |v| T::narrow(v.widen() / total))?;
            }
        }
        let confidence = predicted_confidence(&predicted, mu_by_position[cfg.l0 + zeta - 1], cfg.beta);
        trace.push(PredictorState {
            padded,
            predicted: predicted.clone(),
            zeta,
            confidence,
        });
        if confidence > T::one() {
            return Ok(Prediction {
                zeta,
                confident: true,
                trace,
                ops,
            });
        }
        current = predicted;
    }
    Ok(Prediction {
        zeta: cfg.tau,
        confident: false,
        trace,
        ops,
    })
}
