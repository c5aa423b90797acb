//! Unified exit head: Bag-of-Features pooling followed by a fully connected
//! classifier, plus the calibrated average feature weight `mu` and the
//! weight-ratio exit rule.

mod io;
mod set;

pub use io::{load_heads, save_heads};
pub use set::HeadSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, softmax_slice, Tensor};

/// Hyperparameters shared by every head of a network.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HeadConfig {
    /// Codebook size `V`.
    pub codebook_size: usize,
    /// Membership kernel width `sigma`.
    pub sigma: f64,
    /// Skip the output softmax; `mu` then averages raw logits.
    pub raw_logits: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            codebook_size: 16,
            sigma: 1.0,
            raw_logits: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExitHead<T> {
    /// 1-based exit position this head is attached to.
    pub position: usize,
    /// Backbone layer index whose output feeds the head.
    pub layer_index: usize,
    pub codebook: Tensor<T>,
    pub sigma: T,
    pub fc_weight: Tensor<T>,
    pub fc_bias: Tensor<T>,
    pub raw_logits: bool,
    mu: Option<T>,
}

impl<T: Scalar> ExitHead<T> {
    pub fn new(
        position: usize,
        layer_index: usize,
        codebook: Tensor<T>,
        sigma: T,
        fc_weight: Tensor<T>,
        fc_bias: Tensor<T>,
        raw_logits: bool,
    ) -> Result<Self> {
        const OP: &str = "exit_head";
        codebook.expect_rank(OP, 2)?;
        fc_weight.expect_rank(OP, 2)?;
        fc_bias.expect_rank(OP, 1)?;
        let v = codebook.shape()[0];
        let (nc, fv) = (fc_weight.shape()[0], fc_weight.shape()[1]);
        if fv != v {
            return Err(Error::shape(OP, "fc_weight columns (dim 1)", v, fv));
        }
        if fc_bias.len() != nc {
            return Err(Error::shape(OP, "fc_bias length", nc, fc_bias.len()));
        }
        if v < nc {
            return Err(Error::invalid(OP, format!("codebook size {v} below class count {nc}")));
        }
        if !(sigma > T::zero()) {
            return Err(Error::invalid(OP, "sigma must be positive"));
        }
        Ok(Self {
            position,
            layer_index,
            codebook,
            sigma,
            fc_weight,
            fc_bias,
            raw_logits,
            mu: None,
        })
    }

    /// Codebook from a unit Gaussian scaled by `1/sqrt(C)`; classifier weights
    /// Gaussian with std `1/sqrt(V)`, zero bias.
    pub fn init<R: Rng>(
        position: usize,
        layer_index: usize,
        channels: usize,
        num_classes: usize,
        cfg: &HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let v = cfg.codebook_size;
        let mut gaussian = |n: usize, std: f64| -> Vec<T> {
            let normal = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| T::narrow(normal.sample(rng))).collect()
        };
        let codebook = Tensor::new(
            vec![v, channels],
            gaussian(v * channels, 1.0 / (channels as f64).sqrt()),
        )?;
        let fc_weight = Tensor::new(vec![num_classes, v], gaussian(num_classes * v, 1.0 / (v as f64).sqrt()))?;
        Self::new(
            position,
            layer_index,
            codebook,
            T::narrow(cfg.sigma),
            fc_weight,
            Tensor::zeros(&[num_classes]),
            cfg.raw_logits,
        )
    }

    pub fn num_classes(&self) -> usize {
        self.fc_bias.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.codebook.shape()[1]
    }

    pub fn mu(&self) -> Option<T> {
        self.mu
    }

    pub fn set_mu(&mut self, mu: T) -> Result<()> {
        if !(mu > T::zero()) || !mu.is_finite() {
            return Err(Error::invalid("calibrate_mu", format!("mu must be positive, got {mu}")));
        }
        self.mu = Some(mu);
        Ok(())
    }

    pub(crate) fn clear_mu(&mut self) {
        self.mu = None;
    }

    /// MACs of one evaluation on a `[C, H, W]` input: `V*C*H*W` for the
    /// pooling plus `N_c*V` for the classifier.
    pub fn op_count(&self, input_shape: &[usize]) -> u64 {
        let spatial: usize = input_shape[1..].iter().product();
        (self.codebook_size() * self.channels() * spatial + self.num_classes() * self.codebook_size()) as u64
    }

    /// Head output before the optional softmax.
    pub fn logits(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = bof_pool(y, &self.codebook, self.sigma)?;
        tensor::affine(&pooled, &self.fc_weight, &self.fc_bias)
    }
}

/// Soft-assignment histogram of the `H*W` feature vectors of `y` against
/// `codebook`: each position contributes `softmax_v(-||y_p - c_v||^2 / sigma^2)`,
/// averaged over positions.
pub fn bof_pool<T: Scalar>(y: &Tensor<T>, codebook: &Tensor<T>, sigma: T) -> Result<Tensor<T>> {
    let memberships = bof_memberships(y, codebook, sigma)?;
    let v = codebook.shape()[0];
    let positions = memberships.len() / v;
    let mut out = vec![0f64; v];
    for row in memberships.chunks_exact(v) {
        for (o, &u) in out.iter_mut().zip(row) {
            *o += u;
        }
    }
    Tensor::from_kernel(
        "bof_pool",
        vec![v],
        out.into_iter().map(|s| T::narrow(s / positions as f64)).collect(),
    )
}

/// Per-position memberships `[H*W, V]` (row-major) in f64.
fn bof_memberships<T: Scalar>(y: &Tensor<T>, codebook: &Tensor<T>, sigma: T) -> Result<Vec<f64>> {
    const OP: &str = "bof_pool";
    y.expect_rank(OP, 3)?;
    codebook.expect_rank(OP, 2)?;
    let (c, positions) = (y.shape()[0], y.shape()[1] * y.shape()[2]);
    let v = codebook.shape()[0];
    if codebook.shape()[1] != c {
        return Err(Error::shape(OP, "codebook channels (dim 1)", c, codebook.shape()[1]));
    }
    if !(sigma > T::zero()) {
        return Err(Error::invalid(OP, "sigma must be positive"));
    }
    let inv_s2 = 1.0 / (sigma.widen() * sigma.widen());
    let cb: Vec<f64> = codebook.data().iter().map(|x| x.widen()).collect();
    let yd = y.data();
    let mut feature = vec![0f64; c];
    let mut out = Vec::with_capacity(positions * v);
    let mut logits = vec![0f64; v];
    for p in 0..positions {
        for (ch, f) in feature.iter_mut().enumerate() {
            *f = yd[ch * positions + p].widen();
        }
        for (l, word) in logits.iter_mut().zip(cb.chunks_exact(c)) {
            let d: f64 = word.iter().zip(&feature).map(|(a, b)| (a - b) * (a - b)).sum();
            *l = -d * inv_s2;
        }
        out.extend(softmax_slice(&logits));
    }
    Ok(out)
}

/// Gradient of a loss w.r.t. the codebook given its gradient w.r.t. the
/// pooled histogram.
pub fn bof_pool_backward<T: Scalar>(
    y: &Tensor<T>,
    codebook: &Tensor<T>,
    sigma: T,
    grad_pooled: &[f64],
) -> Result<Tensor<T>> {
    let memberships = bof_memberships(y, codebook, sigma)?;
    let (c, positions) = (y.shape()[0], y.shape()[1] * y.shape()[2]);
    let v = codebook.shape()[0];
    if grad_pooled.len() != v {
        return Err(Error::shape(
            "bof_pool_backward",
            "pooled gradient",
            v,
            grad_pooled.len(),
        ));
    }
    let scale = 2.0 / (sigma.widen() * sigma.widen()) / positions as f64;
    let yd = y.data();
    let cb: Vec<f64> = codebook.data().iter().map(|x| x.widen()).collect();
    let mut grad = vec![0f64; v * c];
    for (p, u) in memberships.chunks_exact(v).enumerate() {
        let mean: f64 = u.iter().zip(grad_pooled).map(|(a, g)| a * g).sum();
        for w in 0..v {
            // d loss / d z_w for this position, z_w = -||y_p - c_w||^2 / sigma^2
            let dz = u[w] * (grad_pooled[w] - mean) * scale;
            if dz == 0.0 {
                continue;
            }
            for ch in 0..c {
                grad[w * c + ch] += dz * (yd[ch * positions + p].widen() - cb[w * c + ch]);
            }
        }
    }
    Tensor::from_kernel(
        "bof_pool_backward",
        codebook.shape().to_vec(),
        grad.into_iter().map(T::narrow).collect(),
    )
}

/// `softmax(affine(bof_pool(y)))`, or the raw affine output for
/// `raw_logits` heads.
pub fn exit_forward<T: Scalar>(head: &ExitHead<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let logits = head.logits(y)?;
    if head.raw_logits {
        Ok(logits)
    } else {
        tensor::softmax(&logits)
    }
}

/// Grand mean of all entries of the head outputs over a training set; stores
/// it as the head's `mu`.
pub fn calibrate_mu<T: Scalar>(head: &mut ExitHead<T>, training_outputs: &[Tensor<T>]) -> Result<T> {
    let mu = grand_mean(head.num_classes(), training_outputs)?;
    head.set_mu(mu)?;
    Ok(mu)
}

pub(crate) fn grand_mean<T: Scalar>(num_classes: usize, outputs: &[Tensor<T>]) -> Result<T> {
    if outputs.is_empty() {
        return Err(Error::invalid("calibrate_mu", "no training outputs"));
    }
    let mut total = 0f64;
    for g in outputs {
        if g.len() != num_classes {
            return Err(Error::shape("calibrate_mu", "output length", num_classes, g.len()));
        }
        total += g.sum();
    }
    Ok(T::narrow(total / (outputs.len() * num_classes) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitDecision<T> {
    /// Weight ratio `max(g) / (beta * mu)`.
    pub alpha: T,
    pub predicted_class: usize,
    /// `alpha > 1`, strictly.
    pub exited: bool,
}

/// `max(values) / (beta * mu)`.
pub fn weight_ratio<T: Scalar>(values: &[T], mu: T, beta: T) -> T {
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    max / (beta * mu)
}

pub fn exit_decision<T: Scalar>(head: &ExitHead<T>, g: &Tensor<T>, beta: T) -> Result<ExitDecision<T>> {
    let mu = head.mu.ok_or(Error::Uncalibrated {
        position: head.position,
    })?;
    if g.len() != head.num_classes() {
        return Err(Error::shape(
            "exit_decision",
            "output length",
            head.num_classes(),
            g.len(),
        ));
    }
    decide(g.data(), mu, beta)
}

/// Exit rule on a raw output vector with an explicit `mu`.
pub fn decide<T: Scalar>(g: &[T], mu: T, beta: T) -> Result<ExitDecision<T>> {
    if !(beta > T::zero()) {
        return Err(Error::invalid("exit_decision", "beta must be positive"));
    }
    let alpha = weight_ratio(g, mu, beta);
    Ok(ExitDecision {
        alpha,
        predicted_class: tensor::argmax(g),
        exited: alpha > T::one(),
    })
}
