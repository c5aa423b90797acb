use rand::Rng;

use rayon::prelude::*;

use super::{exit_forward, grand_mean, ExitHead, HeadConfig};
use crate::backbone::{forward_collect, NetworkSpec, WeightStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax, Tensor};

/// Exit heads for positions `1..L_total`. The last position is served by the
/// backbone classifier, whose calibrated `mu` is kept in `classifier_mu`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSet<T> {
    pub config: HeadConfig,
    pub num_classes: usize,
    pub heads: Vec<ExitHead<T>>,
    pub classifier_mu: Option<T>,
}

impl<T: Scalar> HeadSet<T> {
    pub fn init<R: Rng>(net: &NetworkSpec, config: HeadConfig, rng: &mut R) -> Result<Self> {
        let heads = (1..net.l_total())
            .map(|position| {
                let channels = net.exit_shape(position)?[0];
                ExitHead::init(
                    position,
                    net.layer_at(position)?,
                    channels,
                    net.num_classes(),
                    &config,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            num_classes: net.num_classes(),
            heads,
            classifier_mu: None,
        })
    }

    /// Number of exit positions covered, including the classifier.
    pub fn l_total(&self) -> usize {
        self.heads.len() + 1
    }

    pub fn head(&self, position: usize) -> Option<&ExitHead<T>> {
        position.checked_sub(1).and_then(|i| self.heads.get(i))
    }

    pub fn is_calibrated(&self) -> bool {
        self.classifier_mu.is_some() && self.heads.iter().all(|h| h.mu().is_some())
    }

    /// `mu` for every position `1..=L_total`, in order.
    pub fn mu_by_position(&self) -> Result<Vec<T>> {
        let mut mus = self
            .heads
            .iter()
            .map(|h| h.mu().ok_or(Error::Uncalibrated { position: h.position }))
            .collect::<Result<Vec<_>>>()?;
        mus.push(self.classifier_mu.ok_or(Error::Uncalibrated {
            position: self.l_total(),
        })?);
        Ok(mus)
    }

    pub fn clear_calibration(&mut self) {
        self.classifier_mu = None;
        for h in &mut self.heads {
            h.clear_mu();
        }
    }

    /// Cost of evaluating the head at each position; zero at the classifier
    /// position, whose cost is part of the backbone.
    pub fn head_ops(&self, net: &NetworkSpec) -> Result<Vec<u64>> {
        let mut ops = Vec::with_capacity(self.l_total());
        for h in &self.heads {
            ops.push(h.op_count(net.exit_shape(h.position)?));
        }
        ops.push(0);
        Ok(ops)
    }

    /// Sets every `mu`, including the classifier's, to the grand mean of
    /// the outputs over `inputs`.
    pub fn calibrate(&mut self, net: &NetworkSpec, weights: &WeightStore<T>, inputs: &[Tensor<T>]) -> Result<Vec<T>> {
        self.validate(net)?;
        let outputs = inputs
            .par_iter()
            .map(|x| {
                let c = forward_collect(net, weights, x.clone())?;
                let mut out = self
                    .heads
                    .iter()
                    .zip(&c.intermediates)
                    .map(|(h, (_, y))| exit_forward(h, y))
                    .collect::<Result<Vec<_>>>()?;
                out.push(softmax(&c.logits)?);
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mus = Vec::with_capacity(self.l_total());
        for position in 0..self.l_total() {
            let column: Vec<Tensor<T>> = outputs.iter().map(|o| o[position].clone()).collect();
            mus.push(grand_mean(self.num_classes, &column)?);
        }
        for (h, &mu) in self.heads.iter_mut().zip(&mus) {
            h.set_mu(mu)?;
        }
        let classifier = *mus.last().unwrap();
        if !(classifier > T::zero()) {
            return Err(Error::invalid("calibrate", "classifier mu must be positive"));
        }
        self.classifier_mu = Some(classifier);
        Ok(mus)
    }

    /// Checks the set lines up with `net`'s exit positions and shapes.
    pub fn validate(&self, net: &NetworkSpec) -> Result<()> {
        if self.l_total() != net.l_total() {
            return Err(Error::Config(format!(
                "head set covers {} positions, network has {}",
                self.l_total(),
                net.l_total()
            )));
        }
        if self.num_classes != net.num_classes() {
            return Err(Error::shape(
                "heads",
                "num_classes",
                net.num_classes(),
                self.num_classes,
            ));
        }
        for (i, h) in self.heads.iter().enumerate() {
            if h.position != i + 1 || h.layer_index != net.layer_at(i + 1)? {
                return Err(Error::Config(format!("head {i} is attached to the wrong position")));
            }
            let channels = net.exit_shape(h.position)?[0];
            if h.channels() != channels {
                return Err(Error::shape(
                    "heads",
                    format!("codebook channels at position {}", h.position),
                    channels,
                    h.channels(),
                ));
            }
            if h.num_classes() != net.num_classes() {
                return Err(Error::shape("heads", "classes", net.num_classes(), h.num_classes()));
            }
        }
        Ok(())
    }
}
