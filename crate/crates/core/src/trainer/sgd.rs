use log::{debug, info};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backprop::{backbone_gradients, head_gradients, Gradients, HeadGradients};
use super::cross_entropy_logits;
use crate::backbone::{forward_collect, NetworkSpec, WeightStore};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::exit_head::{ExitHead, HeadSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether `iterations` counts passes over the data or minibatch steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IterationUnit {
    Epochs,
    Steps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub iterations: usize,
    pub unit: IterationUnit,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// 100 epochs at 0.00025.
    pub fn reference_backbone() -> Self {
        Self {
            eta: 0.00025,
            iterations: 100,
            unit: IterationUnit::Epochs,
            batch_size: 32,
            seed: 0,
        }
    }

    /// 100 epochs at 0.001.
    pub fn reference_heads() -> Self {
        Self {
            eta: 0.001,
            ..Self::reference_backbone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!(
                "learning rate {} must be non-negative",
                self.eta
            )));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch size must be at least 1".into()));
        }
        Ok(())
    }

    /// Minibatches as index lists, reshuffled every epoch.
    fn schedule(&self, n: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let per_epoch = n.div_ceil(self.batch_size);
        let total = match self.unit {
            IterationUnit::Epochs => self.iterations * per_epoch,
            IterationUnit::Steps => self.iterations,
        };
        let mut order: Vec<usize> = (0..n).collect();
        let mut batches = Vec::with_capacity(total);
        while batches.len() < total {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.batch_size) {
                if batches.len() == total {
                    break;
                }
                batches.push(chunk.to_vec());
            }
        }
        batches
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean minibatch loss per step.
    pub step_losses: Vec<f64>,
    /// Mean loss on the fixed probe samples before and after training.
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
}

const PROBE: usize = 64;

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, loss })
    }
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Divergence { step, loss: f64::NAN },
        other => other,
    }
}

pub fn classifier_loss<T: Scalar>(
    net: &NetworkSpec,
    weights: &WeightStore<T>,
    data: &LabeledDataset<T>,
    idx: &[usize],
) -> Result<f64> {
    let total = idx
        .par_iter()
        .map(|&i| {
            let c = forward_collect(net, weights, data.inputs[i].clone())?;
            Ok(cross_entropy_logits(c.logits.data(), data.labels[i])?.0)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum::<f64>();
    Ok(total / idx.len() as f64)
}

/// `w -= eta * g / batch` over every accumulated gradient.
pub fn sgd_step<T: Scalar>(weights: &mut WeightStore<T>, grads: &Gradients, eta: f64, batch: usize) -> Result<()> {
    let scale = eta / batch as f64;
    for (key, g) in grads {
        let w = weights
            .get_mut(key)
            .ok_or_else(|| Error::invalid("sgd", format!("gradient for unknown parameter {key:?}")))?;
        apply(w, g, scale);
    }
    Ok(())
}

fn apply<T: Scalar>(w: &mut Tensor<T>, g: &[f64], scale: f64) {
    for (p, d) in w.data_mut().iter_mut().zip(g) {
        *p = T::narrow(p.widen() - scale * d);
    }
}

/// Minibatch SGD on the classifier's cross-entropy. Per-sample gradients are
/// computed in parallel and summed in sample order.
pub fn train_backbone<T: Scalar>(
    net: &NetworkSpec,
    weights: &mut WeightStore<T>,
    data: &LabeledDataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train_backbone", "empty dataset"));
    }
    weights.validate(net)?;
    let probe: Vec<usize> = (0..data.len().min(PROBE)).collect();
    let initial_probe_loss = classifier_loss(net, weights, data, &probe)?;
    let schedule = cfg.schedule(data.len());
    let mut step_losses = Vec::with_capacity(schedule.len());
    for (step, batch) in schedule.iter().enumerate() {
        let per_sample = batch
            .par_iter()
            .map(|&i| backbone_gradients(net, weights, &data.inputs[i], data.labels[i]))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| diverged(step, e))?;
        let mut sum = Gradients::new();
        let mut loss = 0.0;
        for (l, g) in per_sample {
            loss += l;
            for (key, v) in g {
                let slot = sum.entry(key).or_insert_with(|| vec![0.0; v.len()]);
                slot.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
            }
        }
        let loss = loss / batch.len() as f64;
        check_finite(step, loss)?;
        sgd_step(weights, &sum, cfg.eta, batch.len())?;
        step_losses.push(loss);
        if step % 50 == 0 {
            debug!("backbone step {step}: loss {loss:.4}");
        }
    }
    let final_probe_loss = classifier_loss(net, weights, data, &probe)?;
    info!(
        "backbone: {} steps, probe loss {initial_probe_loss:.4} -> {final_probe_loss:.4}",
        schedule.len()
    );
    Ok(TrainReport {
        steps: schedule.len(),
        step_losses,
        initial_probe_loss,
        final_probe_loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadTrainReport {
    pub steps: usize,
    /// Per head position, mean loss over the probe samples before and after.
    pub initial_probe_loss: Vec<f64>,
    pub final_probe_loss: Vec<f64>,
    pub backbone_fingerprint: String,
}

fn head_probe_losses<T: Scalar>(heads: &HeadSet<T>, features: &[Vec<Tensor<T>>], labels: &[usize]) -> Result<Vec<f64>> {
    heads
        .heads
        .iter()
        .enumerate()
        .map(|(h, head)| {
            let mut total = 0.0;
            for (f, &l) in features.iter().zip(labels) {
                total += head_gradients(head, &f[h], l)?.0;
            }
            Ok(total / features.len() as f64)
        })
        .collect()
}

fn features<T: Scalar>(
    net: &NetworkSpec,
    weights: &WeightStore<T>,
    x: &Tensor<T>,
    n_heads: usize,
) -> Result<Vec<Tensor<T>>> {
    let c = forward_collect(net, weights, x.clone())?;
    Ok(c.intermediates.into_iter().take(n_heads).map(|(_, y)| y).collect())
}

fn apply_head<T: Scalar>(head: &mut ExitHead<T>, g: &HeadGradients, scale: f64) {
    apply(&mut head.codebook, &g.codebook, scale);
    apply(&mut head.fc_weight, &g.fc_weight, scale);
    apply(&mut head.fc_bias, &g.fc_bias, scale);
}

/// Trains every exit head on its own cross-entropy with the backbone frozen.
/// Backbone intermediates are computed once and reused across epochs.
pub fn train_exit_heads<T: Scalar>(
    net: &NetworkSpec,
    weights: &WeightStore<T>,
    heads: &mut HeadSet<T>,
    data: &LabeledDataset<T>,
    cfg: &TrainConfig,
) -> Result<HeadTrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train_exit_heads", "empty dataset"));
    }
    heads.validate(net)?;
    let fingerprint = weights.fingerprint();
    let n_heads = heads.heads.len();
    let feats = data
        .inputs
        .par_iter()
        .map(|x| features(net, weights, x, n_heads))
        .collect::<Result<Vec<_>>>()?;
    let probe = data.len().min(PROBE);
    let initial_probe_loss = head_probe_losses(heads, &feats[..probe], &data.labels[..probe])?;
    let schedule = cfg.schedule(data.len());
    for (step, batch) in schedule.iter().enumerate() {
        let scale = cfg.eta / batch.len() as f64;
        let snapshot = &heads.heads;
        let updates = (0..n_heads)
            .into_par_iter()
            .map(|h| {
                let mut sum: Option<HeadGradients> = None;
                let mut loss = 0.0;
                for &i in batch {
                    let (l, g) = head_gradients(&snapshot[h], &feats[i][h], data.labels[i])?;
                    loss += l;
                    match &mut sum {
                        None => sum = Some(g),
                        Some(s) => {
                            add(&mut s.codebook, &g.codebook);
                            add(&mut s.fc_weight, &g.fc_weight);
                            add(&mut s.fc_bias, &g.fc_bias);
                        }
                    }
                }
                Ok((loss / batch.len() as f64, sum.expect("non-empty batch")))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| diverged(step, e))?;
        for (head, (loss, g)) in heads.heads.iter_mut().zip(&updates) {
            check_finite(step, *loss)?;
            apply_head(head, g, scale);
        }
    }
    heads.clear_calibration();
    let final_probe_loss = head_probe_losses(heads, &feats[..probe], &data.labels[..probe])?;
    let after = weights.fingerprint();
    if after != fingerprint {
        return Err(Error::invalid("train_exit_heads", "backbone weights changed"));
    }
    info!("heads: {} steps", schedule.len());
    Ok(HeadTrainReport {
        steps: schedule.len(),
        initial_probe_loss,
        final_probe_loss,
        backbone_fingerprint: after,
    })
}

fn add(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

/// Fraction of samples whose classifier argmax matches the label.
pub fn classifier_accuracy<T: Scalar>(
    net: &NetworkSpec,
    weights: &WeightStore<T>,
    data: &LabeledDataset<T>,
) -> Result<f64> {
    let correct = data
        .inputs
        .par_iter()
        .zip(&data.labels)
        .map(|(x, &l)| Ok((forward_collect(net, weights, x.clone())?.logits.argmax() == l) as usize))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / data.len() as f64)
}

/// Per-head accuracy (argmax of each head output), positions `1..L_total`.
pub fn head_accuracies<T: Scalar>(
    net: &NetworkSpec,
    weights: &WeightStore<T>,
    heads: &HeadSet<T>,
    data: &LabeledDataset<T>,
) -> Result<Vec<f64>> {
    let n_heads = heads.heads.len();
    let hits = data
        .inputs
        .par_iter()
        .zip(&data.labels)
        .map(|(x, &l)| {
            let f = features(net, weights, x, n_heads)?;
            heads
                .heads
                .iter()
                .zip(&f)
                .map(|(h, y)| Ok((h.logits(y)?.argmax() == l) as usize))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..n_heads)
        .map(|h| hits.iter().map(|v| v[h]).sum::<usize>() as f64 / data.len() as f64)
        .collect())
}
