//! Minibatch SGD with momentum.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Example, MaterialNet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Fraction of the epochs after which the learning rate is multiplied
    /// by `decay_factor`.
    pub decay_at: f64,
    pub decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            decay_at: 2.0 / 3.0,
            decay_factor: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let boundary = (self.epochs as f64 * self.decay_at).round() as usize;
        if epoch >= boundary {
            self.learning_rate * self.decay_factor
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over the dataset before the first update.
    pub initial_loss: f64,
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Mean loss over a dataset, evaluated in parallel and summed in order.
pub fn mean_loss(net: &MaterialNet, data: &[Example]) -> Result<f64> {
    let losses: Vec<f64> = data.par_iter().map(|e| net.loss(e)).collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

pub fn train(net: &mut MaterialNet, data: &[Example], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(i) = data.iter().position(|e| e.labels.labeled_count() == 0) {
        return Err(Error::invalid(format!("training example {i} has no labeled pixels")));
    }
    let initial_loss = mean_loss(net, data)?;
    if !initial_loss.is_finite() {
        return Err(Error::Diverged { epoch: 0, loss: initial_loss });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let names: Vec<String> = net.graph().trainable_names().map(str::to_string).collect();
    let mut velocity: BTreeMap<String, Tensor> = names
        .iter()
        .map(|n| (n.clone(), Tensor::zeros(net.graph().param(n).unwrap().shape())))
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.learning_rate_at(epoch);
        let mut epoch_total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, BTreeMap<String, Tensor>)> = batch
                .par_iter()
                .map(|&i| net.loss_and_gradients(&data[i]))
                .collect::<Result<_>>()?;
            let inv = 1.0 / batch.len() as f64;
            let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
            for (loss, grads) in results {
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss });
                }
                epoch_total += loss;
                for (name, g) in grads {
                    match sum.get_mut(&name) {
                        Some(acc) => acc.add_assign(&g)?,
                        None => {
                            sum.insert(name, g);
                        }
                    }
                }
            }
            for name in &names {
                let g = &sum[name];
                let v = velocity.get_mut(name).unwrap();
                for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                    *vi = config.momentum * *vi - lr * gi * inv;
                }
                let p = net.graph_mut().param_mut(name).unwrap();
                for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
                    *pi += vi;
                }
            }
        }
        let mean = epoch_total / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        initial_loss,
        epoch_losses,
    })
}
