//! Mini-batch SGD with momentum.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

use super::data::Dataset;
use super::model::{Network, Params};

#[derive(Clone, Debug)]
pub struct TrainState {
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Optimizer steps taken so far.
    pub steps: u64,
    /// Epochs completed so far; selects each epoch's shuffle.
    pub epochs: u64,
    velocity: Option<Params<f32>>,
}

impl TrainState {
    pub fn new(learning_rate: f32, batch_size: usize, seed: u64) -> Self {
        TrainState {
            learning_rate,
            momentum: 0.9,
            batch_size,
            seed,
            steps: 0,
            epochs: 0,
            velocity: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Fraction of training samples misclassified before their update.
    pub error: f64,
}

/// Trains `net` in place for `epochs` passes over `data`.
pub fn sgd_finetune(net: &mut Network<f32>, data: &Dataset, epochs: usize, state: &mut TrainState) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::invalid("training needs a non-empty dataset"));
    }
    if state.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let base = seed::derive(state.seed, "train");
    let mut logs = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed::component_rng(base, &format!("epoch{}", state.epochs)));
        let mut loss = 0.0;
        let mut wrong = 0.0;
        for batch in order.chunks(state.batch_size) {
            let images: Vec<_> = batch.iter().map(|&i| data.images[i].clone()).collect();
            let labels: Vec<_> = batch.iter().map(|&i| data.labels[i]).collect();
            let (m, grads) = net.loss_and_grad(&images, &labels)?;
            loss += m.loss * batch.len() as f64;
            wrong += m.error * batch.len() as f64;
            let v = state.velocity.get_or_insert_with(|| grads.zeros_like());
            v.scale(state.momentum);
            v.add_scaled(&grads, -state.learning_rate);
            net.update(v, 1.0)?;
            state.steps += 1;
        }
        state.epochs += 1;
        logs.push(EpochLog {
            epoch: state.epochs,
            loss: loss / data.len() as f64,
            error: wrong / data.len() as f64,
        });
    }
    Ok(logs)
}
