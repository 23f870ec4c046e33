use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grad::batch_gradient;
use super::{lit, Model, OutputHead, Scalar};
use crate::data::Example;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Seed for the per-epoch shuffling.
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 32,
            patience: 100,
            max_epochs: 2000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
    beta1: T,
    beta2: T,
    eps: T,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
            beta1: lit(beta1),
            beta2: lit(beta2),
            eps: lit(eps),
        }
    }

    pub fn update(&mut self, params: &mut [T], grad: &[T], lr: T) {
        self.step += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.step);
        let c2 = one - self.beta2.powi(self.step);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainResult<T> {
    /// Parameters at the lowest validation loss.
    pub model: Model<T>,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl<T: Scalar> Model<T> {
    /// Mean per-position (per-bit for sigmoid heads) loss over a dataset.
    pub fn dataset_loss(&self, examples: &[Example]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for ex in examples {
            self.check_tokens(&ex.tokens)?;
            let logits = self.forward_cache(&ex.tokens, 0).logits;
            let rows: Vec<Vec<T>> = logits.chunks(self.config().n_outputs).map(<[T]>::to_vec).collect();
            let l = super::grad::loss(self.config().head, &rows, &ex.labels)?;
            let per = match self.config().head {
                OutputHead::Softmax => 1,
                OutputHead::Sigmoid => self.config().n_outputs,
            };
            let weight = ex.labels.len() * per;
            total += l.to_f64().unwrap_or(f64::NAN) * weight as f64;
            count += weight;
        }
        Ok(total / count as f64)
    }

    /// Per-position predicted outputs for each example's tokens.
    pub fn predict_examples(&self, examples: &[Example]) -> Result<Vec<Vec<usize>>> {
        examples
            .iter()
            .map(|ex| {
                let trace = self.forward(&ex.tokens)?;
                Ok(trace.probs.iter().map(|p| super::decode(self.config().head, p)).collect())
            })
            .collect()
    }
}

/// Adam with early stopping on validation loss. `on_epoch` sees every log
/// record as it is produced, so a log survives a divergence error.
pub fn train<T: Scalar>(
    model: Model<T>,
    train_set: &[Example],
    val_set: &[Example],
    hyper: &Hyper,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainResult<T>> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(invalid("training and validation sets must be nonempty"));
    }
    if hyper.batch_size == 0 || hyper.max_epochs == 0 {
        return Err(invalid("batch size and epoch budget must be positive"));
    }
    let mut model = model;
    let mut adam = Adam::new(model.params().len(), hyper.beta1, hyper.beta2, hyper.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let lr = lit::<T>(hyper.lr);

    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::new();
    for epoch in 1..=hyper.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grad) = batch_gradient(&model, &batch).map_err(|e| match e {
                Error::Divergence { loss, .. } => Error::Divergence { epoch, loss },
                other => other,
            })?;
            adam.update(model.params_mut(), &grad, lr);
            loss_sum += loss.to_f64().unwrap_or(f64::NAN);
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let val_loss = model.dataset_loss(val_set)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: if train_loss.is_finite() { val_loss } else { train_loss },
            });
        }
        let improved = val_loss < best_val;
        if improved {
            best_val = val_loss;
            best_epoch = epoch;
            best.clone_from(&model);
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            improved,
        };
        debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        on_epoch(&record);
        log.push(record);
        if epoch - best_epoch >= hyper.patience {
            info!("early stop at epoch {epoch}, best epoch {best_epoch}");
            break;
        }
    }
    Ok(TrainResult {
        model: best,
        log,
        best_epoch,
        best_val_loss: best_val,
    })
}
