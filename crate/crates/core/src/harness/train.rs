use log::{error, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::evaluate;
use super::model::{CsiModel, ModelBound};
use crate::channelgen::Dataset;
use crate::encoder::{self, LinearEncoder};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::l2o::{self, PolicyVars, ProxVars};
use crate::ndtensor::{adam_step, AdamState, Tape, Var};
use crate::transforms;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Iterations unrolled during training.
    pub t_unroll: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the transform reconstruction term.
    pub beta: f64,
    pub seed: u64,
    /// Stop after this many epochs without a better validation NMSE.
    pub patience: usize,
    /// Epochs fitting the transform pair alone to reconstruct channel rows
    /// before end-to-end training. Ignored without a learned transform.
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_unroll: 10,
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            beta: 0.01,
            seed: 0,
            patience: 50,
            warmup_epochs: 0,
            warmup_lr: 3e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_unroll == 0 || self.batch_size == 0 {
            return Err(contract_err!("unroll depth and batch size must be positive"));
        }
        if !(self.beta >= 0.0) || !(self.lr >= 0.0) || !(self.warmup_lr >= 0.0) {
            return Err(contract_err!("beta and learning rates must be non-negative"));
        }
        Ok(())
    }
}

/// The two terms of the training loss, already divided by the batch size.
pub struct LossVars<'t> {
    pub total: Var<'t>,
    pub recon: Var<'t>,
    pub transform: Option<Var<'t>>,
}

/// `(1/B) sum_i ||h_i - decode(encode(h_i))||^2 + beta ||h_i - f_i(f_t(h_i))||^2`
/// for `h: B x n`.
pub fn loss_var<'t>(
    model: &CsiModel,
    bound: &ModelBound<'t>,
    h: Var<'t>,
    iters: usize,
    beta: f64,
    seed: u64,
) -> Result<LossVars<'t>> {
    let tape = h.tape();
    let batch = h.shape()[0];
    if h.shape()[1] != model.n() {
        return Err(dim_err!("channels of length {} for a model of {}", h.shape()[1], model.n()));
    }
    let w = bound.encoder.get(encoder::WEIGHT)?;
    let s = LinearEncoder::encode_var(&bound.encoder, h)?;
    let prox = match (&model.transform, &bound.transform) {
        (Some(t), Some(b)) => ProxVars::Learned { transform: t, bound: b },
        _ => ProxVars::Identity,
    };
    let policy = PolicyVars::Learned { net: &model.net, bound: &bound.net };
    let x = l2o::unroll(tape, policy, prox, w, s, iters, seed, None)?;
    let scale = 1.0 / batch as f64;
    let recon = h.sub(x)?.sum_squares().scale(scale);
    let transform = match (&model.transform, &bound.transform) {
        (Some(t), Some(b)) => {
            let rows = transforms::to_rows(h, model.na(), model.nt())?;
            Some(t.transform_loss_var(b, rows)?.scale(scale))
        }
        _ => None,
    };
    let total = match transform {
        Some(tr) if beta != 0.0 => recon.add(tr.scale(beta))?,
        _ => recon,
    };
    Ok(LossVars { total, recon, transform })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub transform: f64,
}

/// Loss on `batch x n` channels `h`, without gradients.
pub fn loss(model: &CsiModel, h: &[f64], iters: usize, beta: f64, seed: u64) -> Result<LossParts> {
    let n = model.n();
    if h.is_empty() || h.len() % n != 0 {
        return Err(dim_err!("{} values do not split into channels of {n}", h.len()));
    }
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let hv = tape.constant(vec![h.len() / n, n], h.to_vec())?;
    let parts = loss_var(model, &bound, hv, iters, beta, seed)?;
    Ok(LossParts {
        total: parts.total.item()?,
        recon: parts.recon.item()?,
        transform: parts.transform.map_or(Ok(0.0), |t| t.item())?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub val_nmse_db: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation NMSE.
    pub best: CsiModel,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

/// Seed of the recurrent state for one batch.
fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed ^ ((epoch as u64) << 32) ^ (batch as u64).wrapping_mul(0x9e37_79b9)
}

fn describe_batch(h: &[f64]) -> String {
    let n = h.len().max(1) as f64;
    let mean = h.iter().sum::<f64>() / n;
    let max = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let finite = h.iter().all(|v| v.is_finite());
    format!("{} values, mean {mean:.3e}, max |v| {max:.3e}, all finite: {finite}", h.len())
}

fn batch_rows(set: &Dataset, idx: &[usize]) -> Vec<f64> {
    idx.iter().flat_map(|&i| set.samples[i].h_vec.iter().copied()).collect()
}

/// Adam on the transform alone, minimising `(1/B) sum_i ||h_i - f_i(f_t(h_i))||^2`.
/// Returns the mean batch loss of each epoch.
pub fn warmup_transform(model: &mut CsiModel, cfg: &TrainConfig, train_set: &Dataset) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (na, nt, n) = (model.na(), model.nt(), model.n());
    let Some(t) = model.transform.as_mut() else {
        return Ok(Vec::new());
    };
    if train_set.config.h_len() != n {
        return Err(dim_err!("dataset channel length does not match the model ({n})"));
    }
    let mut adam = AdamState::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.warmup_epochs);
    for epoch in 1..=cfg.warmup_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_sub(epoch as u64)));
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let bound = t.params().bind(&tape);
            let hv = tape.constant(vec![chunk.len(), n], batch_rows(train_set, chunk))?;
            let rows = transforms::to_rows(hv, na, nt)?;
            let l = t.transform_loss_var(&bound, rows)?.scale(1.0 / chunk.len() as f64);
            let value = l.item()?;
            if !value.is_finite() {
                return Err(Error::Numerical(format!("transform warm-up loss is {value} at epoch {epoch}")));
            }
            let grads = tape.backward(l)?;
            t.params_mut().accumulate(&bound, &grads)?;
            drop(bound);
            adam_step(t.params_mut().tensors_mut(), &mut adam, cfg.warmup_lr)?;
            total += value;
            batches += 1;
        }
        info!("transform warm-up epoch {epoch}: loss {:.6e}", total / batches as f64);
        history.push(total / batches as f64);
    }
    Ok(history)
}

/// Adam over every trainable tensor, validating after each epoch.
pub fn train(mut model: CsiModel, cfg: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(contract_err!("training and validation sets must be nonempty"));
    }
    let n = model.n();
    if train_set.config.h_len() != n || val_set.config.h_len() != n {
        return Err(dim_err!("dataset channel length does not match the model ({n})"));
    }
    warmup_transform(&mut model, cfg, train_set)?;
    let mut adam = AdamState::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, CsiModel)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        let (mut total, mut batches) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let h = batch_rows(train_set, chunk);
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let hv = tape.constant(vec![chunk.len(), n], h.clone())?;
            let parts = loss_var(&model, &bound, hv, cfg.t_unroll, cfg.beta, batch_seed(cfg.seed, epoch, bi))?;
            let value = parts.total.item()?;
            if !value.is_finite() {
                let msg = format!(
                    "loss is {value} at epoch {epoch}, batch {bi}; batch: {}",
                    describe_batch(&h)
                );
                error!("{msg}");
                return Err(Error::Numerical(msg));
            }
            let grads = tape.backward(parts.total)?;
            model.accumulate(&bound, &grads)?;
            drop(bound);
            adam_step(model.tensors_mut(), &mut adam, cfg.lr)?;
            total += value;
            batches += 1;
        }
        let train_loss = total / batches as f64;
        let val = evaluate(&model, val_set, cfg.t_unroll, cfg.seed)?.nmse_db;
        info!("epoch {epoch}: train loss {train_loss:.6e}, validation NMSE {val:.3} dB");
        history.push(EpochLog {
            epoch,
            train_loss,
            val_nmse_db: val,
        });
        let improved = best.as_ref().is_none_or(|(b, _, _)| val < *b);
        if improved {
            best = Some((val, epoch, model.clone()));
        } else if best.as_ref().is_some_and(|(_, e, _)| epoch - e >= cfg.patience) {
            info!("no validation gain for {} epochs, stopping", cfg.patience);
            break;
        }
    }
    let (_, best_epoch, best) = match best {
        Some(b) => b,
        None => (f64::NAN, 0, model),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
    })
}
