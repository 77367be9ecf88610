use super::Tensor;
use crate::error::{contract_err, Result};

/// Moment estimates for [`adam_step`]. Slots follow the order in which
/// parameters are passed, so the caller must keep that order stable.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, slot: usize) -> Option<&[f64]> {
        self.m.get(slot).map(Vec::as_slice)
    }

    pub fn second_moment(&self, slot: usize) -> Option<&[f64]> {
        self.v.get(slot).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update over every trainable tensor in `params`,
/// then clears their gradients. Fails without touching anything if a
/// trainable tensor has no gradient.
pub fn adam_step<'a, I>(params: I, state: &mut AdamState, lr: f64) -> Result<()>
where
    I: IntoIterator<Item = &'a mut Tensor>,
{
    let mut trainable: Vec<&mut Tensor> = params
        .into_iter()
        .filter(|p| p.requires_grad())
        .collect();
    if let Some(i) = trainable.iter().position(|p| p.grad().is_none()) {
        return Err(contract_err!(
            "trainable tensor #{} (shape {:?}) has no gradient",
            i,
            trainable[i].shape()
        ));
    }
    if state.m.is_empty() {
        state.m = trainable.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != trainable.len()
        || state.m.iter().zip(&trainable).any(|(m, p)| m.len() != p.numel())
    {
        return Err(contract_err!(
            "Adam state was built for a different parameter list"
        ));
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (slot, p) in trainable.iter_mut().enumerate() {
        let g = p.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[slot], &mut state.v[slot]);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
        p.zero_grad();
    }
    Ok(())
}
