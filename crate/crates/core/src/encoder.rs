//! Learnable linear projection `s = W h_vec` (no bias, no activation).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{contract_err, dim_err, Result};
use crate::ndtensor::{Bound, ParamStore, Tensor, Var};

pub const WEIGHT: &str = "encoder.W";

/// A compressed channel: the `M` real values fed back to the base station.
#[derive(Debug, Clone, PartialEq)]
pub struct Codeword {
    pub values: Vec<f64>,
    /// `M / n`.
    pub compression_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearEncoder {
    params: ParamStore,
    m: usize,
    n: usize,
}

/// `rows x cols` entries drawn from `N(0, var)`, seeded.
pub(crate) fn gaussian_entries(rows: usize, cols: usize, var: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = var.sqrt();
    (0..rows * cols)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

impl LinearEncoder {
    /// Kaiming-normal initialisation, entries `~ N(0, 2 / n)`.
    pub fn init_kaiming(m: usize, n: usize, seed: u64) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(contract_err!("encoder dimensions must be positive, got {m}x{n}"));
        }
        let w = Tensor::param(vec![m, n], gaussian_entries(m, n, 2.0 / n as f64, seed))?;
        Self::from_weights(w)
    }

    pub fn from_weights(mut w: Tensor) -> Result<Self> {
        let &[m, n] = w.shape() else {
            return Err(dim_err!("encoder weight must be rank 2, got {:?}", w.shape()));
        };
        if m == 0 || m > n {
            return Err(contract_err!("codeword length {m} must lie in 1..={n}"));
        }
        w.set_requires_grad(true);
        let mut params = ParamStore::new();
        params.insert(WEIGHT, w);
        Ok(Self { params, m, n })
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Self::from_weights(store.get(WEIGHT)?.clone())
    }

    pub fn weight(&self) -> &Tensor {
        self.params.get(WEIGHT).expect("weight is always present")
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn codeword_len(&self) -> usize {
        self.m
    }

    pub fn input_len(&self) -> usize {
        self.n
    }

    pub fn compression_ratio(&self) -> f64 {
        self.m as f64 / self.n as f64
    }

    pub fn param_count(&self) -> usize {
        self.m * self.n
    }

    /// One FLOP per weight: `M * 2 * Na * Nt`.
    pub fn flops(&self) -> usize {
        self.m * self.n
    }

    pub fn encode(&self, h_vec: &[f64]) -> Result<Codeword> {
        if h_vec.len() != self.n {
            return Err(dim_err!(
                "encoder expects {} inputs, got {}",
                self.n,
                h_vec.len()
            ));
        }
        let w = self.weight().data();
        let values = (0..self.m)
            .map(|i| {
                w[i * self.n..(i + 1) * self.n]
                    .iter()
                    .zip(h_vec)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        Ok(Codeword {
            values,
            compression_ratio: self.compression_ratio(),
        })
    }

    /// Batched, differentiable encode: `h` is `B x n`, result `B x M`.
    pub fn encode_var<'t>(bound: &Bound<'t>, h: Var<'t>) -> Result<Var<'t>> {
        h.matmul_t(bound.get(WEIGHT)?)
    }

    /// Same trained rows, resized to `m` rows: extra rows are fresh
    /// Kaiming draws from `seed`, surplus rows are dropped.
    pub fn resized(&self, m: usize, seed: u64) -> Result<Self> {
        if m == 0 || m > self.n {
            return Err(contract_err!(
                "codeword length {m} must lie in 1..={}",
                self.n
            ));
        }
        let old = self.weight().data();
        let keep = m.min(self.m);
        let mut data = old[..keep * self.n].to_vec();
        if m > self.m {
            data.extend(gaussian_entries(m - self.m, self.n, 2.0 / self.n as f64, seed));
        }
        Self::from_weights(Tensor::param(vec![m, self.n], data)?)
    }
}
