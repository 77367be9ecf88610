//! Learned per-row sparse transform `f_t` (with top-G selection) and its
//! mirror `f_i`.
//!
//! A row is the real/imaginary concatenation of one delay row of the
//! truncated channel, length `2 * nt`.

use std::rc::Rc;

use ndarray::Array3;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::ndtensor::{Bound, ParamStore, Tape, Tensor, Var};
use crate::nn;

/// Key of the non-trainable tensor that records `G` in checkpoints.
pub const TOP_G_KEY: &str = "meta.top_g";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformConfig {
    pub nt: usize,
    pub hidden: [usize; 2],
    pub n_i: usize,
    pub top_g: usize,
}

impl TransformConfig {
    /// Sized for 8 antennas: widths (32, 32), 64 coefficients, 13 kept.
    pub fn desk(nt: usize) -> Self {
        Self {
            nt,
            hidden: [32, 32],
            n_i: 64,
            top_g: 13,
        }
    }

    /// Widths (128, 128), 256 coefficients, 51 kept.
    pub fn full_scale(nt: usize) -> Self {
        Self {
            nt,
            hidden: [128, 128],
            n_i: 256,
            top_g: 51,
        }
    }

    pub fn row_len(&self) -> usize {
        2 * self.nt
    }

    /// Layer widths of `f_t`, input first.
    pub fn widths(&self) -> [usize; 4] {
        [self.row_len(), self.hidden[0], self.hidden[1], self.n_i]
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths().contains(&0) {
            return Err(contract_err!("transform widths must be positive: {:?}", self.widths()));
        }
        if self.top_g == 0 || self.top_g > self.n_i {
            return Err(contract_err!(
                "top_g = {} must lie in 1..={}",
                self.top_g,
                self.n_i
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseTransform {
    cfg: TransformConfig,
    params: ParamStore,
}

fn layer(net: &str, i: usize) -> String {
    format!("{net}.layer{i}")
}

impl SparseTransform {
    pub fn init(cfg: TransformConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let w = cfg.widths();
        for i in 0..3 {
            nn::init_linear(&mut params, &layer("ft", i), w[i], w[i + 1], 1.0, seed.wrapping_add(i as u64))?;
        }
        for i in 0..3 {
            let (fan_in, out) = (w[3 - i], w[2 - i]);
            nn::init_linear(&mut params, &layer("fi", i), fan_in, out, 1.0, seed.wrapping_add(10 + i as u64))?;
        }
        params.insert(TOP_G_KEY, Tensor::new(vec![1], vec![cfg.top_g as f64])?);
        Ok(Self { cfg, params })
    }

    /// Rebuilds a transform from checkpoint tensors, inferring the widths.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let shape = |name: String| -> Result<Vec<usize>> { Ok(store.get(&name)?.shape().to_vec()) };
        let w0 = shape(format!("{}.W", layer("ft", 0)))?;
        let w1 = shape(format!("{}.W", layer("ft", 1)))?;
        let w2 = shape(format!("{}.W", layer("ft", 2)))?;
        let (&[h0, inp], &[h1, _], &[n_i, _]) = (w0.as_slice(), w1.as_slice(), w2.as_slice()) else {
            return Err(Error::Format("transform weights must be rank 2".into()));
        };
        if inp % 2 != 0 {
            return Err(Error::Format(format!("transform input width {inp} is odd")));
        }
        let top_g = store.get(TOP_G_KEY)?.item()? as usize;
        let cfg = TransformConfig {
            nt: inp / 2,
            hidden: [h0, h1],
            n_i,
            top_g,
        };
        cfg.validate()?;
        let mut params = ParamStore::new();
        let w = cfg.widths();
        for (net, dims) in [
            ("ft", [(w[0], w[1]), (w[1], w[2]), (w[2], w[3])]),
            ("fi", [(w[3], w[2]), (w[2], w[1]), (w[1], w[0])]),
        ] {
            for (i, (fan_in, out)) in dims.into_iter().enumerate() {
                let p = layer(net, i);
                let wt = store.get(&format!("{p}.W"))?;
                let bt = store.get(&format!("{p}.b"))?;
                if wt.shape() != [out, fan_in] || bt.shape() != [out] {
                    return Err(Error::Format(format!(
                        "{p} has shapes {:?}/{:?}, expected [{out}, {fan_in}]/[{out}]",
                        wt.shape(),
                        bt.shape()
                    )));
                }
                params.insert(format!("{p}.W"), wt.clone());
                params.insert(format!("{p}.b"), bt.clone());
            }
        }
        params.insert(TOP_G_KEY, store.get(TOP_G_KEY)?.clone());
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &TransformConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Multiply-accumulates of one forward pass of `f_t` over one row.
    pub fn flops_per_row(&self) -> usize {
        let w = self.cfg.widths();
        w[0] * w[1] + w[1] * w[2] + w[2] * w[3]
    }

    fn mlp<'t>(bound: &Bound<'t>, net: &str, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for i in 0..3 {
            h = nn::linear(bound, &layer(net, i), h)?;
            if i < 2 {
                h = h.max0();
            }
        }
        Ok(h)
    }

    /// `f_t` on `rows x 2nt`, keeping the `G` largest magnitudes per row.
    pub fn ft_var<'t>(&self, bound: &Bound<'t>, rows: Var<'t>) -> Result<Var<'t>> {
        self.check_cols(&rows, self.cfg.row_len())?;
        Self::mlp(bound, "ft", rows)?.top_k_rows(self.cfg.top_g)
    }

    /// `f_i` on `rows x n_i`.
    pub fn fi_var<'t>(&self, bound: &Bound<'t>, code: Var<'t>) -> Result<Var<'t>> {
        self.check_cols(&code, self.cfg.n_i)?;
        Self::mlp(bound, "fi", code)
    }

    fn check_cols(&self, v: &Var<'_>, cols: usize) -> Result<()> {
        match v.shape().as_slice() {
            [_, c] if *c == cols => Ok(()),
            s => Err(dim_err!("expected rows of length {cols}, got shape {s:?}")),
        }
    }

    fn eval_rows(&self, net: &str, data: &[f64], cols: usize) -> Result<Vec<f64>> {
        if data.len() % cols != 0 {
            return Err(dim_err!("{} values do not split into rows of {cols}", data.len()));
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let x = tape.constant(vec![data.len() / cols, cols], data.to_vec())?;
        let y = if net == "ft" {
            self.ft_var(&bound, x)?
        } else {
            self.fi_var(&bound, x)?
        };
        Ok(y.value())
    }

    pub fn apply_ft(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.cfg.row_len() {
            return Err(dim_err!("f_t expects {} inputs, got {}", self.cfg.row_len(), row.len()));
        }
        self.eval_rows("ft", row, self.cfg.row_len())
    }

    pub fn apply_fi(&self, code: &[f64]) -> Result<Vec<f64>> {
        if code.len() != self.cfg.n_i {
            return Err(dim_err!("f_i expects {} inputs, got {}", self.cfg.n_i, code.len()));
        }
        self.eval_rows("fi", code, self.cfg.n_i)
    }

    /// `||row - f_i(f_t(row))||^2` summed over the rows of `rows`.
    pub fn transform_loss_var<'t>(&self, bound: &Bound<'t>, rows: Var<'t>) -> Result<Var<'t>> {
        let back = self.fi_var(bound, self.ft_var(bound, rows)?)?;
        Ok(rows.sub(back)?.sum_squares())
    }

    /// Reconstruction loss of a `2 x na x nt` truncated channel.
    pub fn transform_loss(&self, h_trunc: &Array3<f64>) -> Result<f64> {
        let &[two, na, nt] = h_trunc.shape() else { unreachable!() };
        if two != 2 || nt != self.cfg.nt {
            return Err(dim_err!(
                "channel shape {:?} does not match nt = {}",
                h_trunc.shape(),
                self.cfg.nt
            ));
        }
        let h_vec: Vec<f64> = h_trunc.iter().copied().collect();
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let x = tape.constant(vec![1, h_vec.len()], h_vec)?;
        let rows = to_rows(x, na, nt)?;
        self.transform_loss_var(&bound, rows)?.item()
    }
}

/// Gather index taking `batch x (2 na nt)` vectors (real plane then imaginary
/// plane) to `(batch na) x 2nt` rows `[re row | im row]`.
pub(crate) fn rows_index(batch: usize, na: usize, nt: usize) -> Rc<[usize]> {
    let n = 2 * na * nt;
    let mut ix = Vec::with_capacity(batch * n);
    for b in 0..batch {
        for r in 0..na {
            for p in 0..2 {
                for j in 0..nt {
                    ix.push(b * n + p * na * nt + r * nt + j);
                }
            }
        }
    }
    nn::index(ix)
}

/// Inverse of [`rows_index`].
pub(crate) fn vec_index(batch: usize, na: usize, nt: usize) -> Rc<[usize]> {
    let fwd = rows_index(batch, na, nt);
    let mut inv = vec![0; fwd.len()];
    for (dst, &src) in fwd.iter().enumerate() {
        inv[src] = dst;
    }
    nn::index(inv)
}

pub(crate) fn to_rows<'t>(x: Var<'t>, na: usize, nt: usize) -> Result<Var<'t>> {
    let batch = x.shape()[0];
    x.gather(rows_index(batch, na, nt), vec![batch * na, 2 * nt])
}

pub(crate) fn from_rows<'t>(rows: Var<'t>, batch: usize, na: usize, nt: usize) -> Result<Var<'t>> {
    rows.gather(vec_index(batch, na, nt), vec![batch, 2 * na * nt])
}
