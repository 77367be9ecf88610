//! Small building blocks shared by the learned components.

use std::rc::Rc;

use crate::encoder::gaussian_entries;
use crate::error::Result;
use crate::ndtensor::{Bound, ParamStore, Tensor, Var};

/// Kaiming-normal weight (`out x fan_in`, variance `2 / fan_in`) times `gain`,
/// plus a zero bias of length `out`.
pub(crate) fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    out: usize,
    gain: f64,
    seed: u64,
) -> Result<()> {
    let w: Vec<f64> = gaussian_entries(out, fan_in, 2.0 / fan_in as f64, seed)
        .into_iter()
        .map(|v| v * gain)
        .collect();
    store.insert(format!("{prefix}.W"), Tensor::param(vec![out, fan_in], w)?);
    store.insert(format!("{prefix}.b"), Tensor::param(vec![out], vec![0.0; out])?);
    Ok(())
}

/// Broadcasts a `rows x 1` column over `cols` columns.
pub(crate) fn broadcast_col<'t>(v: Var<'t>, cols: usize) -> Result<Var<'t>> {
    let ones = v.tape().constant(vec![1, cols], vec![1.0; cols])?;
    v.matmul(ones)
}

/// Row means of a `rows x cols` matrix, as `rows x 1`.
pub(crate) fn row_mean<'t>(v: Var<'t>) -> Result<Var<'t>> {
    let cols = v.shape()[1];
    let ones = v.tape().constant(vec![cols, 1], vec![1.0 / cols as f64; cols])?;
    v.matmul(ones)
}

/// `x W^T + b` for `x: rows x in`.
pub(crate) fn linear<'t>(bound: &Bound<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let w = bound.get(&format!("{prefix}.W"))?;
    let b = bound.get(&format!("{prefix}.b"))?;
    x.matmul_t(w)?.add_row(b)
}

/// Index map for [`Var::gather`].
pub(crate) fn index(ix: Vec<usize>) -> Rc<[usize]> {
    ix.into()
}
