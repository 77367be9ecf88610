use ndarray::{Array1, ArrayView1};

use super::model::CsiModel;
use crate::channelgen::Dataset;
use crate::error::{contract_err, dim_err, Result};
use crate::l2o::Trace;
use crate::solvers::{self, gaussian_sampling_matrix, LassoProblem};

/// Samples decoded per tape during evaluation.
pub const EVAL_CHUNK: usize = 64;

/// `10 log10(mean_i ||h_i - e_i||^2 / ||h_i||^2)` over rows of length `n`.
/// An exact reconstruction gives negative infinity.
pub fn nmse_db(truth: &[f64], est: &[f64], n: usize) -> Result<f64> {
    if truth.len() != est.len() || n == 0 || truth.len() % n != 0 || truth.is_empty() {
        return Err(dim_err!(
            "cannot compare {} and {} values in rows of {n}",
            truth.len(),
            est.len()
        ));
    }
    let mut total = 0.0;
    for (h, e) in truth.chunks(n).zip(est.chunks(n)) {
        let norm: f64 = h.iter().map(|v| v * v).sum();
        if norm == 0.0 {
            return Err(contract_err!("a reference channel has zero norm"));
        }
        let err: f64 = h.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum();
        total += err / norm;
    }
    Ok(10.0 * (total / (truth.len() / n) as f64).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Complexity {
    pub encoder_flops: usize,
    pub decoder_flops: usize,
    /// Decoder cost of a single iteration.
    pub decoder_flops_per_iter: usize,
    pub encoder_params: usize,
    pub decoder_params: usize,
}

/// One FLOP per weight. Per decoder iteration: the transform pair over every
/// delay row, the parameter network per coordinate, and two gradient
/// evaluations of `2 M n` each.
pub fn complexity_report(model: &CsiModel, iters: usize) -> Complexity {
    let (m, n) = (model.m(), model.n());
    let transform = model
        .transform
        .as_ref()
        .map_or(0, |t| 2 * model.na() * t.flops_per_row());
    let per_iter = transform + n * model.net.flops_per_coordinate() + 2 * (2 * m * n);
    Complexity {
        encoder_flops: model.encoder.flops(),
        decoder_flops: iters * per_iter,
        decoder_flops_per_iter: per_iter,
        encoder_params: model.encoder.param_count(),
        decoder_params: model.transform.as_ref().map_or(0, |t| t.param_count()) + model.net.param_count(),
    }
}

/// Encoder FLOPs for an `na x nt` channel at compression `1 / cr`.
pub fn encoder_flops(na: usize, nt: usize, cr: usize) -> Result<usize> {
    let n = 2 * na * nt;
    if cr == 0 || n % cr != 0 {
        return Err(contract_err!("compression 1/{cr} does not divide {n} real entries"));
    }
    Ok(n * (n / cr))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub nmse_db: f64,
    /// Fidelity `1/2 ||s - W x||^2` per iteration, averaged over samples.
    pub trace: Trace,
    pub complexity: Complexity,
    pub params: usize,
    /// Feedback bits when the codewords were quantized.
    pub bits: Option<usize>,
}

fn stack(d: &Dataset, range: std::ops::Range<usize>) -> Vec<f64> {
    d.samples[range].iter().flat_map(|s| s.h_vec.iter().copied()).collect()
}

/// Reconstructs every sample of `d`, optionally passing each codeword through
/// `channel` (e.g. a quantizer) first.
pub fn reconstruct(
    model: &CsiModel,
    d: &Dataset,
    iters: usize,
    seed: u64,
    channel: Option<&dyn Fn(&[f64]) -> Vec<f64>>,
) -> Result<(Vec<f64>, Trace)> {
    let mut est = Vec::with_capacity(d.len() * model.n());
    let mut trace = Trace::default();
    for (ci, start) in (0..d.len()).step_by(EVAL_CHUNK).enumerate() {
        let end = (start + EVAL_CHUNK).min(d.len());
        let mut s = model.encode_batch(&stack(d, start..end))?;
        if let Some(f) = channel {
            s = f(&s);
        }
        let out = model.decode_batch(&s, iters, seed.wrapping_add(ci as u64))?;
        let wgt = (end - start) as f64 / d.len() as f64;
        merge_trace(&mut trace, &out.trace, wgt);
        est.extend(out.x);
    }
    Ok((est, trace))
}

fn merge_trace(acc: &mut Trace, t: &Trace, wgt: f64) {
    let add = |a: &mut Vec<f64>, b: &[f64]| {
        if a.is_empty() {
            a.resize(b.len(), 0.0);
        }
        a.iter_mut().zip(b).for_each(|(x, y)| *x += wgt * y);
    };
    add(&mut acc.objective, &t.objective);
    add(&mut acc.displacement, &t.displacement);
    add(&mut acc.b1_norm, &t.b1_norm);
    add(&mut acc.b2_norm, &t.b2_norm);
    acc.emissions = t.emissions;
}

pub fn evaluate(model: &CsiModel, d: &Dataset, iters: usize, seed: u64) -> Result<EvalReport> {
    check_dataset(model, d)?;
    let (est, trace) = reconstruct(model, d, iters, seed, None)?;
    Ok(EvalReport {
        nmse_db: nmse_db(&stack(d, 0..d.len()), &est, model.n())?,
        trace,
        complexity: complexity_report(model, iters),
        params: model.param_count(),
        bits: None,
    })
}

pub(crate) fn check_dataset(model: &CsiModel, d: &Dataset) -> Result<()> {
    if d.is_empty() {
        return Err(contract_err!("empty dataset"));
    }
    if d.config.na != model.na() || d.config.nt != model.nt() {
        return Err(dim_err!(
            "dataset is {}x{}, model expects {}x{}",
            d.config.na,
            d.config.nt,
            model.na(),
            model.nt()
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateResult {
    pub m: usize,
    /// `M / n`.
    pub ratio: f64,
    pub nmse_db: f64,
}

/// Evaluates one checkpoint at several codeword lengths without retraining.
/// Rows missing from the trained encoder are drawn from `seed`.
pub fn multirate_eval(model: &CsiModel, d: &Dataset, ms: &[usize], iters: usize, seed: u64) -> Result<Vec<RateResult>> {
    check_dataset(model, d)?;
    ms.iter()
        .map(|&m| {
            if m == 0 || m > model.n() {
                return Err(contract_err!("codeword length {m} must lie in 1..={}", model.n()));
            }
            let resized = if m == model.m() {
                model.clone()
            } else {
                model.with_codeword_len(m, seed.wrapping_add(m as u64))?
            };
            Ok(RateResult {
                m,
                ratio: m as f64 / model.n() as f64,
                nmse_db: evaluate(&resized, d, iters, seed)?.nmse_db,
            })
        })
        .collect()
}

/// Pairs `(smaller M, larger M)` where the larger codeword did worse.
pub fn ordering_violations(rows: &[RateResult]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for a in rows {
        for b in rows {
            if a.m < b.m && b.nmse_db > a.nmse_db {
                out.push((a.m, b.m));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct IstaBaseline {
    /// `(lambda, nmse_db)` for every candidate.
    pub sweep: Vec<(f64, f64)>,
    pub best_lambda: f64,
    pub best_nmse_db: f64,
}

/// ISTA from zero with step `1/L` on a Gaussian `N(0, 1/M)` sampling matrix,
/// keeping the best regularisation weight from `lambdas`.
pub fn ista_baseline(d: &Dataset, m: usize, lambdas: &[f64], iters: usize, seed: u64) -> Result<IstaBaseline> {
    if d.is_empty() || lambdas.is_empty() {
        return Err(contract_err!("need samples and at least one lambda"));
    }
    let n = d.config.h_len();
    let w = gaussian_sampling_matrix(m, n, seed);
    let truth = stack(d, 0..d.len());
    let mut sweep = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut est = Vec::with_capacity(truth.len());
        for sample in &d.samples {
            let s = w.dot(&ArrayView1::from(&sample.h_vec));
            let p = LassoProblem::with_safe_step(w.clone(), s, lambda)?;
            let x = solvers::ista(&p, Array1::zeros(n).view(), iters)?
                .pop()
                .unwrap_or_else(|| Array1::zeros(n));
            est.extend(x);
        }
        sweep.push((lambda, nmse_db(&truth, &est, n)?));
    }
    let &(best_lambda, best_nmse_db) = sweep
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty sweep");
    Ok(IstaBaseline {
        sweep,
        best_lambda,
        best_nmse_db,
    })
}
