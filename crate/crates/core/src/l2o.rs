//! Learned decoder: a coordinate-wise LSTM emits per-coordinate step
//! parameters for a momentum proximal-gradient update.
//!
//! One iteration, with `g(v) = W^T (W v - s)`:
//!
//! ```text
//! x^ = x - p * g(x)          y^ = y - p * g(y)
//! z  = (1 - b) * x^ + b * y^ - b1
//! x+ = prox_theta(z)
//! y+ = x+ + a * (x+ - x) + b2
//! ```
//!
//! `prox_theta` is soft-thresholding, applied either directly or inside the
//! coefficient domain of a [`SparseTransform`].

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::ndtensor::{Bound, ParamStore, Tape, Tensor, Var};
use crate::nn;
use crate::solvers;
use crate::transforms::{self, SparseTransform};

pub const DEFAULT_HIDDEN: usize = 20;
pub const LAYERS: usize = 2;
pub const HEADS: [&str; 6] = ["p", "a", "b", "b1", "b2", "theta"];
/// Upper bound of the momentum coefficient `a`.
pub const A_MAX: f64 = 1.0;

const HEAD_GAIN: f64 = 0.01;
/// Starts thresholds near `softplus(-4) ~ 0.018`.
const THETA_BIAS: f64 = -4.0;

/// `W^T (W v - s)`.
pub fn grad_f(w: ArrayView2<'_, f64>, s: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    solvers::fidelity_gradient(w, s, v)
}

/// Step size ceiling `2 / L` for a sampling matrix with Lipschitz constant `L`.
pub fn p_max(w: ArrayView2<'_, f64>) -> Result<f64> {
    let (l, _) = solvers::dominant_eigenpair(w);
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::Numerical(format!("Lipschitz estimate {l} is unusable")));
    }
    Ok(2.0 / l)
}

/// [`p_max`] on the tape, differentiable in `W`. Holding the power-iteration
/// vector `v` fixed, `||W v||^2` has the top eigenvalue's exact derivative.
pub(crate) fn p_max_var<'t>(w: Var<'t>) -> Result<Var<'t>> {
    let [m, n]: [usize; 2] = w.shape().as_slice().try_into().map_err(|_| dim_err!("W must be a matrix"))?;
    let values = w.value();
    let view = ArrayView2::from_shape((m, n), &values).map_err(|e| dim_err!("{e}"))?;
    let (l, v) = solvers::dominant_eigenpair(view);
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::Numerical(format!("Lipschitz estimate {l} is unusable")));
    }
    let v = w.tape().constant(vec![n, 1], v.to_vec())?;
    w.matmul(v)?.sum_squares().recip().scale(2.0).reshape(vec![1, 1])
}

/// Per-coordinate parameters of one iteration. Vectors of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct StepParams {
    pub p: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
    pub theta: Vec<f64>,
}

impl StepParams {
    /// Parameters under which one step is exactly an ISTA step.
    pub fn ista(n: usize, alpha: f64, lambda: f64) -> Self {
        Self {
            p: vec![alpha; n],
            a: vec![0.0; n],
            b: vec![0.0; n],
            b1: vec![0.0; n],
            b2: vec![0.0; n],
            theta: vec![alpha * lambda; n],
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    fn fields(&self) -> [&Vec<f64>; 6] {
        [&self.p, &self.a, &self.b, &self.b1, &self.b2, &self.theta]
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if self.fields().iter().any(|f| f.len() != n) {
            return Err(dim_err!("step parameter vectors differ in length"));
        }
        if self.theta.iter().any(|&t| t < 0.0) {
            return Err(contract_err!("negative threshold"));
        }
        Ok(())
    }
}

/// Recurrent state: hidden and cell values per layer, `rows x hidden` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub rows: usize,
    pub hidden: usize,
    pub h: [Vec<f64>; LAYERS],
    pub c: [Vec<f64>; LAYERS],
}

impl LstmState {
    pub fn zeros(rows: usize, hidden: usize) -> Self {
        let z = vec![0.0; rows * hidden];
        Self {
            rows,
            hidden,
            h: [z.clone(), z.clone()],
            c: [z.clone(), z],
        }
    }

    /// Every entry drawn from `N(0, 1)` with a seeded generator.
    pub fn seeded(rows: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> Vec<f64> {
            (0..rows * hidden)
                .map(|_| rng.sample(StandardNormal))
                .collect()
        };
        let (h0, c0, h1, c1) = (draw(), draw(), draw(), draw());
        Self {
            rows,
            hidden,
            h: [h0, h1],
            c: [c0, c1],
        }
    }

    fn bind<'t>(&self, tape: &'t Tape) -> Result<LstmVars<'t>> {
        let shape = vec![self.rows, self.hidden];
        let mk = |v: &Vec<f64>| tape.constant(shape.clone(), v.clone());
        Ok(LstmVars {
            h: [mk(&self.h[0])?, mk(&self.h[1])?],
            c: [mk(&self.c[0])?, mk(&self.c[1])?],
        })
    }
}

#[derive(Clone, Copy)]
pub(crate) struct LstmVars<'t> {
    h: [Var<'t>; LAYERS],
    c: [Var<'t>; LAYERS],
}

impl<'t> LstmVars<'t> {
    fn values(&self) -> LstmState {
        let shape = self.h[0].shape();
        LstmState {
            rows: shape[0],
            hidden: shape[1],
            h: [self.h[0].value(), self.h[1].value()],
            c: [self.c[0].value(), self.c[1].value()],
        }
    }
}

/// Step parameters as `batch x n` tape values.
#[derive(Clone, Copy)]
pub(crate) struct StepVars<'t> {
    p: Var<'t>,
    a: Var<'t>,
    b: Var<'t>,
    b1: Var<'t>,
    b2: Var<'t>,
    theta: Var<'t>,
}

impl<'t> StepVars<'t> {
    fn constant(tape: &'t Tape, sp: &StepParams, batch: usize) -> Result<Self> {
        let n = sp.len();
        let tile = |v: &Vec<f64>| -> Result<Var<'t>> {
            let data = (0..batch).flat_map(|_| v.iter().copied()).collect();
            tape.constant(vec![batch, n], data)
        };
        Ok(Self {
            p: tile(&sp.p)?,
            a: tile(&sp.a)?,
            b: tile(&sp.b)?,
            b1: tile(&sp.b1)?,
            b2: tile(&sp.b2)?,
            theta: tile(&sp.theta)?,
        })
    }

    fn values(&self) -> StepParams {
        StepParams {
            p: self.p.value(),
            a: self.a.value(),
            b: self.b.value(),
            b1: self.b1.value(),
            b2: self.b2.value(),
            theta: self.theta.value(),
        }
    }
}

/// The coordinate-wise parameter network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamNet {
    hidden: usize,
    params: ParamStore,
}

fn lstm_key(layer: usize, part: &str) -> String {
    format!("l2o.lstm.layer{layer}.{part}")
}

fn head_key(head: &str) -> String {
    format!("l2o.head.{head}")
}

const TRUNK: &str = "l2o.trunk";

impl ParamNet {
    pub fn init(hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(contract_err!("hidden size must be positive"));
        }
        let mut params = ParamStore::new();
        let mut seed_at = seed;
        let mut next = || {
            seed_at = seed_at.wrapping_add(1);
            seed_at
        };
        for layer in 0..LAYERS {
            let fan_in = if layer == 0 { 2 } else { hidden };
            for (part, cols) in [("Wih", fan_in), ("Whh", hidden)] {
                let data = crate::encoder::gaussian_entries(4 * hidden, cols, 2.0 / cols as f64, next());
                params.insert(lstm_key(layer, part), Tensor::param(vec![4 * hidden, cols], data)?);
            }
            for part in ["bih", "bhh"] {
                params.insert(lstm_key(layer, part), Tensor::param(vec![4 * hidden], vec![0.0; 4 * hidden])?);
            }
        }
        nn::init_linear(&mut params, TRUNK, hidden, hidden, 1.0, next())?;
        for head in HEADS {
            nn::init_linear(&mut params, &head_key(head), hidden, 1, HEAD_GAIN, next())?;
        }
        params
            .get_mut(&format!("{}.b", head_key("theta")))?
            .data_mut()
            .fill(THETA_BIAS);
        Ok(Self { hidden, params })
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let whh = store.get(&lstm_key(0, "Whh"))?;
        let hidden = whh.shape().get(1).copied().unwrap_or(0);
        let template = Self::init(hidden, 0)?;
        let mut params = ParamStore::new();
        for (name, t) in template.params.iter() {
            let got = store.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "{name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
            params.insert(name, got.clone());
        }
        Ok(Self { hidden, params })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Weight count touched per coordinate per iteration (biases excluded).
    pub fn flops_per_coordinate(&self) -> usize {
        let h = self.hidden;
        let lstm = 4 * h * 2 + 4 * h * h + LAYERS.saturating_sub(1) * (4 * h * h * 2);
        lstm + h * h + HEADS.len() * h
    }

    pub(crate) fn emit_var<'t>(
        &self,
        bound: &Bound<'t>,
        x: Var<'t>,
        g: Var<'t>,
        state: &LstmVars<'t>,
        p_max: Var<'t>,
    ) -> Result<(StepVars<'t>, LstmVars<'t>)> {
        let shape = x.shape();
        let rows = x.numel();
        let mut input = Var::concat_cols(&[x.reshape(vec![rows, 1])?, g.reshape(vec![rows, 1])?])?;
        let mut next = *state;
        for layer in 0..LAYERS {
            let wi = bound.get(&lstm_key(layer, "Wih"))?;
            let wh = bound.get(&lstm_key(layer, "Whh"))?;
            let bias = bound.get(&lstm_key(layer, "bih"))?.add(bound.get(&lstm_key(layer, "bhh"))?)?;
            let gates = input
                .matmul_t(wi)?
                .add(state.h[layer].matmul_t(wh)?)?
                .add_row(bias)?;
            let (h, c) = Var::lstm_cell(gates, state.c[layer])?;
            next.h[layer] = h;
            next.c[layer] = c;
            input = h;
        }
        let trunk = nn::linear(bound, TRUNK, input)?;
        let head = |name: &str| -> Result<Var<'t>> {
            nn::linear(bound, &head_key(name), trunk)?.reshape(shape.clone())
        };
        let params = StepVars {
            p: nn::linear(bound, &head_key("p"), trunk)?.sigmoid().matmul(p_max)?.reshape(shape.clone())?,
            a: head("a")?.sigmoid().scale(A_MAX),
            b: head("b")?,
            b1: head("b1")?,
            b2: head("b2")?,
            theta: head("theta")?.softplus(),
        };
        Ok((params, next))
    }

    /// Feeds each coordinate's `(x_i, g_i)` through the shared network.
    pub fn emit_params(
        &self,
        x: &[f64],
        g: &[f64],
        state: &LstmState,
        p_max: f64,
    ) -> Result<(StepParams, LstmState)> {
        if x.len() != g.len() || state.rows != x.len() || state.hidden != self.hidden {
            return Err(dim_err!(
                "x has {}, g has {}, state is {}x{} (hidden {})",
                x.len(),
                g.len(),
                state.rows,
                state.hidden,
                self.hidden
            ));
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let n = x.len();
        let xv = tape.constant(vec![1, n], x.to_vec())?;
        let gv = tape.constant(vec![1, n], g.to_vec())?;
        let pv = tape.constant(vec![1, 1], vec![p_max])?;
        let (sp, next) = self.emit_var(&bound, xv, gv, &state.bind(&tape)?, pv)?;
        Ok((sp.values(), next.values()))
    }
}

/// How the proximal step is realised.
#[derive(Debug, Clone, Copy)]
pub enum Prox<'a> {
    /// Soft-threshold the iterate itself.
    Identity,
    /// Threshold in the transform's coefficient domain, one threshold per
    /// channel row (the mean of that row's coordinate thresholds).
    Learned(&'a SparseTransform),
}

#[derive(Clone, Copy)]
pub(crate) enum ProxVars<'a, 't> {
    Identity,
    Learned {
        transform: &'a SparseTransform,
        bound: &'a Bound<'t>,
    },
}

impl<'a, 't> ProxVars<'a, 't> {
    fn apply(&self, z: Var<'t>, theta: Var<'t>) -> Result<Var<'t>> {
        match *self {
            ProxVars::Identity => z.soft_threshold(theta),
            ProxVars::Learned { transform, bound } => {
                let cfg = transform.config();
                let (batch, n) = (z.shape()[0], z.shape()[1]);
                let row = cfg.row_len();
                if n % row != 0 {
                    return Err(dim_err!("iterate length {n} is not a multiple of row length {row}"));
                }
                let na = n / row;
                let rows = transforms::to_rows(z, na, cfg.nt)?;
                let code = transform.ft_var(bound, rows)?;
                let theta_rows = nn::row_mean(transforms::to_rows(theta, na, cfg.nt)?)?;
                let shrunk = code.soft_threshold(nn::broadcast_col(theta_rows, cfg.n_i)?)?;
                transforms::from_rows(transform.fi_var(bound, shrunk)?, batch, na, cfg.nt)
            }
        }
    }
}

/// Where step parameters come from.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Learned(&'a ParamNet),
    /// The same parameters at every iteration and for every batch row.
    Frozen(&'a StepParams),
}

#[derive(Clone, Copy)]
pub(crate) enum PolicyVars<'a, 't> {
    Learned { net: &'a ParamNet, bound: &'a Bound<'t> },
    Frozen(&'a StepParams),
}

/// `(v W^T - s) W` for a batch `v: B x n`.
fn grad_var<'t>(v: Var<'t>, w: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
    v.matmul_t(w)?.sub(s)?.matmul(w)
}

fn step_var<'t>(
    x: Var<'t>,
    y: Var<'t>,
    sp: &StepVars<'t>,
    gx: Var<'t>,
    gy: Var<'t>,
    prox: &ProxVars<'_, 't>,
) -> Result<(Var<'t>, Var<'t>)> {
    let xh = x.sub(sp.p.mul(gx)?)?;
    let yh = y.sub(sp.p.mul(gy)?)?;
    let z = xh.sub(sp.b.mul(xh)?)?.add(sp.b.mul(yh)?)?.sub(sp.b1)?;
    let x_next = prox.apply(z, sp.theta)?;
    let y_next = x_next.add(sp.a.mul(x_next.sub(x)?)?)?.add(sp.b2)?;
    Ok((x_next, y_next))
}

/// Iterate, auxiliary variable and recurrent state of a batch of problems.
#[derive(Debug, Clone, PartialEq)]
pub struct L2OState {
    pub batch: usize,
    pub n: usize,
    /// `batch x n`, row-major.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lstm: LstmState,
    pub t: usize,
}

impl L2OState {
    /// `x = y = W^T s`, recurrent state seeded from `N(0, 1)`.
    pub fn warm_start(w: ArrayView2<'_, f64>, s: &[f64], hidden: usize, seed: u64) -> Result<Self> {
        let (m, n) = w.dim();
        if m == 0 || s.len() % m != 0 {
            return Err(dim_err!("{} observations do not split into codewords of {m}", s.len()));
        }
        let batch = s.len() / m;
        let mut x = Vec::with_capacity(batch * n);
        for chunk in s.chunks(m) {
            x.extend(w.t().dot(&ArrayView1::from(chunk)));
        }
        Ok(Self {
            batch,
            n,
            y: x.clone(),
            x,
            lstm: LstmState::seeded(batch * n, hidden, seed),
            t: 0,
        })
    }
}

/// One update with given parameters; the recurrent state is carried over.
pub fn l2o_step(
    state: &L2OState,
    params: &StepParams,
    w: ArrayView2<'_, f64>,
    s: &[f64],
    prox: Prox<'_>,
) -> Result<L2OState> {
    params.check()?;
    let (m, n) = w.dim();
    if state.n != n || params.len() != n || s.len() != state.batch * m || state.x.len() != state.batch * n {
        return Err(dim_err!(
            "state {}x{}, params {}, W {m}x{n}, s {}",
            state.batch,
            state.n,
            params.len(),
            s.len()
        ));
    }
    let tape = Tape::new();
    let wv = tape.constant(vec![m, n], w.iter().copied().collect())?;
    let sv = tape.constant(vec![state.batch, m], s.to_vec())?;
    let x = tape.constant(vec![state.batch, n], state.x.clone())?;
    let y = tape.constant(vec![state.batch, n], state.y.clone())?;
    let sp = StepVars::constant(&tape, params, state.batch)?;
    let tbound;
    let pv = match prox {
        Prox::Identity => ProxVars::Identity,
        Prox::Learned(t) => {
            tbound = t.params().bind(&tape);
            ProxVars::Learned { transform: t, bound: &tbound }
        }
    };
    let (xn, yn) = step_var(x, y, &sp, grad_var(x, wv, sv)?, grad_var(y, wv, sv)?, &pv)?;
    Ok(L2OState {
        x: xn.value(),
        y: yn.value(),
        lstm: state.lstm.clone(),
        t: state.t + 1,
        ..*state
    })
}

/// Per-iteration diagnostics, each entry averaged over the batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    /// `1/2 ||s - W x||^2 + lambda ||x||_1` after each step.
    pub objective: Vec<f64>,
    /// `||x_t - x_{t-1}||_2`.
    pub displacement: Vec<f64>,
    pub b1_norm: Vec<f64>,
    pub b2_norm: Vec<f64>,
    /// Number of parameter emissions (learned policy only).
    pub emissions: usize,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.objective.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objective.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub iters: usize,
    /// Seeds the initial recurrent state.
    pub seed: u64,
    /// Weight of the l1 term in the recorded objective.
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub batch: usize,
    /// `batch x n`, row-major.
    pub x: Vec<f64>,
    pub trace: Trace,
}

fn mean_row_norm(v: &[f64], n: usize) -> f64 {
    let rows = v.len() / n;
    v.chunks(n)
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum::<f64>()
        / rows as f64
}

struct Recorder<'a> {
    w: ArrayView2<'a, f64>,
    s: &'a [f64],
    lambda: f64,
}

impl Recorder<'_> {
    fn objective(&self, x: &[f64]) -> f64 {
        let (m, n) = self.w.dim();
        let rows = x.len() / n;
        let mut total = 0.0;
        for (xr, sr) in x.chunks(n).zip(self.s.chunks(m)) {
            let xr = ArrayView1::from(xr);
            let r = &ArrayView1::from(sr) - &self.w.dot(&xr);
            total += 0.5 * r.dot(&r) + self.lambda * xr.iter().map(|v| v.abs()).sum::<f64>();
        }
        total / rows as f64
    }
}

/// Runs `iters` iterations on a tape and returns the final iterate.
#[allow(clippy::too_many_arguments)]
pub(crate) fn unroll<'t>(
    tape: &'t Tape,
    policy: PolicyVars<'_, 't>,
    prox: ProxVars<'_, 't>,
    w: Var<'t>,
    s: Var<'t>,
    iters: usize,
    seed: u64,
    mut record: Option<(&mut Trace, f64)>,
) -> Result<Var<'t>> {
    if iters == 0 {
        return Err(contract_err!("at least one iteration is required"));
    }
    let (batch, n) = (s.shape()[0], w.shape()[1]);
    let p_max = match policy {
        PolicyVars::Learned { .. } => Some(p_max_var(w)?),
        PolicyVars::Frozen(_) => None,
    };
    let mut x = s.matmul(w)?;
    let mut y = x;
    let mut lstm = match policy {
        PolicyVars::Learned { net, .. } => Some(LstmState::seeded(batch * n, net.hidden, seed).bind(tape)?),
        PolicyVars::Frozen(_) => None,
    };
    let frozen = match policy {
        PolicyVars::Frozen(sp) => {
            sp.check()?;
            if sp.len() != n {
                return Err(dim_err!("{} frozen parameters for {n} coordinates", sp.len()));
            }
            Some(StepVars::constant(tape, sp, batch)?)
        }
        PolicyVars::Learned { .. } => None,
    };
    let (wvals, svals) = (w.value(), s.value());
    let wview = ArrayView2::from_shape(w.shape().as_slice().try_into().map(|[a, b]: [usize; 2]| (a, b)).unwrap(), &wvals)
        .map_err(|e| dim_err!("{e}"))?;
    for _ in 0..iters {
        let gx = grad_var(x, w, s)?;
        let gy = grad_var(y, w, s)?;
        let sp = match (policy, &mut lstm, p_max) {
            (PolicyVars::Learned { net, bound }, Some(state), Some(p_max)) => {
                let (sp, next) = net.emit_var(bound, x, gx, state, p_max)?;
                *state = next;
                sp
            }
            _ => frozen.expect("frozen parameters are present"),
        };
        let (xn, yn) = step_var(x, y, &sp, gx, gy, &prox)?;
        if let Some((trace, lambda)) = record.as_mut() {
            let rec = Recorder { w: wview, s: &svals, lambda: *lambda };
            let (xv, prev) = (xn.value(), x.value());
            let diff: Vec<f64> = xv.iter().zip(&prev).map(|(a, b)| a - b).collect();
            trace.objective.push(rec.objective(&xv));
            trace.displacement.push(mean_row_norm(&diff, n));
            trace.b1_norm.push(mean_row_norm(&sp.b1.value(), n));
            trace.b2_norm.push(mean_row_norm(&sp.b2.value(), n));
            if lstm.is_some() {
                trace.emissions += 1;
            }
            if !trace.objective.last().is_some_and(|v| v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "objective diverged at iteration {}",
                    trace.objective.len()
                )));
            }
        }
        x = xn;
        y = yn;
    }
    Ok(x)
}

/// Decodes a batch of codewords `s` (`batch x M`, row-major).
pub fn decode(
    policy: Policy<'_>,
    prox: Prox<'_>,
    w: ArrayView2<'_, f64>,
    s: &[f64],
    opts: DecodeOptions,
) -> Result<DecodeOutput> {
    if opts.iters == 0 {
        return Err(contract_err!("at least one iteration is required"));
    }
    let (m, n) = w.dim();
    if m == 0 || s.len() % m != 0 || s.is_empty() {
        return Err(dim_err!("{} observations do not split into codewords of {m}", s.len()));
    }
    let batch = s.len() / m;
    let tape = Tape::new();
    let wv = tape.constant(vec![m, n], w.iter().copied().collect())?;
    let sv = tape.constant(vec![batch, m], s.to_vec())?;
    let (nbound, tbound);
    let pol = match policy {
        Policy::Learned(net) => {
            nbound = net.params().bind(&tape);
            PolicyVars::Learned { net, bound: &nbound }
        }
        Policy::Frozen(sp) => PolicyVars::Frozen(sp),
    };
    let pv = match prox {
        Prox::Identity => ProxVars::Identity,
        Prox::Learned(t) => {
            tbound = t.params().bind(&tape);
            ProxVars::Learned { transform: t, bound: &tbound }
        }
    };
    let mut trace = Trace::default();
    let x = unroll(&tape, pol, pv, wv, sv, opts.iters, opts.seed, Some((&mut trace, opts.lambda)))?;
    Ok(DecodeOutput {
        batch,
        x: x.value(),
        trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub final_displacement: f64,
    pub b1_norm: Vec<f64>,
    pub b2_norm: Vec<f64>,
    /// First iteration (1-based) whose displacement is below the threshold.
    pub first_below: Option<usize>,
    pub threshold: f64,
}

pub fn convergence_report(trace: &Trace, threshold: f64) -> Result<ConvergenceReport> {
    if trace.is_empty() {
        return Err(contract_err!("empty trace"));
    }
    Ok(ConvergenceReport {
        iterations: trace.len(),
        final_displacement: *trace.displacement.last().expect("nonempty"),
        b1_norm: trace.b1_norm.clone(),
        b2_norm: trace.b2_norm.clone(),
        first_below: trace.displacement.iter().position(|&d| d < threshold).map(|i| i + 1),
        threshold,
    })
}
