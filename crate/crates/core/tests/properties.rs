use csifb::channelgen::{flatten, generate, sparsify, synthesize_indexed, unflatten, GenConfig, Split};
use csifb::encoder::LinearEncoder;
use csifb::harness::{loss, nmse_db, CsiModel, ModelConfig};
use csifb::ndtensor::{Tape, Var};
use csifb::quantize::{fit_lloyd_max, pack, unpack};
use csifb::solvers::{
    gaussian_sampling_matrix, ista, objective, soft_threshold, solve_oracle, ista_step, LassoProblem,
};
use csifb::transforms::{SparseTransform, TransformConfig};
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(32)
}

type UnaryOp = for<'t> fn(Var<'t>) -> Var<'t>;

/// Max relative error between the tape gradient of `sum(w * op(x))` and
/// central differences with step 1e-5.
fn unary_fd_error(op: UnaryOp, x: &[f64], w: &[f64]) -> f64 {
    let f = |v: &[f64]| -> f64 {
        let tape = Tape::new();
        let a = tape.constant(vec![v.len()], v.to_vec()).unwrap();
        let c = tape.constant(vec![w.len()], w.to_vec()).unwrap();
        op(a).mul(c).unwrap().sum().item().unwrap()
    };
    let tape = Tape::new();
    let a = tape.variable(vec![x.len()], x.to_vec()).unwrap();
    let c = tape.constant(vec![w.len()], w.to_vec()).unwrap();
    let grads = tape.backward(op(a).mul(c).unwrap().sum()).unwrap();
    let g = grads.get(a).unwrap().to_vec();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let (mut p, mut m) = (x.to_vec(), x.to_vec());
        p[i] += h;
        m[i] -= h;
        let fd = (f(&p) - f(&m)) / (2.0 * h);
        worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6));
    }
    worst
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn smooth_unary_gradients(seed in any::<u64>(), len in 1usize..=16) {
        let x = randn(seed, len);
        let w = randn(seed ^ 1, len);
        let ops: [UnaryOp; 6] = [
            |v| v.sigmoid(),
            |v| v.softplus(),
            |v| v.tanh(),
            |v| v.square(),
            |v| v.scale(-1.7),
            |v| v.square().add_scalar(0.5).recip(),
        ];
        for op in ops {
            prop_assert!(unary_fd_error(op, &x, &w) < 1e-4);
        }
    }

    #[test]
    fn piecewise_gradients_away_from_kinks(seed in any::<u64>(), len in 1usize..=16) {
        let x: Vec<f64> = randn(seed, len).into_iter().filter(|v| v.abs() > 1e-3).collect();
        prop_assume!(!x.is_empty());
        let w = randn(seed ^ 2, x.len());
        let ops: [UnaryOp; 2] = [|v| v.abs(), |v| v.max0()];
        for op in ops {
            prop_assert!(unary_fd_error(op, &x, &w) < 1e-4);
        }
    }

    #[test]
    fn matmul_gradient(seed in any::<u64>(), r in 1usize..=6, k in 1usize..=6, c in 1usize..=6) {
        let a = randn(seed, r * k);
        let b = randn(seed ^ 3, k * c);
        let f = |a: &[f64]| -> f64 {
            let tape = Tape::new();
            let x = tape.constant(vec![r, k], a.to_vec()).unwrap();
            let y = tape.constant(vec![k, c], b.clone()).unwrap();
            x.matmul(y).unwrap().sum().item().unwrap()
        };
        let tape = Tape::new();
        let x = tape.variable(vec![r, k], a.clone()).unwrap();
        let y = tape.constant(vec![k, c], b.clone()).unwrap();
        let grads = tape.backward(x.matmul(y).unwrap().sum()).unwrap();
        let g = grads.get(x).unwrap();
        for i in 0..a.len() {
            let (mut p, mut m) = (a.clone(), a.clone());
            p[i] += 1e-5;
            m[i] -= 1e-5;
            let fd = (f(&p) - f(&m)) / 2e-5;
            prop_assert!((fd - g[i]).abs() / fd.abs().max(1e-6) < 1e-4 || (fd - g[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_is_bit_identical(seed in any::<u64>()) {
        let x = randn(seed, 12);
        let run = || {
            let tape = Tape::new();
            let a = tape.constant(vec![3, 4], x.clone()).unwrap();
            let b = tape.constant(vec![4, 3], x.clone()).unwrap();
            a.matmul(b).unwrap().tanh().softplus().value()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn dft_is_unitary(seed in any::<u64>(), nc in 1usize..=32, nt in 1usize..=16) {
        let re = randn(seed, nc * nt);
        let im = randn(seed ^ 4, nc * nt);
        let h = Array2::from_shape_fn((nc, nt), |(i, j)| Complex64::new(re[i * nt + j], im[i * nt + j]));
        let norm = |a: &Array2<Complex64>| a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        prop_assert!((norm(&sparsify(&h)) - norm(&h)).abs() < 1e-10 * norm(&h).max(1.0));
    }

    #[test]
    fn flatten_round_trip(seed in any::<u64>(), na in 1usize..=8, nt in 1usize..=8) {
        let v = randn(seed, 2 * na * nt);
        let t = unflatten(&v, na, nt).unwrap();
        prop_assert_eq!(flatten(&t), v.clone());
        prop_assert_eq!(unflatten(&flatten(&t), na, nt).unwrap(), t);
    }

    #[test]
    fn encoder_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let enc = LinearEncoder::init_kaiming(8, 32, seed).unwrap();
        let x = randn(seed ^ 5, 32);
        let y = randn(seed ^ 6, 32);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
        let (ex, ey, em) = (enc.encode(&x).unwrap(), enc.encode(&y).unwrap(), enc.encode(&mix).unwrap());
        for i in 0..8 {
            prop_assert!((em.values[i] - alpha * ex.values[i] - beta * ey.values[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn encoder_flops_equal_params(m in 1usize..=64, extra in 0usize..=64) {
        let enc = LinearEncoder::init_kaiming(m, m + extra, 0).unwrap();
        prop_assert_eq!(enc.flops(), enc.param_count());
        prop_assert_eq!(enc.flops(), m * (m + extra));
    }

    #[test]
    fn transform_output_sparsity(seed in any::<u64>(), g in 1usize..=16) {
        let cfg = TransformConfig { nt: 4, hidden: [8, 8], n_i: 16, top_g: g };
        let t = SparseTransform::init(cfg, seed).unwrap();
        let out = t.apply_ft(&randn(seed ^ 7, 8)).unwrap();
        let nnz = out.iter().filter(|v| **v != 0.0).count();
        prop_assert!(nnz <= g);
        let mut mags: Vec<f64> = t.apply_ft(&randn(seed ^ 7, 8)).unwrap().iter().map(|v| v.abs()).collect();
        mags.sort_by(|a, b| b.total_cmp(a));
        // Plain MLP output before selection decides whether the G-th magnitude is distinct.
        let full = SparseTransform::init(TransformConfig { top_g: 16, ..cfg }, seed).unwrap();
        let mut raw: Vec<f64> = full.apply_ft(&randn(seed ^ 7, 8)).unwrap().iter().map(|v| v.abs()).collect();
        raw.sort_by(|a, b| b.total_cmp(a));
        if g < 16 && raw[g - 1] > raw[g] && raw[g - 1] > 0.0 {
            prop_assert_eq!(nnz, g);
        }
    }

    #[test]
    fn transform_rows_are_independent(seed in any::<u64>()) {
        let cfg = TransformConfig { nt: 4, hidden: [8, 8], n_i: 16, top_g: 4 };
        let t = SparseTransform::init(cfg, seed).unwrap();
        let rows = randn(seed ^ 8, 5 * 8);
        let perm = [3usize, 0, 4, 1, 2];
        let permuted: Vec<f64> = perm.iter().flat_map(|&r| rows[r * 8..(r + 1) * 8].to_vec()).collect();
        let run = |data: &[f64]| {
            let tape = Tape::new();
            let bound = t.params().bind(&tape);
            let x = tape.constant(vec![5, 8], data.to_vec()).unwrap();
            t.ft_var(&bound, x).unwrap().value()
        };
        let (a, b) = (run(&rows), run(&permuted));
        for (i, &r) in perm.iter().enumerate() {
            prop_assert_eq!(&b[i * 16..(i + 1) * 16], &a[r * 16..(r + 1) * 16]);
        }
    }

    #[test]
    fn transform_loss_non_negative(seed in any::<u64>()) {
        let t = SparseTransform::init(TransformConfig::desk(8), seed).unwrap();
        let h = unflatten(&randn(seed ^ 9, 128), 8, 8).unwrap();
        prop_assert!(t.transform_loss(&h).unwrap() >= 0.0);
    }

    #[test]
    fn ista_is_monotone(seed in any::<u64>(), lambda in 0.001f64..0.5) {
        let w = gaussian_sampling_matrix(8, 16, seed);
        let s = Array1::from(randn(seed ^ 10, 8));
        let p = LassoProblem::with_safe_step(w, s, lambda).unwrap();
        let iterates = ista(&p, Array1::zeros(16).view(), 50).unwrap();
        let mut prev = objective(&p, Array1::<f64>::zeros(16).view());
        for x in &iterates {
            let cur = objective(&p, x.view());
            prop_assert!(cur <= prev + 1e-12);
            prev = cur;
        }
    }

    #[test]
    fn soft_threshold_is_non_expansive(seed in any::<u64>(), theta in 0.0f64..2.0) {
        let x = Array1::from(randn(seed, 16));
        let y = Array1::from(randn(seed ^ 11, 16));
        let d = |a: &Array1<f64>, b: &Array1<f64>| (a - b).mapv(|v| v * v).sum().sqrt();
        let (tx, ty) = (soft_threshold(x.view(), theta).unwrap(), soft_threshold(y.view(), theta).unwrap());
        prop_assert!(d(&tx, &ty) <= d(&x, &y) + 1e-12);
    }

    #[test]
    fn oracle_is_an_ista_fixed_point(seed in 0u64..1000) {
        let w = gaussian_sampling_matrix(8, 16, seed);
        let s = Array1::from(randn(seed ^ 12, 8));
        let lambda = 0.3 * w.t().dot(&s).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let p = LassoProblem::with_safe_step(w, s, lambda).unwrap();
        let tol = 1e-10;
        let x = solve_oracle(&p, tol).unwrap();
        let step = ista_step(&p, x.view()).unwrap();
        prop_assert!((&step - &x).iter().fold(0.0f64, |m, v| m.max(v.abs())) < 10.0 * tol);
    }

    #[test]
    fn pack_round_trip(bits in 1u8..=8, seed in any::<u64>(), count in 0usize..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx: Vec<u32> = (0..count).map(|_| rng.random_range(0..(1u32 << bits))).collect();
        let packed = pack(&idx, bits);
        prop_assert_eq!(packed.len(), (count * bits as usize).div_ceil(8));
        prop_assert_eq!(unpack(&packed, bits, count).unwrap(), idx);
    }

    #[test]
    fn lloyd_refines_and_descends(seed in any::<u64>()) {
        let samples = randn(seed, 2000);
        let mut prev = f64::INFINITY;
        for bits in 1u8..=5 {
            let (cb, report) = fit_lloyd_max(&samples, bits, 300, 1e-10).unwrap();
            for w in report.distortion.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            let d = cb.distortion(&samples);
            prop_assert!(d <= prev + 1e-12);
            prev = d;
        }
    }

    #[test]
    fn nmse_is_scale_invariant(seed in any::<u64>(), c in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0]) {
        let h = randn(seed, 32);
        let e = randn(seed ^ 13, 32);
        let base = nmse_db(&h, &e, 16).unwrap();
        let hs: Vec<f64> = h.iter().map(|v| v * c).collect();
        let es: Vec<f64> = e.iter().map(|v| v * c).collect();
        prop_assert!((nmse_db(&hs, &es, 16).unwrap() - base).abs() < 1e-9);
    }
}

#[test]
fn truncation_keeps_most_energy() {
    let cfg = GenConfig { seed: 42, ..GenConfig::desk() };
    assert!(cfg.delay_spread <= cfg.na as f64 / cfg.nc as f64);
    let mut total = 0.0;
    for i in 0..100 {
        let s = synthesize_indexed(&cfg, i).unwrap();
        let full: f64 = sparsify(s.spatial.as_ref().unwrap()).iter().map(|z| z.norm_sqr()).sum();
        let kept: f64 = s.h_vec.iter().map(|v| v * v).sum();
        total += kept / full;
    }
    assert!(total / 100.0 >= 0.99, "mean captured energy {}", total / 100.0);
}

#[test]
fn loss_decomposes_in_beta() {
    let model = CsiModel::new(ModelConfig::desk(), 4).unwrap();
    let d = generate(&GenConfig { seed: 9, ..GenConfig::desk() }, 4, Split::Train).unwrap();
    let h: Vec<f64> = d.samples.iter().flat_map(|s| s.h_vec.clone()).collect();
    let base = loss(&model, &h, 3, 0.0, 1).unwrap();
    assert_eq!(base.total, base.recon);
    for beta in [0.0, 0.01, 1.0] {
        let l = loss(&model, &h, 3, beta, 1).unwrap();
        let want = beta * l.transform;
        assert!(((l.total - base.total) - want).abs() <= 1e-10 * l.total.abs().max(1.0), "beta {beta}");
    }
}

#[test]
fn multirate_runs_at_every_ratio() {
    let model = CsiModel::new(ModelConfig::desk(), 5).unwrap();
    let d = generate(&GenConfig { seed: 10, ..GenConfig::desk() }, 16, Split::Test).unwrap();
    let before = model.clone();
    let ms: Vec<usize> = [4usize, 8, 16, 32, 64].iter().map(|c| 128 / c).collect();
    let rows = csifb::harness::multirate_eval(&model, &d, &ms, 10, 0).unwrap();
    assert_eq!(model, before);
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.nmse_db.is_finite()));
}

#[test]
fn lstm_weights_do_not_depend_on_problem_size() {
    let model = CsiModel::new(ModelConfig::desk(), 6).unwrap();
    let shapes = |m: &CsiModel| {
        m.net
            .params()
            .iter()
            .map(|(k, t)| (k.to_string(), t.shape().to_vec()))
            .collect::<Vec<_>>()
    };
    let wide = model.with_codeword_len(64, 1).unwrap();
    assert_eq!(shapes(&model), shapes(&wide));
    let s = randn(3, 64);
    let w2 = Array2::from_shape_vec((64, 128), wide.encoder.weight().data().to_vec()).unwrap();
    assert_eq!(w2.dim(), (64, 128));
    assert!(wide.decode_batch(&s, 5, 0).unwrap().x.iter().all(|v| v.is_finite()));
}
