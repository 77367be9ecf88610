//! Dense `f64` tensors with tape-based reverse-mode differentiation, an Adam
//! optimizer and the `CL2O` checkpoint format.

mod adam;
pub mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use params::{Bound, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::rc::Rc;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Central finite differences of `f` at `inputs`, step `h`.
    fn fd_grads(
        inputs: &[Tensor],
        h: f64,
        f: &dyn Fn(&Tape, &[Var<'_>]) -> crate::Result<f64>,
    ) -> Vec<Vec<f64>> {
        let eval = |ts: &[Tensor]| {
            let tape = Tape::new();
            let vars: Vec<_> = ts.iter().map(|t| tape.leaf(t)).collect();
            f(&tape, &vars).unwrap()
        };
        inputs
            .iter()
            .enumerate()
            .map(|(k, t)| {
                (0..t.numel())
                    .map(|i| {
                        let mut plus = inputs.to_vec();
                        plus[k].data_mut()[i] += h;
                        let mut minus = inputs.to_vec();
                        minus[k].data_mut()[i] -= h;
                        (eval(&plus) - eval(&minus)) / (2.0 * h)
                    })
                    .collect()
            })
            .collect()
    }

    /// Runs `build` on a fresh tape, returning reverse-mode gradients of its
    /// scalar output with respect to every input.
    fn reverse_grads<F>(inputs: &[Tensor], build: F) -> Vec<Vec<f64>>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> crate::Result<Var<'t>>,
    {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    }

    fn check_against_fd<F>(inputs: &[Tensor], tol: f64, build: F)
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> crate::Result<Var<'t>>,
    {
        let rev = reverse_grads(inputs, &build);
        let fd = fd_grads(inputs, 1e-5, &|tape, vars| build(tape, vars)?.item());
        for (r, n) in rev.iter().flatten().zip(fd.iter().flatten()) {
            let rel = (r - n).abs() / (r.abs().max(n.abs())).max(1e-8);
            assert!(
                rel < tol || (r - n).abs() < 1e-9,
                "reverse {r} vs finite-difference {n} (rel {rel})"
            );
        }
    }

    fn param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::param(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let tape = Tape::new();
        let eye = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(eye.matmul(m).unwrap().value(), vec![1.0, 2.0, 3.0, 4.0]);
        let sel = tape.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let col = tape.constant(vec![2, 1], vec![2.0, 5.0]).unwrap();
        assert_eq!(sel.matmul(col).unwrap().value(), vec![2.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.zeros(vec![2, 3]);
        let b = tape.zeros(vec![2, 3]);
        assert!(matches!(a.matmul(b), Err(Error::Dimension(_))));
        assert!(a.matmul_t(b).is_ok());
    }

    #[test]
    fn matmul_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = param(vec![3, 4], randn(&mut rng, 12));
        let b = param(vec![4, 2], randn(&mut rng, 8));
        check_against_fd(&[a.clone(), b.clone()], 1e-5, |_, v| Ok(v[0].matmul(v[1])?.sum()));
        // transposed variants against a weighted objective
        let bt = param(vec![2, 4], randn(&mut rng, 8));
        let w = randn(&mut rng, 6);
        check_against_fd(&[a.clone(), bt], 1e-5, move |t, v| {
            let wv = t.constant(vec![3, 2], w.clone())?;
            Ok(v[0].matmul_t(v[1])?.mul(wv)?.sum())
        });
        let c = param(vec![3, 5], randn(&mut rng, 15));
        check_against_fd(&[a, c], 1e-5, |_, v| Ok(v[0].t_matmul(v[1])?.square().sum()));
    }

    #[test]
    fn elementwise_values() {
        let tape = Tape::new();
        assert_eq!(tape.scalar(0.0).sigmoid().item().unwrap(), 0.5);
        let x = tape.constant(vec![2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(x.max0().value(), vec![0.0, 2.0]);
        assert_eq!(x.sign().value(), vec![-1.0, 1.0]);
        assert_eq!(x.abs().value(), vec![1.0, 2.0]);
        let y = tape.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(x.add(y), Err(Error::Dimension(_))));
        let s = tape.scalar(2.0);
        assert_eq!(y.mul(s).unwrap().value(), vec![2.0, 4.0, 6.0]);
        assert_eq!(s.sub(y).unwrap().value(), vec![1.0, 0.0, -1.0]);
    }

    #[test]
    fn softplus_gradient_at_point() {
        check_against_fd(&[param(vec![1], vec![0.3])], 1e-5, |_, v| Ok(v[0].softplus().sum()));
    }

    #[test]
    fn every_op_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let n = 2 + trial * 3;
            // keep piecewise ops away from their kinks
            let mut x = randn(&mut rng, n);
            for v in &mut x {
                if v.abs() < 1e-3 {
                    *v += 0.01;
                }
            }
            let y = randn(&mut rng, n);
            let w = randn(&mut rng, n);
            let inputs = [param(vec![n], x), param(vec![n], y)];
            let w2 = w.clone();
            check_against_fd(&inputs, 1e-4, move |t, v| {
                let wv = t.constant(vec![n], w2.clone())?;
                let a = v[0].sigmoid().mul(v[1].tanh())?;
                let b = v[0].softplus().sub(v[1].abs())?;
                let c = v[0].max0().add(v[1].neg())?.scale(0.7).add_scalar(0.1);
                let d = v[0].sign().mul(v[1])?;
                a.add(b)?.add(c)?.add(d)?.mul(wv)?.sum()
                    .add(v[0].sum_squares())
            });
        }
    }

    #[test]
    fn scalar_broadcast_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = [param(vec![4], randn(&mut rng, 4)), param(vec![], vec![0.4])];
        check_against_fd(&inputs, 1e-5, |_, v| {
            Ok(v[0].mul(v[1])?.sub(v[1])?.square().sum())
        });
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = param(vec![3, 4], randn(&mut rng, 12));
        let b = param(vec![3, 2], randn(&mut rng, 6));
        let w = randn(&mut rng, 18);
        check_against_fd(&[a, b], 1e-5, move |t, v| {
            let s = v[0].slice_cols(1, 2)?;
            let cat = Var::concat_cols(&[v[0], s, v[1]])?;
            let idx: Rc<[usize]> = (0..24).map(|i| (i * 7) % 24).collect();
            let g = cat.gather(idx, vec![24])?.reshape(vec![4, 6])?;
            let wv = t.constant(vec![18], w.clone())?.reshape(vec![3, 6])?;
            let r = g.slice_cols(0, 6)?.reshape(vec![24])?.slice_cols(0, 18)?;
            Ok(r.reshape(vec![3, 6])?.mul(wv)?.sum())
        });
    }

    #[test]
    fn top_k_selects_magnitudes_and_masks_gradient() {
        let tape = Tape::new();
        let x = tape
            .variable(vec![2, 4], vec![3.0, -0.1, 0.2, 0.0, 1.0, -5.0, 1.0, 0.5])
            .unwrap();
        let y = x.top_k_rows(1).unwrap();
        assert_eq!(y.value(), vec![3.0, 0.0, 0.0, 0.0, 0.0, -5.0, 0.0, 0.0]);
        let y2 = x.top_k_rows(2).unwrap();
        // tie between the two 1.0 entries resolves to the lower index
        assert_eq!(y2.value()[4..], [1.0, -5.0, 0.0, 0.0]);
        let grads = tape.backward(y2.sum()).unwrap();
        assert_eq!(
            grads.get(x).unwrap(),
            &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0]
        );
        let t2 = Tape::new();
        assert!(t2.zeros(vec![3]).top_k_rows(4).is_err());
    }

    #[test]
    fn lstm_cell_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gates = param(vec![3, 8], randn(&mut rng, 24));
        let c = param(vec![3, 2], randn(&mut rng, 6));
        let w = randn(&mut rng, 6);
        check_against_fd(&[gates, c], 1e-5, move |t, v| {
            let (h, c1) = Var::lstm_cell(v[0], v[1])?;
            let wv = t.constant(vec![3, 2], w.clone())?;
            h.mul(wv)?.sum().add(c1.square().sum())
        });
    }

    #[test]
    fn add_row_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = param(vec![4, 3], randn(&mut rng, 12));
        let b = param(vec![3], randn(&mut rng, 3));
        let w = randn(&mut rng, 12);
        check_against_fd(&[x, b], 1e-6, |t, v| {
            let wv = t.constant(vec![4, 3], w.clone())?;
            Ok(v[0].add_row(v[1])?.mul(wv)?.sum())
        });
        let tape = Tape::new();
        let x = tape.zeros(vec![2, 3]);
        assert!(x.add_row(tape.zeros(vec![2])).is_err());
    }

    #[test]
    fn lstm_cell_values() {
        let tape = Tape::new();
        // i, f, g, o pre-activations for h = 1
        let gates = tape.constant(vec![1, 4], vec![0.2, -0.3, 0.5, 1.1]).unwrap();
        let c0 = tape.constant(vec![1, 1], vec![0.7]).unwrap();
        let (h, c) = Var::lstm_cell(gates, c0).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want_c = sig(-0.3) * 0.7 + sig(0.2) * 0.5f64.tanh();
        assert!((c.item().unwrap() - want_c).abs() < 1e-15);
        assert!((h.item().unwrap() - sig(1.1) * want_c.tanh()).abs() < 1e-15);
    }

    #[test]
    fn backward_basics() {
        let tape = Tape::new();
        let x = tape.variable(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.variable(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let loss = x.sum_squares().scale(0.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, -2.0, 0.5]);
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));

        let tape = Tape::new();
        let x = tape.variable(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn two_layer_mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w1 = param(vec![5, 3], randn(&mut rng, 15));
        let b1 = param(vec![1, 5], randn(&mut rng, 5));
        let w2 = param(vec![2, 5], randn(&mut rng, 10));
        let x = randn(&mut rng, 12);
        let target = randn(&mut rng, 8);
        check_against_fd(&[w1, b1, w2], 1e-4, move |t, v| {
            let xv = t.constant(vec![4, 3], x.clone())?;
            let ones = t.constant(vec![4, 1], vec![1.0; 4])?;
            let h = xv.matmul_t(v[0])?.add(ones.matmul(v[1])?)?.tanh();
            let out = h.matmul_t(v[2])?;
            let tv = t.constant(vec![4, 2], target.clone())?;
            Ok(out.sub(tv)?.sum_squares())
        });
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let tape = Tape::new();
            let a = tape.constant(vec![16, 16], randn(&mut rng, 256)).unwrap();
            let b = tape.constant(vec![16, 16], randn(&mut rng, 256)).unwrap();
            a.matmul(b).unwrap().tanh().matmul_t(a).unwrap().value()
        };
        let (x, y) = (run(), run());
        assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn grads_flow_only_to_trainable_leaves() {
        let tape = Tape::new();
        let c = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let p = tape.variable(vec![2], vec![3.0, 4.0]).unwrap();
        let g = tape.backward(c.mul(p).unwrap().sum()).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &[1.0, 2.0]);
    }
}
