//! Dense matrices, reverse-mode gradients and the Adam optimizer.

mod adam;
mod matrix;
mod tape;

pub use adam::{adam_step, warmup_lr, AdamState};
pub use matrix::{dot, Matrix};
pub use tape::{log_sum_exp, sigmoid, softmax_rows, Gradients, Tape, Var, NORM_EPS};

/// Central finite-difference gradient of a scalar function of one matrix.
pub fn finite_difference(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for idx in 0..x.data().len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let up = f(&probe);
        probe.data_mut()[idx] = orig - h;
        let down = f(&probe);
        probe.data_mut()[idx] = orig;
        grad.data_mut()[idx] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Checks the tape gradient of `build` w.r.t. its single input against
    /// central differences.
    fn check_grad(x: &Matrix, tol: f64, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let out = build(&mut tape, v);
        let grads = tape.backward(out).unwrap();
        let analytic = grads.get_or_zeros(v, x.shape());
        let numeric = finite_difference(x, 1e-5, |probe| {
            let mut t = Tape::new();
            let v = t.param(probe.clone());
            let o = build(&mut t, v);
            t.value(o).item()
        });
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < tol, "relative error {err}\n{analytic:?}\n{numeric:?}");
    }

    /// Random fixed weights so every output element carries a distinct weight.
    fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
        let (r, c) = tape.shape(x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(random(r, c, &mut rng));
        let p = tape.mul(x, w).unwrap();
        tape.sum(p)
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(3, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        let bb = b.clone();
        check_grad(&a, 1e-6, move |t, x| {
            let b = t.constant(bb.clone());
            let p = t.matmul(x, b).unwrap();
            t.sum(p)
        });
        let aa = a.clone();
        check_grad(&b, 1e-6, move |t, x| {
            let a = t.constant(aa.clone());
            let p = t.matmul(a, x).unwrap();
            t.sum(p)
        });
    }

    #[test]
    fn every_kernel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(3, 4, &mut rng);
        let tol = 1e-4;
        check_grad(&x, tol, |t, v| {
            let y = t.softmax_rows(v, 0.7).unwrap();
            weighted_sum(t, y, 10)
        });
        check_grad(&x, tol, |t, v| {
            let y = t.log_softmax_rows(v, 0.3).unwrap();
            weighted_sum(t, y, 11)
        });
        check_grad(&x, tol, |t, v| {
            let y = t.relu(v);
            weighted_sum(t, y, 12)
        });
        check_grad(&x, tol, |t, v| {
            let y = t.sigmoid(v);
            weighted_sum(t, y, 13)
        });
        check_grad(&x, tol, |t, v| {
            let y = t.l2_normalize_rows(v).unwrap();
            weighted_sum(t, y, 14)
        });
        check_grad(&x, tol, |t, v| {
            let s = t.slice_cols(v, 1, 3).unwrap();
            let y = t.concat_cols(&[v, s]).unwrap();
            weighted_sum(t, y, 15)
        });
        check_grad(&x, tol, |t, v| {
            let y = t.scale(v, -2.5);
            let z = t.add(y, v).unwrap();
            let z = t.sub(z, v).unwrap();
            let z = t.add_scalar(z, 0.3);
            weighted_sum(t, z, 16)
        });
        check_grad(&x, tol, |t, v| {
            let row = t.slice_rows(v, 1, 2).unwrap();
            let y = t.add_row(v, row).unwrap();
            weighted_sum(t, y, 17)
        });
        check_grad(&x, tol, |t, v| {
            let y = t.repeat_each_row(v, 2);
            let z = t.tile_rows(v, 2);
            let w = t.mul(y, z).unwrap();
            weighted_sum(t, w, 18)
        });
        check_grad(&x, tol, |t, v| {
            let y = t.select_rows(v, &[2, 0, 2]).unwrap();
            let y = t.reshape(y, 4, 3).unwrap();
            let y = t.transpose(y);
            let y = t.sum_rows(y);
            weighted_sum(t, y, 19)
        });
        // pair_mlp: every input in turn is the probed one
        let fixed: Vec<Matrix> = [(6, 2), (5, 2), (2, 5), (3, 5), (1, 5), (1, 5)]
            .iter()
            .map(|&(r, c)| random(r, c, &mut rng))
            .collect();
        for slot in 0..6 {
            check_grad(&fixed[slot], tol, |t, v| {
                let vars: Vec<Var> = (0..6)
                    .map(|i| if i == slot { v } else { t.constant(fixed[i].clone()) })
                    .collect();
                let y = t
                    .pair_mlp(vars[0], vars[1], vars[2], Some(vars[3]), vars[4], vars[5])
                    .unwrap();
                weighted_sum(t, y, 20)
            });
        }
        let sq = random(3, 3, &mut rng);
        check_grad(&sq, tol, |t, v| {
            let d = t.diag(v).unwrap();
            let m = t.mul(d, d).unwrap();
            t.mean(m)
        });
    }

    #[test]
    fn pair_mlp_matches_composed_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (q, g, m, h) = (2, 3, 2, 4);
        let mut t = Tape::new();
        let pair = t.param(random(q * g, m, &mut rng));
        let w = t.param(random(h, m, &mut rng));
        let cap = t.param(random(q, h, &mut rng));
        let gal = t.param(random(g, h, &mut rng));
        let b = t.param(random(1, h, &mut rng));
        let w2 = t.param(random(1, h, &mut rng));
        let fused = t.pair_mlp(pair, w, cap, Some(gal), b, w2).unwrap();

        let wt = t.transpose(w);
        let x = t.matmul(pair, wt).unwrap();
        let c = t.repeat_each_row(cap, g);
        let x = t.add(x, c).unwrap();
        let gl = t.tile_rows(gal, q);
        let x = t.add(x, gl).unwrap();
        let x = t.add_row(x, b).unwrap();
        let x = t.relu(x);
        let w2t = t.transpose(w2);
        let composed = t.matmul(x, w2t).unwrap();
        for (a, b) in t.value(fused).data().iter().zip(t.value(composed).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(t.pair_mlp(pair, w, cap, Some(cap), b, w2).is_err());
        let no_gallery = t.pair_mlp(pair, w, cap, None, b, w2).unwrap();
        assert_eq!(t.shape(no_gallery), (6, 1));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(&[0.0, 0.0, 0.0]));
        let y = tape.softmax_rows(x, 2.0).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.constant(Matrix::row_vector(&[1000.0, 0.0]));
        let y = tape.softmax_rows(x, 1.0).unwrap();
        let p = tape.value(y).data();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12 && p[1] >= 0.0);

        // reference values for softmax([1, 2, 3])
        let reference = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        let x = tape.constant(Matrix::row_vector(&[1.0, 2.0, 3.0]));
        let y = tape.softmax_rows(x, 1.0).unwrap();
        for (p, r) in tape.value(y).data().iter().zip(reference) {
            assert!((p - r).abs() < 1e-15, "{p} vs {r}");
        }

        assert!(tape.softmax_rows(x, 0.0).is_err());
        assert!(tape.softmax_rows(x, -1.0).is_err());
    }

    #[test]
    fn kernel_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let x = tape.constant(Matrix::row_vector(&[3.0, 4.0]));
        let y = tape.l2_normalize_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.6, 0.8]);

        let a = tape.constant(Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64));
        let b = tape.constant(Matrix::from_fn(2, 2, |i, j| 100.0 + (i * 2 + j) as f64));
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), (2, 5));
        assert_eq!(
            tape.value(c).data(),
            &[0.0, 1.0, 2.0, 100.0, 101.0, 3.0, 4.0, 5.0, 102.0, 103.0]
        );

        let z = tape.constant(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        match tape.l2_normalize_rows(z) {
            Err(crate::Error::Degenerate { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x0 = Matrix::from_rows(&[vec![0.3, -0.7]]).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let s = tape.sigmoid(x);
        let out = tape.sum(s);
        let single = tape.backward(out).unwrap().get(x).unwrap().clone();

        let mut tape = Tape::new();
        let x = tape.param(x0);
        let s = tape.sigmoid(x);
        let double = tape.add(s, s).unwrap();
        let out = tape.sum(double);
        let doubled = tape.backward(out).unwrap().get(x).unwrap().clone();
        assert_eq!(doubled, single.scale(2.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::scalar(2.0));
        let p = tape.param(Matrix::scalar(3.0));
        let y = tape.mul(c, p).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut tape = Tape::new();
        let p = tape.param(Matrix::zeros(2, 2));
        assert!(tape.backward(p).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized_and_shift_invariant(
            row in prop::collection::vec(-50.0f64..50.0, 1..8),
            shift in -100.0f64..100.0,
            temperature in 0.05f64..10.0,
        ) {
            let x = Matrix::row_vector(&row);
            let p = softmax_rows(&x, temperature);
            prop_assert!((p.sum() - 1.0).abs() < 1e-9);
            prop_assert!(p.data().iter().all(|v| *v >= 0.0 && v.is_finite()));
            let shifted = softmax_rows(&x.map(|v| v + shift), temperature);
            for (a, b) in p.data().iter().zip(shifted.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn random_composition_gradient_matches_fd(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(2, 3, &mut rng);
            let w = random(3, 3, &mut rng);
            let build = move |t: &mut Tape, v: Var| {
                let w = t.constant(w.clone());
                let h = t.matmul(v, w).unwrap();
                let h = t.sigmoid(h);
                let n = t.l2_normalize_rows(h).unwrap();
                let s = t.log_softmax_rows(n, 0.5).unwrap();
                let r = t.relu(v);
                let c = t.concat_cols(&[s, r]).unwrap();
                weighted_sum(t, c, seed)
            };
            let mut tape = Tape::new();
            let v = tape.param(x.clone());
            let out = build(&mut tape, v);
            let analytic = tape.backward(out).unwrap().get_or_zeros(v, x.shape());
            let numeric = finite_difference(&x, 1e-5, |probe| {
                let mut t = Tape::new();
                let v = t.param(probe.clone());
                let o = build(&mut t, v);
                t.value(o).item()
            });
            prop_assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-4);
        }
    }
}
