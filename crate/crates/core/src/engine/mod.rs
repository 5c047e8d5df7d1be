//! Dense `f64` tensors with a reverse-mode tape, named parameters,
//! finite-difference gradient checking and a text checkpoint format.

mod checkpoint;
mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{
    central_differences, grad_check, max_relative_error, op_suite, relative_error, OpCheck, FD_STEP, TOLERANCE,
};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{BatchNormState, BatchStats, Gradients, SoftmaxMode, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Weighted sum with fixed random coefficients, so every output entry matters.
    fn probe(tape: &mut Tape, v: Var, seed: u64) -> Result<Var, crate::Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(tape.shape(v), &mut rng);
        let w = tape.constant(w);
        let p = tape.mul(v, w)?;
        Ok(tape.sum(p))
    }

    #[test]
    fn matmul_hand_values() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);
        assert_eq!(t.shape(c), &[2, 1]);

        let i = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = t.constant(Tensor::from_rows(&[vec![0.5, -2.0], vec![9.0, 1.5]]).unwrap());
        let im = t.matmul(i, m).unwrap();
        assert_eq!(t.value(im).data(), t.value(m).data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[5, 4], &mut rng);
        let b = random(&[4, 3], &mut rng);
        let bc = b.clone();
        let err = grad_check(
            |t, v| {
                let b = t.constant(bc.clone());
                let m = t.matmul(v, b)?;
                probe(t, m, 7)
            },
            &a,
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        let ac = a.clone();
        let err = grad_check(
            |t, v| {
                let a = t.constant(ac.clone());
                let m = t.matmul(a, v)?;
                probe(t, m, 8)
            },
            &b,
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn affine_identity_and_hand_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::new();
        let x = t.constant(random(&[2, 3, 2], &mut rng));
        let w = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = t.constant(Tensor::zeros(&[2]));
        let y = t.affine(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let ones = t.constant(Tensor::filled(&[1, 1, 2], 1.0));
        let w = t.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let b = t.constant(Tensor::scalar(1.0));
        let y = t.affine(ones, w, Some(b)).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1]);
        assert_eq!(t.value(y).data(), &[3.0]);

        let bad = t.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(t.affine(ones, bad, None), Err(crate::Error::Dimension { .. })));
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 4], &mut rng);
        let w = random(&[4, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let (wc, bc, xc) = (w.clone(), b.clone(), x.clone());
        let ex = grad_check(
            |t, v| {
                let (w, b) = (t.constant(wc.clone()), t.constant(bc.clone()));
                let y = t.affine(v, w, Some(b))?;
                probe(t, y, 9)
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        let ew = grad_check(
            |t, v| {
                let (x, b) = (t.constant(xc.clone()), t.constant(bc.clone()));
                let y = t.affine(x, v, Some(b))?;
                probe(t, y, 9)
            },
            &w,
            FD_STEP,
        )
        .unwrap();
        let eb = grad_check(
            |t, v| {
                let (x, w) = (t.constant(xc.clone()), t.constant(wc.clone()));
                let y = t.affine(x, w, Some(v))?;
                probe(t, y, 9)
            },
            &b,
            FD_STEP,
        )
        .unwrap();
        assert!(ex.max(ew).max(eb) < 1e-4, "{ex} {ew} {eb}");
    }

    #[test]
    fn batch_norm_symmetric_pair() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let g = t.constant(Tensor::scalar(1.0));
        let b = t.constant(Tensor::scalar(0.0));
        let mut state = BatchNormState::new(1);
        state.eps = 0.0;
        let (y, stats) = t.batch_norm(x, g, b, &state, true).unwrap();
        assert_eq!(t.value(y).data(), &[-1.0, 1.0]);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);

        state.update(&stats);
        assert!((state.running_mean[0] - 0.2).abs() < 1e-15);
        // unbiased variance of {1, 3} is 2
        assert!((state.running_var[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_zero_scale_gives_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let x = t.constant(random(&[6, 2], &mut rng));
        let g = t.constant(Tensor::zeros(&[2]));
        let b = t.constant(Tensor::new(vec![2], vec![0.25, -3.0]).unwrap());
        let (y, _) = t.batch_norm(x, g, b, &BatchNormState::new(2), true).unwrap();
        for row in t.value(y).data().chunks(2) {
            assert_eq!(row, &[0.25, -3.0]);
        }
        let wrong = BatchNormState::new(3);
        assert!(t.batch_norm(x, g, b, &wrong, true).is_err());
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[4, 3], &mut rng);
        let gamma = Tensor::new(vec![3], vec![1.5, -0.7, 0.9]).unwrap();
        let beta = Tensor::new(vec![3], vec![0.1, 0.2, -0.3]).unwrap();
        let mut state = BatchNormState::new(3);
        state.running_mean = vec![0.1, -0.2, 0.3];
        state.running_var = vec![0.5, 1.5, 2.0];
        for training in [true, false] {
            let (gc, bc, st) = (gamma.clone(), beta.clone(), state.clone());
            let err = grad_check(
                |t, v| {
                    let (g, b) = (t.constant(gc.clone()), t.constant(bc.clone()));
                    let (y, _) = t.batch_norm(v, g, b, &st, training)?;
                    probe(t, y, 10)
                },
                &x,
                FD_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "training={training}: {err}");
            let (xc, bc, st) = (x.clone(), beta.clone(), state.clone());
            let err = grad_check(
                |t, v| {
                    let (x, b) = (t.constant(xc.clone()), t.constant(bc.clone()));
                    let (y, _) = t.batch_norm(x, v, b, &st, training)?;
                    probe(t, y, 11)
                },
                &gamma,
                FD_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "gamma training={training}: {err}");
        }
    }

    #[test]
    fn relu_and_max_reduce() {
        let mut t = Tape::new();
        let x = t.input(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut t = Tape::new();
        // one group, S = 2, T = 2: rows are S entries
        let x = t.input(Tensor::new(vec![1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let m = t.max_reduce(x, 1).unwrap();
        assert_eq!(t.value(m).data(), &[3.0, 5.0]);
        assert_eq!(t.shape(m), &[1, 2]);
        assert!(t.max_reduce(x, 3).is_err());
    }

    #[test]
    fn max_reduce_ties_route_to_first_index() {
        let mut t = Tape::new();
        let x = t.input(Tensor::new(vec![1, 3, 1], vec![4.0, 4.0, 4.0]).unwrap());
        let m = t.max_reduce(x, 1).unwrap();
        let s = t.sum(m);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_reduce_gradient_single_index_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[3, 5, 4], &mut rng);
        let mut t = Tape::new();
        let v = t.input(x.clone());
        let m = t.max_reduce(v, 1).unwrap();
        let p = probe(&mut t, m, 12).unwrap();
        let g = t.backward(p).unwrap();
        let g = g.get(v).unwrap();
        for grp in 0..3 {
            for ch in 0..4 {
                let nonzero = (0..5).filter(|s| g[grp * 20 + s * 4 + ch] != 0.0).count();
                assert_eq!(nonzero, 1);
            }
        }
        let err = grad_check(
            |t, v| {
                let m = t.max_reduce(v, 1)?;
                probe(t, m, 12)
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn scale_by_zero_and_its_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[2, 3], &mut rng);
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let alpha = t.input(Tensor::scalar(0.0));
        let y = t.scale(xv, alpha).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
        let dout = random(&[2, 3], &mut rng);
        let dv = t.constant(dout.clone());
        let p = t.mul(y, dv).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        let expected: f64 = x.data().iter().zip(dout.data()).map(|(a, b)| a * b).sum();
        assert!((g.get(alpha).unwrap()[0] - expected).abs() < 1e-12);

        let xc = x.clone();
        let err = grad_check(
            |t, a| {
                let x = t.constant(xc.clone());
                let y = t.scale(x, a)?;
                probe(t, y, 13)
            },
            &Tensor::scalar(0.0),
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn add_is_exact_and_checks_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2], vec![0.5, 0.25]).unwrap());
        let b = t.constant(Tensor::new(vec![2], vec![0.25, 0.125]).unwrap());
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[0.75, 0.375]);
        let d = t.constant(Tensor::zeros(&[3]));
        assert!(t.add(a, d).is_err());
    }

    #[test]
    fn softmax_values_and_normalization() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = t.softmax(x, SoftmaxMode::Row);
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let big = t.constant(random(&[4, 5], &mut rng));
        let big = t.scale_const(big, 800.0);
        let rows = t.softmax(big, SoftmaxMode::Row);
        for row in t.value(rows).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
        let all = t.softmax(big, SoftmaxMode::Global);
        assert!((t.value(all).data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_gradients_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[3, 3], &mut rng);
        for mode in [SoftmaxMode::Row, SoftmaxMode::Global] {
            let err = grad_check(
                |t, v| {
                    let y = t.softmax(v, mode);
                    probe(t, y, 14)
                },
                &x,
                FD_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "{mode:?}: {err}");
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let mut t = Tape::new();
        let s = t.constant(Tensor::zeros(&[3, 4]));
        let l = t.cross_entropy(s, &[0, 1, 3]).unwrap();
        assert!((t.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);

        let s = t.constant(Tensor::from_rows(&[vec![1000.0, 0.0], vec![0.0, 1000.0]]).unwrap());
        let l = t.cross_entropy(s, &[0, 1]).unwrap();
        assert!(t.value(l).data()[0] < 1e-12);

        match t.cross_entropy(s, &[0, 2]) {
            Err(crate::Error::LabelOutOfRange { index, label, classes }) => {
                assert_eq!((index, label, classes), (1, 2, 2));
            }
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&[5, 3], &mut rng);
        let err = grad_check(|t, v| t.cross_entropy(v, &[0, 2, 1, 1, 0]), &x, FD_STEP).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[4, 3], &mut rng);
        let err = grad_check(
            |t, v| {
                let tr = t.transpose(v)?;
                let r = t.reshape(tr, &[2, 6])?;
                let other = t.constant(Tensor::filled(&[2, 2], 0.5));
                let c = t.concat(&[r, other, r])?;
                let g = t.gather(v, &[3, 0, 0, 2, 1, 3], &[2, 3])?;
                let w = t.weighted_rows(v, vec![vec![(0, 0.25), (2, 0.75)], vec![(1, 1.0)]])?;
                let a = probe(t, c, 15)?;
                let b = probe(t, g, 16)?;
                let d = probe(t, w, 17)?;
                let ab = t.add(a, b)?;
                t.add(ab, d)
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn params_accumulate_gradients() {
        let mut store = ParamStore::new();
        let id = store
            .insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        assert!(store.insert("w", Tensor::zeros(&[1])).is_err());
        for _ in 0..2 {
            let mut t = Tape::new();
            let w = t.param(&store, id);
            let sq = t.mul(w, w).unwrap();
            let s = t.sum(sq);
            t.backward(s).unwrap().accumulate_into(&mut store);
        }
        assert_eq!(store.get(id).tensor.grad.as_deref(), Some(&[4.0, -8.0][..]));
        store.zero_grad();
        assert!(store.get(id).tensor.grad.is_none());
    }

    #[test]
    fn zero_extent_tensor_is_rejected() {
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
