//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! Exactly the operations the model and its objectives need, recorded on a
//! [`Tape`] and replayed in reverse. Everything is double precision and
//! single-threaded per graph; parallelism happens across graphs.

mod adam;
mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use adam::{Adam, AdamSlot};
pub use gradcheck::{central_differences, grad_check, max_rel_err, DEFAULT_FD_STEP};
pub use ops::SQRT_GRAD_EPS;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

/// Epsilon used when renormalizing rows into distributions.
pub const RENORM_EPS: f64 = 1e-8;

/// Epsilon inside the KL logarithms.
pub const KL_EPS: f64 = 1e-8;

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_row_stochastic(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            let mut row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            for (j, v) in row.into_iter().enumerate() {
                t.set(i, j, v);
            }
        }
        t
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let x = tape.constant(Tensor::from_rows(&[vec![3.0, -1.0], vec![0.5, 2.0]]).unwrap());
        let y = tape.matmul(i2, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = random_tensor(&mut rng, vec![3, 2]);
        let a = random_tensor(&mut rng, vec![2, 3]);
        let err = grad_check(
            |tape, leaf| {
                let bk = tape.constant(b.clone());
                let prod = tape.matmul(leaf, bk)?;
                Ok(tape.sum_all(prod))
            },
            &a,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "matmul grad err {err}");
    }

    #[test]
    fn softmax_symmetric_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let y = tape.softmax_rows(x, 1.0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![2.0_f64.ln(), 0.0]]).unwrap());
        let y = tape.softmax_rows(x, 1.0).unwrap();
        assert_relative_eq!(tape.value(y).data()[0], 2.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(tape.value(y).data()[1], 1.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn softmax_rows_always_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x = random_tensor(&mut rng, vec![4, 6]);
            let mut tape = Tape::new();
            let leaf = tape.constant(x);
            let y = tape.softmax_rows(leaf, 1.0 / 6.0_f64.sqrt()).unwrap();
            for i in 0..4 {
                let s: f64 = tape.value(y).row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![3.0, 3.0, 3.0]]).unwrap());
        let gain = tape.constant(Tensor::filled(vec![3], 1.0));
        let bias = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_unit_variance_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap());
        let gain = tape.constant(Tensor::filled(vec![2], 1.0));
        let bias = tape.constant(Tensor::zeros(vec![2]));
        let y = tape.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
        assert_relative_eq!(tape.value(y).data()[0], 1.0, max_relative = 1e-4);
        assert_relative_eq!(tape.value(y).data()[1], -1.0, max_relative = 1e-4);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_tensor(&mut rng, vec![3, 5]);
        let gain = random_tensor(&mut rng, vec![5]);
        let bias = random_tensor(&mut rng, vec![5]);
        let err = grad_check(
            |tape, leaf| {
                let g = tape.constant(gain.clone());
                let b = tape.constant(bias.clone());
                let y = tape.layer_norm(leaf, g, b, LAYER_NORM_EPS)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &x,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "layer_norm grad err {err}");
    }

    #[test]
    fn sqrt_perfect_squares_and_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 4.0], vec![9.0, 0.0]]).unwrap());
        let y = tape.sqrt_elem(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 0.0]);

        let i3 = tape.constant(Tensor::eye(3));
        let yi = tape.sqrt_elem(i3).unwrap();
        assert_eq!(tape.value(yi), &Tensor::eye(3));
    }

    #[test]
    fn sqrt_rejects_negative_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![-0.5]]).unwrap());
        assert!(tape.sqrt_elem(x).is_err());
    }

    #[test]
    fn sqrt_gradient_at_quarter() {
        // d/dx sqrt(x) at 0.25 is 1 / (2 * 0.5) = 1.
        let x = Tensor::from_rows(&[vec![0.25]]).unwrap();
        let err = grad_check(
            |tape, leaf| {
                let y = tape.sqrt_elem(leaf)?;
                Ok(tape.sum_all(y))
            },
            &x,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-7, "sqrt grad err {err}");
    }

    #[test]
    fn kl_of_identical_rows_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = random_row_stochastic(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let a = tape.constant(p.clone());
        let b = tape.constant(p);
        let kl = tape.kl_rows(a, b, KL_EPS).unwrap();
        assert!(tape.value(kl).item().abs() < 1e-10);
    }

    #[test]
    fn kl_closed_form_half_vs_three_quarters() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        let q = tape.constant(Tensor::from_rows(&[vec![0.75, 0.25]]).unwrap());
        let kl = tape.kl_rows(p, q, KL_EPS).unwrap();
        let expected = 0.5 * (2.0 / 3.0_f64).ln() + 0.5 * 2.0_f64.ln();
        assert_relative_eq!(tape.value(kl).item(), expected, max_relative = 1e-6);
        assert!((tape.value(kl).item() - 0.14384).abs() < 1e-4);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..100 {
            let p = random_row_stochastic(&mut rng, 2, 5);
            let q = random_row_stochastic(&mut rng, 2, 5);
            let mut tape = Tape::new();
            let a = tape.constant(p);
            let b = tape.constant(q);
            let kl = tape.kl_rows(a, b, KL_EPS).unwrap();
            assert!(tape.value(kl).item() >= -1e-12, "kl {}", tape.value(kl).item());
        }
    }

    #[test]
    fn kl_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(vec![2, 2]));
        let q = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(tape.kl_rows(p, q, KL_EPS).is_err());
    }

    #[test]
    fn two_path_adjoints_accumulate() {
        // y = x + x: both paths contribute, gradient is 2.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5), true);
        let y = tape.add(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0]);

        // z = sum(x * x) + sum(x): gradient is 2x + 1.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, -2.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s1 = tape.sum_all(sq);
        let s2 = tape.sum_all(x);
        let z = tape.add(s1, s2).unwrap();
        let grads = tape.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[7.0, -3.0]);
    }

    #[test]
    fn forward_and_backward_are_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let a = random_tensor(&mut rng, vec![4, 4]);
            let b = random_tensor(&mut rng, vec![4, 4]);
            let mut tape = Tape::new();
            let la = tape.leaf(a, true);
            let lb = tape.leaf(b, true);
            let prod = tape.matmul(la, lb).unwrap();
            let soft = tape.softmax_rows(prod, 0.5).unwrap();
            let out = tape.mean_all(soft);
            let grads = tape.backward(out).unwrap();
            (
                tape.value(out).item(),
                grads.get(la).unwrap().to_vec(),
                grads.get(lb).unwrap().to_vec(),
            )
        };
        let (v1, ga1, gb1) = run();
        let (v2, ga2, gb2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(ga1, ga2);
        assert_eq!(gb1, gb2);
    }

    #[test]
    fn elementwise_ops_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        // Bounded away from relu/abs kinks and div-by-zero.
        let x = Tensor::new(vec![2, 3], vec![0.6, -0.8, 1.2, -0.4, 0.9, -1.1]).unwrap();
        let other = Tensor::new(vec![2, 3], vec![1.5, 2.0, -1.7, 2.2, -2.5, 1.9]).unwrap();
        let checks: Vec<(&str, Box<dyn Fn(&mut Tape, NodeId) -> crate::error::Result<NodeId>>)> = vec![
            ("relu", Box::new(|t: &mut Tape, l: NodeId| Ok(t.relu(l)))),
            ("abs", Box::new(|t: &mut Tape, l: NodeId| Ok(t.abs(l)))),
            ("sigmoid", Box::new(|t: &mut Tape, l: NodeId| Ok(t.sigmoid(l)))),
            ("scale", Box::new(|t: &mut Tape, l: NodeId| Ok(t.scale(l, -2.5)))),
            ("add_const", Box::new(|t: &mut Tape, l: NodeId| Ok(t.add_const(l, 0.7)))),
        ];
        for (name, build) in checks {
            let err = grad_check(
                |tape, leaf| {
                    let y = build(tape, leaf)?;
                    Ok(tape.sum_all(y))
                },
                &x,
                DEFAULT_FD_STEP,
            )
            .unwrap();
            assert!(err < 1e-6, "{name} grad err {err}");
        }
        let o = other.clone();
        for (name, op) in [("mul", 0), ("div", 1), ("min", 2), ("max", 3), ("sub", 4)] {
            let o = o.clone();
            let err = grad_check(
                move |tape, leaf| {
                    let c = tape.constant(o.clone());
                    let y = match op {
                        0 => tape.mul(leaf, c)?,
                        1 => tape.div(leaf, c)?,
                        2 => tape.min_elem(leaf, c)?,
                        3 => tape.max_elem(leaf, c)?,
                        _ => tape.sub(leaf, c)?,
                    };
                    Ok(tape.sum_all(y))
                },
                &x,
                DEFAULT_FD_STEP,
            )
            .unwrap();
            assert!(err < 1e-6, "{name} grad err {err}");
        }
        // Structural ops through a quadratic so the gradient is nontrivial.
        let wide = random_tensor(&mut rng, vec![3, 6]);
        let err = grad_check(
            |tape, leaf| {
                let left = tape.slice_cols(leaf, 0, 3)?;
                let right = tape.slice_cols(leaf, 3, 3)?;
                let back = tape.concat_cols(&[right, left])?;
                let picked = tape.gather_rows(back, &[0, 2, 2])?;
                let sq = tape.mul(picked, picked)?;
                Ok(tape.sum_all(sq))
            },
            &wide,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "slice/concat/gather grad err {err}");
    }

    #[test]
    fn renorm_rows_grad_and_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![2.0, 2.0]]).unwrap());
        let y = tape.renorm_rows(x, RENORM_EPS).unwrap();
        assert_relative_eq!(tape.value(y).data()[0], 0.5, max_relative = 1e-7);

        let x = Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.3, 0.9, 0.05, 0.05]).unwrap();
        let err = grad_check(
            |tape, leaf| {
                let y = tape.renorm_rows(leaf, RENORM_EPS)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &x,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "renorm grad err {err}");
    }

    #[test]
    fn softmax_log_softmax_kl_grads() {
        let x = Tensor::new(vec![2, 4], vec![0.3, -0.9, 1.4, 0.2, -0.6, 0.8, -1.2, 0.5]).unwrap();
        let q = Tensor::new(vec![2, 4], vec![0.1, 0.4, 0.3, 0.2, 0.25, 0.25, 0.3, 0.2]).unwrap();
        let err = grad_check(
            |tape, leaf| {
                let y = tape.softmax_rows(leaf, 0.7)?;
                let qc = tape.constant(q.clone());
                tape.kl_rows(y, qc, KL_EPS)
            },
            &x,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "softmax->kl grad err {err}");

        let err = grad_check(
            |tape, leaf| {
                let y = tape.log_softmax_rows(leaf)?;
                let coeffs = Tensor::new(vec![2, 4], vec![-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.1, 0.0]).unwrap();
                tape.dot_const(y, coeffs)
            },
            &x,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "log_softmax grad err {err}");

        // KL gradient w.r.t. q as well.
        let p = Tensor::new(vec![2, 4], vec![0.2, 0.3, 0.4, 0.1, 0.3, 0.3, 0.2, 0.2]).unwrap();
        let err = grad_check(
            |tape, leaf| {
                let pc = tape.constant(p.clone());
                tape.kl_rows(pc, leaf, KL_EPS)
            },
            &q,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "kl dq grad err {err}");
    }

    #[test]
    fn max_all_routes_gradient_to_first_maximizer() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 3.0, 3.0, 0.0]).unwrap(), true);
        let y = tape.max_all(x);
        assert_eq!(tape.value(y).item(), 3.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn transpose_and_matmul_nt_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = random_tensor(&mut rng, vec![3, 4]);
        let b = random_tensor(&mut rng, vec![2, 4]);
        let mut tape = Tape::new();
        let la = tape.constant(a);
        let lb = tape.constant(b);
        let direct = tape.matmul_nt(la, lb).unwrap();
        let bt = tape.transpose(lb).unwrap();
        let via_t = tape.matmul(la, bt).unwrap();
        for (x, y) in tape.value(direct).data().iter().zip(tape.value(via_t).data()) {
            assert_relative_eq!(x, y, max_relative = 1e-13);
        }

        let a2 = random_tensor(&mut rng, vec![3, 4]);
        let bq = random_tensor(&mut rng, vec![2, 4]);
        let err = grad_check(
            |tape, leaf| {
                let c = tape.constant(bq.clone());
                let y = tape.matmul_nt(leaf, c)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &a2,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "matmul_nt grad err {err}");
    }
}
