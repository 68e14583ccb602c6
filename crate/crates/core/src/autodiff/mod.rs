//! Dense tensor math with tape-based reverse-mode differentiation.
//!
//! Big enough to train the tiny transformer in [`crate::model`] and expose
//! input-embedding gradients for attribution; nothing more. A tape and its
//! tensors belong to one thread; independent tapes may run concurrently.

mod check;
mod tape;
mod tensor;

pub use check::finite_diff_check;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Numerically stabilized softmax along `axis`. Non-finite input is a
/// domain error.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape().len() {
        return Err(Error::Index(format!(
            "softmax: axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    if !x.all_finite() {
        return Err(Error::NumericDomain("softmax: non-finite input".into()));
    }
    let out = tape::softmax_kernel(x.data(), x.shape(), axis);
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// −log softmax(logits)[target] for a 1-d logit vector.
pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<f64> {
    if logits.shape().len() != 1 {
        return Err(Error::Shape(format!(
            "cross_entropy: expected 1-d logits, got {:?}",
            logits.shape()
        )));
    }
    if target >= logits.numel() {
        return Err(Error::Index(format!(
            "cross_entropy: target {target} out of range {}",
            logits.numel()
        )));
    }
    let row = logits.data();
    Ok(tape::log_sum_exp(row) - row[target])
}

/// Shannon entropy in nats with the 0·ln 0 = 0 convention.
pub fn entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    // Direct exp/sum oracle, independent of the stabilized kernel.
    fn naive_softmax(x: &[f64]) -> Vec<f64> {
        let denom: f64 = x.iter().map(|v| v.exp()).sum();
        x.iter().map(|v| v.exp() / denom).collect()
    }

    #[test]
    fn softmax_symmetric_inputs() {
        let s = softmax(&Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::from_vec(vec![4], vec![1.0; 4]).unwrap(), 0).unwrap();
        for &v in s.data() {
            assert_close(v, 0.25, 1e-15);
        }
    }

    #[test]
    fn softmax_ln2_closed_form() {
        let x = vec![2.0_f64.ln(), 0.0];
        let s = softmax(&Tensor::from_vec(vec![2], x.clone()).unwrap(), 0).unwrap();
        assert_close(s.data()[0], 2.0 / 3.0, 1e-15);
        assert_close(s.data()[1], 1.0 / 3.0, 1e-15);
        let oracle = naive_softmax(&x);
        assert_close(s.data()[0], oracle[0], 1e-15);
        assert_close(s.data()[1], oracle[1], 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::from_vec(vec![2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax(&x, 0), Err(Error::NumericDomain(_))));
        let x = Tensor::from_vec(vec![2], vec![f64::INFINITY, 0.0]).unwrap();
        assert!(matches!(softmax(&x, 0), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = rng_from(41);
        let x = Tensor::randn(vec![5, 7], 3.0, &mut rng);
        let s = softmax(&x, 1).unwrap();
        for r in 0..5 {
            let sum: f64 = s.data()[r * 7..(r + 1) * 7].iter().sum();
            assert_close(sum, 1.0, 1e-12);
        }
        let shifted =
            Tensor::from_vec(vec![5, 7], x.data().iter().map(|v| v + 17.25).collect()).unwrap();
        let s2 = softmax(&shifted, 1).unwrap();
        for (a, b) in s.data().iter().zip(s2.data()) {
            assert_close(*a, *b, 1e-9);
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = Tensor::from_vec(vec![2, 3], vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        // columns are [0,0], [1,1], [2,2] → each lane is 0.5/0.5
        for &v in s.data() {
            assert_close(v, 0.5, 1e-15);
        }
    }

    #[test]
    fn cross_entropy_uniform_case() {
        let logits = Tensor::zeros(vec![256]);
        let loss = cross_entropy(&logits, 17).unwrap();
        assert_close(loss, 256.0_f64.ln(), 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_target() {
        let mut logits = Tensor::zeros(vec![64]);
        logits.data_mut()[5] = 1e6;
        let loss = cross_entropy(&logits, 5).unwrap();
        assert!(loss.abs() < 1e-9, "saturated loss {loss}");
    }

    #[test]
    fn cross_entropy_two_logit_closed_form() {
        let logits = Tensor::from_vec(vec![2], vec![1.0, -1.0]).unwrap();
        let loss = cross_entropy(&logits, 0).unwrap();
        let expected = (1.0 + (-2.0_f64).exp()).ln();
        assert_close(loss, expected, 1e-15);
        // softmax+log oracle
        let p = naive_softmax(&[1.0, -1.0]);
        assert_close(loss, -p[0].ln(), 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let logits = Tensor::zeros(vec![4]);
        assert!(matches!(cross_entropy(&logits, 4), Err(Error::Index(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.input(vec![3.0, -1.0, 2.0], vec![3], true).unwrap();
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_dot_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.input(vec![1.0, 2.0], vec![2], true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.input(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_accumulates_across_fanout() {
        // loss = sum(f(x)) + sum(g(x)) with f = 2x, g = x*x
        let mut tape = Tape::new();
        let x = tape.input(vec![3.0, -2.0], vec![2], true).unwrap();
        let f = tape.scale(x, 2.0).unwrap();
        let fs = tape.sum(f).unwrap();
        let g = tape.mul(x, x).unwrap();
        let gs = tape.sum(g).unwrap();
        let loss = tape.add(fs, gs).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d/dx = 2 + 2x
        assert_eq!(grads.get(x).unwrap(), &[8.0, -2.0]);
    }

    #[test]
    fn frozen_leaf_receives_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(vec![1.0, 2.0], vec![2], false).unwrap();
        let y = tape.input(vec![5.0, 7.0], vec![2], true).unwrap();
        let p = tape.mul(x, y).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(y).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn two_backward_passes_over_one_tape() {
        let mut tape = Tape::new();
        let x = tape.input(vec![2.0], vec![1], true).unwrap();
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.mul(x, x).unwrap();
        let ga = tape.backward(a).unwrap();
        let gb = tape.backward(b).unwrap();
        assert_eq!(ga.get(x).unwrap(), &[3.0]);
        assert_eq!(gb.get(x).unwrap(), &[4.0]);
    }

    #[test]
    fn finite_diff_square_function() {
        let x = Tensor::from_vec(vec![1], vec![3.0]).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                tape.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "x^2 check error {err}");
    }

    #[test]
    fn finite_diff_constant_function() {
        let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = finite_diff_check(
            |tape, _v| {
                let c = tape.input(vec![4.0], vec![1], false)?;
                tape.scale(c, 1.0)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_diff_two_layer_mlp() {
        let mut rng = rng_from(23);
        let w1 = Tensor::randn(vec![6, 8], 0.5, &mut rng);
        let b1 = Tensor::randn(vec![8], 0.5, &mut rng);
        let w2 = Tensor::randn(vec![8, 4], 0.5, &mut rng);
        let targets = vec![2usize, 0, 3];
        let x = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        let err = finite_diff_check(
            |tape, v| {
                let w1v = tape.leaf(&w1);
                let b1v = tape.leaf(&b1);
                let w2v = tape.leaf(&w2);
                let h = tape.matmul(v, w1v)?;
                let h = tape.add_row(h, b1v)?;
                let h = tape.gelu(h)?;
                let logits = tape.matmul(h, w2v)?;
                tape.cross_entropy_sum(logits, &targets, &[true, true, true])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "mlp grad check error {err}");
    }

    #[test]
    fn finite_diff_rejects_nondeterministic_f() {
        use std::cell::Cell;
        let calls = Cell::new(0.0_f64);
        let x = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                calls.set(calls.get() + 1.0);
                let noise = tape.input(vec![calls.get()], vec![1], false)?;
                let p = tape.mul(v, noise)?;
                tape.sum(p)
            },
            &x,
            1e-5,
        );
        assert!(matches!(err, Err(Error::NonDeterministic(_))));
    }

    #[test]
    fn finite_diff_rejects_nonpositive_eps() {
        let x = Tensor::scalar(1.0);
        assert!(matches!(
            finite_diff_check(|tape, v| tape.sum(v), &x, 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn per_primitive_gradient_checks() {
        let mut rng = rng_from(99);

        // matmul
        let b = Tensor::randn(vec![5, 4], 1.0, &mut rng);
        let x = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let err = finite_diff_check(
            |tape, v| {
                let bv = tape.leaf(&b);
                let m = tape.matmul(v, bv)?;
                let sq = tape.mul(m, m)?;
                tape.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "matmul check {err}");

        // softmax (reduce via weighted sum so the gradient is non-trivial)
        let w = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let x = Tensor::randn(vec![4, 6], 2.0, &mut rng);
        let err = finite_diff_check(
            |tape, v| {
                let s = tape.softmax(v, 1)?;
                let wv = tape.leaf(&w);
                let p = tape.mul(s, wv)?;
                tape.sum(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "softmax check {err}");

        // layer-norm
        let gamma = Tensor::randn(vec![6], 1.0, &mut rng);
        let beta = Tensor::randn(vec![6], 1.0, &mut rng);
        let w = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        let x = Tensor::randn(vec![3, 6], 1.5, &mut rng);
        let err = finite_diff_check(
            |tape, v| {
                let g = tape.leaf(&gamma);
                let bt = tape.leaf(&beta);
                let y = tape.layer_norm(v, g, bt)?;
                let wv = tape.leaf(&w);
                let p = tape.mul(y, wv)?;
                tape.sum(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "layer_norm check {err}");

        // gelu
        let x = Tensor::randn(vec![10], 2.0, &mut rng);
        let err = finite_diff_check(
            |tape, v| {
                let y = tape.gelu(v)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "gelu check {err}");

        // embedding lookup (gradient w.r.t. the table)
        let ids = vec![2usize, 0, 2, 3];
        let w = Tensor::randn(vec![4, 5], 1.0, &mut rng);
        let table = Tensor::randn(vec![6, 5], 1.0, &mut rng);
        let err = finite_diff_check(
            |tape, v| {
                let e = tape.embed_lookup(v, &ids)?;
                let wv = tape.leaf(&w);
                let p = tape.mul(e, wv)?;
                tape.sum(p)
            },
            &table,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "embed_lookup check {err}");

        // cross-entropy
        let targets = vec![1usize, 4];
        let x = Tensor::randn(vec![2, 5], 2.0, &mut rng);
        let err = finite_diff_check(
            |tape, v| tape.cross_entropy_sum(v, &targets, &[true, true]),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "cross_entropy check {err}");
    }

    #[test]
    fn causal_softmax_rows_are_prefix_normalized() {
        let mut tape = Tape::new();
        let x = tape
            .input(vec![0.3, 9.0, -1.0, 0.2, 0.1, 9.9, 1.0, -2.0, 0.5], vec![3, 3], false)
            .unwrap();
        let y = tape.causal_softmax(x).unwrap();
        let v = tape.value(y);
        assert_eq!(v[0], 1.0); // row 0: single visible entry
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
        assert!((v[3] + v[4] - 1.0).abs() < 1e-12);
        assert_eq!(v[5], 0.0);
        assert!((v[6] + v[7] + v[8] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_conventions() {
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
        let h = entropy(&[0.5, 0.5, 0.0, 0.0]);
        assert_close(h, 2.0_f64.ln(), 1e-15);
        let h = entropy(&[0.125; 8]);
        assert_close(h, 8.0_f64.ln(), 1e-12);
    }
}
