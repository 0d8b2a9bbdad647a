//! Dense-tensor arithmetic and reverse-mode differentiation.
//!
//! This layer knows nothing about models: it provides row-major [`Tensor`]s,
//! a per-forward-pass [`Tape`], the differentiable primitives in `ops`, and a
//! finite-difference [`grad_check`] oracle. Everything is deterministic:
//! identical inputs produce bit-identical outputs.

mod dtype;
mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use dtype::Dtype;
pub use gradcheck::grad_check;
pub use tape::{Grads, Tape};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
        assert_eq!(a.len(), b.len(), "{what}: length");
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "{what}: elem {i}: {x} vs {y}");
        }
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::inference();
        let eye = Tensor::from_vec(
            vec![3, 3],
            Dtype::F64,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let y = tape.matmul(&eye, &eye).unwrap();
        assert_eq!(y.data(), eye.data());
    }

    #[test]
    fn matmul_hand_computed_2x2() {
        let mut tape = Tape::inference();
        let a = Tensor::from_vec(vec![2, 2], Dtype::F64, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 2], Dtype::F64, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let y = tape.matmul(&a, &b).unwrap();
        assert_eq!(y.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        // independent oracle: plain i-j-p accumulation
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                want[i * n + j] = acc;
            }
        }
        let mut tape = Tape::inference();
        let at = Tensor::from_vec(vec![m, k], Dtype::F64, a).unwrap();
        let bt = Tensor::from_vec(vec![k, n], Dtype::F64, b).unwrap();
        let y = tape.matmul(&at, &bt).unwrap();
        assert_close(y.data(), &want, 1e-12, "matmul vs naive");
    }

    #[test]
    fn matmul_rejects_dim_mismatch() {
        let mut tape = Tape::inference();
        let a = Tensor::zeros(vec![2, 3], Dtype::F64);
        let b = Tensor::zeros(vec![4, 2], Dtype::F64);
        assert!(tape.matmul(&a, &b).is_err());
    }

    #[test]
    fn rmsnorm_unit_rows() {
        let mut tape = Tape::inference();
        let x = Tensor::from_vec(vec![1, 4], Dtype::F64, vec![1.0; 4]).unwrap();
        let w = Tensor::from_vec(vec![4], Dtype::F64, vec![1.0; 4]).unwrap();
        let y = tape.rmsnorm(&x, &w, 0.0).unwrap();
        assert_close(y.data(), &[1.0; 4], 1e-15, "rmsnorm ones");
    }

    #[test]
    fn rmsnorm_hand_computed() {
        // x=[3,4]: mean square 12.5, so y = x / sqrt(12.5)
        let mut tape = Tape::inference();
        let x = Tensor::from_vec(vec![1, 2], Dtype::F64, vec![3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(vec![2], Dtype::F64, vec![1.0, 1.0]).unwrap();
        let y = tape.rmsnorm(&x, &w, 0.0).unwrap();
        let r = 12.5_f64.sqrt();
        assert_close(y.data(), &[3.0 / r, 4.0 / r], 1e-12, "rmsnorm 3,4");
        assert!((y.data()[0] - 0.8485).abs() < 1e-4);
        assert!((y.data()[1] - 1.1314).abs() < 1e-4);
    }

    #[test]
    fn silu_zero_and_softmax_uniform() {
        let mut tape = Tape::inference();
        let x = Tensor::from_vec(vec![1], Dtype::F64, vec![0.0]).unwrap();
        assert_eq!(tape.silu(&x).unwrap().data()[0], 0.0);
        let z = Tensor::zeros(vec![1, 3], Dtype::F64);
        let p = tape.softmax_lastdim(&z).unwrap();
        assert_close(p.data(), &[1.0 / 3.0; 3], 1e-15, "softmax zeros");
    }

    #[test]
    fn softplus_dominates_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>() * 40.0 - 20.0).collect();
        let mut tape = Tape::inference();
        let x = Tensor::from_vec(vec![1000], Dtype::F64, data.clone()).unwrap();
        let y = tape.softplus(&x).unwrap();
        for (v, s) in data.iter().zip(y.data()) {
            assert!(*s >= v.max(0.0), "softplus({v}) = {s}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let cols = rng.gen_range(1..9);
            let data: Vec<f64> = (0..cols).map(|_| rng.gen::<f64>() * 10.0 - 5.0).collect();
            let shift: f64 = rng.gen::<f64>() * 100.0 - 50.0;
            let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
            let mut tape = Tape::inference();
            let a = Tensor::from_vec(vec![1, cols], Dtype::F64, data).unwrap();
            let b = Tensor::from_vec(vec![1, cols], Dtype::F64, shifted).unwrap();
            let pa = tape.softmax_lastdim(&a).unwrap();
            let pb = tape.softmax_lastdim(&b).unwrap();
            let sum: f64 = pa.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert_close(pa.data(), pb.data(), 1e-12, "softmax shift invariance");
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::inference();
        let x = Tensor::from_vec(vec![4, 2], Dtype::F64, vec![1.0, -1.0, 2.0, 0.5, 3.0, 0.0, 4.0, 1.0])
            .unwrap();
        let k = Tensor::from_vec(vec![1, 2], Dtype::F64, vec![1.0, 1.0]).unwrap();
        let b = Tensor::zeros(vec![2], Dtype::F64);
        let y = tape.causal_conv1d(&x, &k, &b, None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_hand_rolled_oracle() {
        // x=[1,2,3], kernel=[1,1] (width 2) -> [1, 3, 5]
        let mut tape = Tape::inference();
        let x = Tensor::from_vec(vec![3, 1], Dtype::F64, vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::from_vec(vec![2, 1], Dtype::F64, vec![1.0, 1.0]).unwrap();
        let b = Tensor::zeros(vec![1], Dtype::F64);
        let y = tape.causal_conv1d(&x, &k, &b, None).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn conv_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (len, ch, w) = (9, 3, 4);
        let base: Vec<f64> = (0..len * ch).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let k: Vec<f64> = (0..w * ch).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let kt = Tensor::from_vec(vec![w, ch], Dtype::F64, k).unwrap();
        let bt = Tensor::zeros(vec![ch], Dtype::F64);
        let mut tape = Tape::inference();
        let full = tape
            .causal_conv1d(&Tensor::from_vec(vec![len, ch], Dtype::F64, base.clone()).unwrap(), &kt, &bt, None)
            .unwrap();
        for t in 0..len {
            // zero out everything after position t
            let mut cut = base.clone();
            for v in cut[(t + 1) * ch..].iter_mut() {
                *v = 0.0;
            }
            let y = tape
                .causal_conv1d(&Tensor::from_vec(vec![len, ch], Dtype::F64, cut).unwrap(), &kt, &bt, None)
                .unwrap();
            assert_close(
                &y.data()[..(t + 1) * ch],
                &full.data()[..(t + 1) * ch],
                0.0,
                "conv causality",
            );
        }
    }

    #[test]
    fn rotary_is_an_isometry_and_identity_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let d_head = 8;
        let theta: Vec<f64> = (0..d_head / 2).map(|i| 0.5_f64.powi(i as i32)).collect();
        let data: Vec<f64> = (0..2 * d_head).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let x = Tensor::from_vec(vec![2, d_head], Dtype::F64, data.clone()).unwrap();
        let mut tape = Tape::inference();
        let y = tape.apply_rotary(&x, &[0, 5], &theta, d_head).unwrap();
        // position 0 row is untouched
        assert_close(&y.data()[..d_head], &data[..d_head], 0.0, "rotary pos 0");
        // pair norms preserved at position 5
        for i in 0..d_head / 2 {
            let (a, b) = (data[d_head + 2 * i], data[d_head + 2 * i + 1]);
            let (c, d) = (y.data()[d_head + 2 * i], y.data()[d_head + 2 * i + 1]);
            assert!(((a * a + b * b).sqrt() - (c * c + d * d).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_twice_gives_identical_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let data: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let w = Tensor::from_vec(vec![3, 4], Dtype::F64, data).unwrap().requires_grad(true);
        let x = Tensor::from_vec(vec![2, 4], Dtype::F64, vec![0.5; 8]).unwrap();
        let mut tape = Tape::recording();
        let y = tape.matmul_tb(&x, &w).unwrap();
        let y = tape.silu(&y).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        let g1 = tape.backward(&loss).unwrap();
        let g2 = tape.backward(&loss).unwrap();
        assert_eq!(g1.get(&w).unwrap(), g2.get(&w).unwrap());
    }

    #[test]
    fn tied_use_accumulates_one_summed_gradient() {
        // loss = sum(w*a) + sum(w*b) => dw = a + b
        let w = Tensor::from_vec(vec![3], Dtype::F64, vec![1.0, 2.0, 3.0]).unwrap().requires_grad(true);
        let a = Tensor::from_vec(vec![3], Dtype::F64, vec![1.0, 0.0, -1.0]).unwrap();
        let b = Tensor::from_vec(vec![3], Dtype::F64, vec![2.0, 2.0, 2.0]).unwrap();
        let mut tape = Tape::recording();
        let u = tape.mul(&w, &a).unwrap();
        let v = tape.mul(&w, &b).unwrap();
        let s = tape.add(&u, &v).unwrap();
        let loss = tape.sum_all(&s).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&w).unwrap(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn inference_tape_never_grows() {
        let mut tape = Tape::inference();
        let x = Tensor::zeros(vec![2, 2], Dtype::F64).requires_grad(true);
        for _ in 0..10 {
            let _ = tape.matmul(&x, &x).unwrap();
        }
        assert_eq!(tape.num_nodes(), 0);
    }

    #[test]
    fn f32_dtype_rounds_op_outputs() {
        let mut tape = Tape::inference();
        let x = Tensor::from_vec(vec![2], Dtype::F32, vec![0.1, 0.2]).unwrap();
        let y = tape.add(&x, &x).unwrap();
        for v in y.data() {
            assert_eq!(*v, *v as f32 as f64);
        }
        assert_eq!(y.dtype(), Dtype::F32);
    }
}
