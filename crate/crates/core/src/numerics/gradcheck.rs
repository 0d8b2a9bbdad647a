//! Finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};

/// Compare the reverse-mode gradient of a scalar function against central
/// finite differences, elementwise, returning the max relative error.
///
/// The error metric is `|ad - fd| / max(|ad|, |fd|, 1)`, which behaves like a
/// relative error for large gradients and an absolute one near zero. `f` must
/// be deterministic; use `h` around `1e-6..1e-3` for f64 inputs.
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    if h <= 0.0 {
        return Err(Error::contract("grad_check step h must be positive"));
    }
    let leaf = theta.deep_copy().requires_grad(true);
    let mut tape = Tape::recording();
    let loss = f(&mut tape, &leaf)?;
    if loss.numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check requires a scalar function, got output shape {:?}",
            loss.shape()
        )));
    }
    let grads = tape.backward(&loss)?;
    let zeros;
    let g_ad: &[f64] = match grads.get(&leaf) {
        Some(g) => g,
        None => {
            zeros = vec![0.0; theta.numel()];
            &zeros
        }
    };

    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::from_vec(theta.shape().to_vec(), theta.dtype(), data)?;
        let mut tape = Tape::inference();
        Ok(f(&mut tape, &t)?.data()[0])
    };

    let base = theta.data();
    let mut max_err = 0.0_f64;
    for i in 0..theta.numel() {
        let mut plus = base.to_vec();
        plus[i] += h;
        let mut minus = base.to_vec();
        minus[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (g_ad[i] - fd).abs() / g_ad[i].abs().max(fd.abs()).max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
