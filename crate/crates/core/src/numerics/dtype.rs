//! Element dtypes.
//!
//! All arithmetic runs in f64. A tensor's dtype controls how values are
//! *stored*: after every primitive the output buffer is rounded to the
//! dtype's precision, so an `F32` tensor only ever holds f32-representable
//! values (and serializes bit-exactly as 4-byte floats). `F16` works the
//! same way and is used only for quantization scales.

use half::f16;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F64,
    F32,
    /// Stored at f16 precision, computed in wider precision.
    F16,
}

impl Dtype {
    /// Width in bytes of one element when serialized at this dtype.
    pub fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }

    /// Round a value to this dtype's representable set.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Dtype::F64 => x,
            Dtype::F32 => x as f32 as f64,
            Dtype::F16 => f16::from_f64(x).to_f64(),
        }
    }

    /// Round a buffer in place.
    pub fn round_slice(self, xs: &mut [f64]) {
        match self {
            Dtype::F64 => {}
            Dtype::F32 => {
                for x in xs {
                    *x = *x as f32 as f64;
                }
            }
            Dtype::F16 => {
                for x in xs {
                    *x = f16::from_f64(*x).to_f64();
                }
            }
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
            Dtype::F16 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F64),
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F16),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_is_identity() {
        for &x in &[0.0, -1.5, 1e300, f64::MIN_POSITIVE] {
            assert_eq!(Dtype::F64.round(x), x);
        }
    }

    #[test]
    fn f32_round_matches_cast() {
        let x = 0.1_f64;
        assert_eq!(Dtype::F32.round(x), 0.1_f32 as f64);
        assert_ne!(Dtype::F32.round(x), x);
    }

    #[test]
    fn f16_round_known_values() {
        // 1/3 at f16 precision
        let r = Dtype::F16.round(1.0 / 3.0);
        assert!((r - 1.0 / 3.0).abs() < 1e-3);
        assert_eq!(Dtype::F16.round(r), r);
        // exact small integers survive
        assert_eq!(Dtype::F16.round(5.0), 5.0);
    }
}
