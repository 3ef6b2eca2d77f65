//! Scalar abstraction: every numeric kernel is generic over [`Real`].
//!
//! Training runs in `f32`; gradient verification reruns the same code in
//! `f64`. The two modes share one implementation, so a check in double
//! precision exercises exactly the arithmetic used in single precision.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point scalar usable in arrays, tapes and model parameters.
pub trait Real:
    Float + FromPrimitive + NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    /// Dtype code stored in tensor file headers (0 = f32, 1 = f64).
    const DTYPE: u8;
    /// Encoded size of one element in bytes.
    const WIDTH: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: u8 = 0;
    const WIDTH: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 element needs 4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: u8 = 1;
    const WIDTH: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 element needs 8 bytes"))
    }
}

/// Convert an `f64` constant into the active scalar type.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 constant converts into Real")
}
