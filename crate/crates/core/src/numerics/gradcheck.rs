//! Central-difference verification of reverse-mode gradients.
//!
//! Runs in double precision only; the step size is restricted to the
//! window where truncation and rounding error are both small.

use crate::error::{Error, Result};
use crate::numerics::array::DenseArray;
use crate::numerics::tape::{NodeId, Tape};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// A scalar-valued function that can also report its own gradient.
pub trait ScalarFn {
    fn eval(&self, x: &DenseArray<f64>) -> Result<f64>;
    fn grad(&self, x: &DenseArray<f64>) -> Result<Vec<f64>>;
}

/// Max over coordinates of `|analytic - central| / max(1, |central|)`.
pub fn grad_check(f: &dyn ScalarFn, x: &DenseArray<f64>, h: f64) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::BadStepSize(h));
    }
    let analytic = f.grad(x)?;
    assert_eq!(analytic.len(), x.len(), "gradient length mismatch");

    let mut max_err = 0.0f64;
    let mut probe = x.clone();
    for (i, &g) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f.eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f.eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("grad_check probe at coordinate {i}")));
        }
        let central = (fp - fm) / (2.0 * h);
        let err = (g - central).abs() / central.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

/// [`ScalarFn`] built from a tape program: the closure receives a fresh
/// tape holding `x` as its first leaf and returns the loss node.
pub struct TapeFn<F>(pub F)
where
    F: Fn(&mut Tape<f64>, NodeId) -> NodeId;

impl<F> ScalarFn for TapeFn<F>
where
    F: Fn(&mut Tape<f64>, NodeId) -> NodeId,
{
    fn eval(&self, x: &DenseArray<f64>) -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let loss = (self.0)(&mut tape, leaf);
        let v = tape.scalar_val(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite("TapeFn loss".into()));
        }
        Ok(v)
    }

    fn grad(&self, x: &DenseArray<f64>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let loss = (self.0)(&mut tape, leaf);
        if !tape.scalar_val(loss).is_finite() {
            return Err(Error::NonFinite("TapeFn loss".into()));
        }
        Ok(tape.backward(loss).wrt(leaf).into_data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        // f(x) = sum(x^2), analytic gradient 2x
        let f = TapeFn(|t: &mut Tape<f64>, x: NodeId| {
            let sq = t.mul(x, x);
            t.sum_all(sq)
        });
        let x = DenseArray::from_vec(&[4], vec![0.5, -1.25, 2.0, 3.75]).unwrap();
        let err = grad_check(&f, &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn constant_has_zero_gradient() {
        let f = TapeFn(|t: &mut Tape<f64>, x: NodeId| {
            let zero = t.scalar_affine(x, 0.0, 1.5);
            t.sum_all(zero)
        });
        let x = DenseArray::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = f.grad(&x).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
        let err = grad_check(&f, &x, DEFAULT_STEP).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn step_size_window_enforced() {
        let f = TapeFn(|t: &mut Tape<f64>, x: NodeId| t.sum_all(x));
        let x = DenseArray::from_vec(&[1], vec![1.0]).unwrap();
        assert!(matches!(grad_check(&f, &x, 1e-2), Err(Error::BadStepSize(_))));
        assert!(matches!(grad_check(&f, &x, 1e-8), Err(Error::BadStepSize(_))));
    }
}
