//! Stand-alone numeric routines shared by the model and the evaluation
//! harness. The tape has matching primitives; these run without recording.

use crate::error::{Error, Result};
use crate::numerics::DenseArray;
use crate::scalar::{real, Real};

/// Floor applied inside logarithms of divergence terms.
pub const KL_FLOOR: f64 = 1e-8;

/// Behaviour when a probability entry falls below [`KL_FLOOR`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloorMode {
    /// Clamp the entry up to the floor (default inside training).
    Clamp,
    /// Reject the input instead.
    Strict,
}

/// Row-wise softmax of a rank-2 array. Shift-invariant per row.
pub fn row_softmax<T: Real>(x: &DenseArray<T>) -> Result<DenseArray<T>> {
    x.validate_finite("row_softmax input")?;
    let (r, d) = (x.rows(), x.cols());
    let mut out = vec![T::zero(); r * d];
    for i in 0..r {
        softmax_row(x.row(i), &mut out[i * d..(i + 1) * d]);
    }
    DenseArray::from_vec(&[r, d], out)
}

/// Softmax of a single row into `out` (max-subtracted for stability).
pub(crate) fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let mut max = row[0];
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Mean over rows of KL(p‖q) + KL(q‖p).
///
/// Both inputs must be row-stochastic within 1e-6. Entries below the
/// floor are clamped or rejected according to `mode`.
pub fn symmetric_kl<T: Real>(p: &DenseArray<T>, q: &DenseArray<T>, mode: FloorMode) -> Result<T> {
    if p.dims() != q.dims() {
        return Err(Error::ShapeMismatch {
            context: "symmetric_kl",
            detail: format!("{:?} vs {:?}", p.dims(), q.dims()),
        });
    }
    let (r, d) = (p.rows(), p.cols());
    let floor = real::<T>(KL_FLOOR);
    let tol = real::<T>(1e-6);
    for (name, arr) in [("p", p), ("q", q)] {
        for i in 0..r {
            let sum = arr.row(i).iter().fold(T::zero(), |acc, &v| acc + v);
            if (sum - T::one()).abs() > tol {
                let _ = name;
                return Err(Error::NotNormalized {
                    row: i,
                    sum: sum.to_f64().unwrap_or(f64::NAN),
                });
            }
            if mode == FloorMode::Strict {
                if let Some(&bad) = arr.row(i).iter().find(|&&v| v < floor) {
                    return Err(Error::BelowFloor {
                        row: i,
                        value: bad.to_f64().unwrap_or(f64::NAN),
                        floor: KL_FLOOR,
                    });
                }
            }
        }
    }
    let mut total = T::zero();
    for i in 0..r {
        let (pr, qr) = (p.row(i), q.row(i));
        for k in 0..d {
            let pv = pr[k].max(floor);
            let qv = qr[k].max(floor);
            // KL(p‖q) + KL(q‖p) = Σ (p − q)(ln p − ln q)
            total += (pv - qv) * (pv.ln() - qv.ln());
        }
    }
    Ok(total / real::<T>(r as f64))
}

/// Cosine similarity between every row of `a` and every row of `b`.
///
/// Errors with the offending row index if any row has norm ≤ 1e-12.
pub fn cosine_sim_matrix<T: Real>(a: &DenseArray<T>, b: &DenseArray<T>) -> Result<DenseArray<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            context: "cosine_sim_matrix",
            detail: format!("{:?} vs {:?}", a.dims(), b.dims()),
        });
    }
    let na = normalized_rows(a, "left")?;
    let nb = normalized_rows(b, "right")?;
    let (r, s, d) = (a.rows(), b.rows(), a.cols());
    let mut out = vec![T::zero(); r * s];
    for i in 0..r {
        let ra = &na[i * d..(i + 1) * d];
        for j in 0..s {
            let rb = &nb[j * d..(j + 1) * d];
            let mut dot = T::zero();
            for k in 0..d {
                dot += ra[k] * rb[k];
            }
            out[i * s + j] = dot;
        }
    }
    DenseArray::from_vec(&[r, s], out)
}

fn normalized_rows<T: Real>(x: &DenseArray<T>, side: &'static str) -> Result<Vec<T>> {
    let (r, d) = (x.rows(), x.cols());
    let min_norm = real::<T>(1e-12);
    let mut out = x.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * d..(i + 1) * d];
        let norm = row
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt();
        if norm <= min_norm {
            return Err(Error::ZeroNormRow {
                side,
                index: i,
                norm: norm.to_f64().unwrap_or(0.0),
            });
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(dims: &[usize], v: &[f64]) -> DenseArray<f64> {
        DenseArray::from_vec(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let s = row_softmax(&arr(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        for c in [-3.0, 0.0, 7.5] {
            let s = row_softmax(&arr(&[1, 3], &[c, c, c])).unwrap();
            for &v in s.data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_hand_case() {
        // exp(ln 1) : exp(ln 3) = 1 : 3
        let s = row_softmax(&arr(&[1, 2], &[1.0f64.ln(), 3.0f64.ln()])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(row_softmax(&arr(&[1, 2], &[f64::NAN, 0.0]).clone()).is_err());
    }

    #[test]
    fn symkl_identity_and_hand_value() {
        let p = arr(&[1, 2], &[0.75, 0.25]);
        assert_eq!(symmetric_kl(&p, &p, FloorMode::Clamp).unwrap(), 0.0);

        let q = arr(&[1, 2], &[0.25, 0.75]);
        let v = symmetric_kl(&p, &q, FloorMode::Clamp).unwrap();
        assert!((v - 3.0f64.ln()).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn symkl_rejects_unnormalized_and_below_floor() {
        let p = arr(&[1, 2], &[0.9, 0.3]);
        let q = arr(&[1, 2], &[0.5, 0.5]);
        assert!(matches!(
            symmetric_kl(&p, &q, FloorMode::Clamp),
            Err(Error::NotNormalized { row: 0, .. })
        ));

        let tiny = arr(&[1, 2], &[1e-12, 1.0 - 1e-12]);
        assert!(symmetric_kl(&tiny, &q, FloorMode::Clamp).is_ok());
        assert!(matches!(
            symmetric_kl(&tiny, &q, FloorMode::Strict),
            Err(Error::BelowFloor { .. })
        ));
    }

    #[test]
    fn cosine_hand_cases() {
        let a = arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = cosine_sim_matrix(&a, &a).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 1.0]);

        let u = arr(&[1, 2], &[1.0, 1.0]);
        let v = arr(&[1, 2], &[1.0, 0.0]);
        let m = cosine_sim_matrix(&u, &v).unwrap();
        assert!((m.data()[0] - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cosine_names_zero_norm_row() {
        let a = arr(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let b = arr(&[1, 2], &[1.0, 0.0]);
        match cosine_sim_matrix(&a, &b) {
            Err(Error::ZeroNormRow { side, index, .. }) => {
                assert_eq!(side, "left");
                assert_eq!(index, 1);
            }
            other => panic!("expected zero-norm error, got {other:?}"),
        }
    }
}
