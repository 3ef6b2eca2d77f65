//! Semantic uncertainty weighting: per-channel evidence is mapped into
//! Dirichlet parameters, each channel's uncertainty is the inverse
//! total evidence, and channels are fused by their reliability weights
//! before a final head.
//!
//! One instance per modality; the visual and textual stacks differ in
//! channel count and share no parameters.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Ffn;
use crate::numerics::{DenseArray, NodeId};
use crate::params::{Forward, ParamStore};
use crate::scalar::{real, Real};

/// Pre-activations are clamped here before `exp`; larger inputs are a
/// scale bug upstream and the eager API reports them instead.
pub const EXP_CLAMP: f64 = 80.0;

/// Dirichlet parameters per (sample, channel, dim); every entry > 1 by
/// the `exp(.) + 1` construction.
#[derive(Debug, Clone)]
pub struct EvidenceTensor<T> {
    values: DenseArray<T>,
}

impl<T: Real> EvidenceTensor<T> {
    pub fn new(values: DenseArray<T>) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::ShapeMismatch {
                context: "EvidenceTensor",
                detail: format!("expected [B x C x K], got {:?}", values.dims()),
            });
        }
        values.validate_finite("EvidenceTensor")?;
        if values.data().iter().any(|&v| v <= T::one()) {
            return Err(Error::Invalid("evidence entries must be > 1".into()));
        }
        Ok(EvidenceTensor { values })
    }

    pub fn values(&self) -> &DenseArray<T> {
        &self.values
    }
}

/// Per-channel uncertainty `u` in (0,1) and reliability `w = 1 - u`.
#[derive(Debug, Clone)]
pub struct ReliabilityWeights<T> {
    pub u: DenseArray<T>,
    pub w: DenseArray<T>,
}

#[derive(Debug, Clone)]
pub struct SupParams {
    /// Evidence head, applied per channel vector.
    pub evidence: Ffn,
    /// Fusion head, applied to the weighted channel mean.
    pub fuse: Ffn,
}

pub fn init_sup<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    k: usize,
) -> SupParams {
    SupParams {
        evidence: Ffn::init::<T>(store, rng, &format!("{name}.evidence"), &[k, k, k], false),
        fuse: Ffn::init::<T>(store, rng, &format!("{name}.fuse"), &[k, k, k], false),
    }
}

/// Tape nodes produced by one SUP pass.
pub struct SupNodes {
    pub alpha: NodeId,
    pub u: NodeId,
    pub w: NodeId,
    pub fused: NodeId,
}

/// Full SUP block on the tape over a `[B x C x K]` stack node.
pub fn forward<T: Real>(p: &SupParams, fwd: &mut Forward<T>, stack: NodeId) -> SupNodes {
    let dims = fwd.tape.dims(stack).to_vec();
    assert_eq!(dims.len(), 3, "SUP input must be [B, C, K]");
    let (b, c, k) = (dims[0], dims[1], dims[2]);
    assert_eq!(k, p.evidence.in_dim(), "SUP channel dim");

    let flat = fwd.tape.reshape(stack, &[b * c, k]);
    let pre = p.evidence.forward(fwd, flat);
    let expd = fwd.tape.exp_clamped(pre, real::<T>(EXP_CLAMP));
    let alpha_flat = fwd.tape.scalar_affine(expd, T::one(), T::one());
    let alpha = fwd.tape.reshape(alpha_flat, &[b, c, k]);

    let total = fwd.tape.sum_last(alpha); // [B x C]
    let inv = fwd.tape.recip(total);
    let u = fwd.tape.scalar_affine(inv, real::<T>(k as f64), T::zero());
    let w = fwd.tape.scalar_affine(u, -T::one(), T::one());

    let mean = fwd.tape.weighted_channel_mean(stack, w);
    let fused = p.fuse.forward(fwd, mean);
    SupNodes { alpha, u, w, fused }
}

/// Dirichlet evidence for a `[B x C x K]` stack: `exp(head(x)) + 1`.
///
/// Errors if any pre-activation exceeds the clamp limit; that signals
/// an input scale problem rather than a numeric edge case.
pub fn evidence<T: Real>(
    p: &SupParams,
    store: &ParamStore<T>,
    stack: &DenseArray<T>,
) -> Result<EvidenceTensor<T>> {
    check_stack(p, stack)?;
    let (b, c, k) = (stack.dims()[0], stack.dims()[1], stack.dims()[2]);
    let mut fwd = Forward::new(store);
    let x = fwd.leaf(stack.clone().reshape(&[b * c, k])?);
    let pre = p.evidence.forward(&mut fwd, x);
    let max_pre = fwd
        .tape
        .val(pre)
        .data()
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64().unwrap_or(f64::NAN)));
    if !max_pre.is_finite() || max_pre > EXP_CLAMP {
        return Err(Error::EvidenceOverflow {
            max: max_pre,
            limit: EXP_CLAMP,
        });
    }
    let expd = fwd.tape.exp(pre);
    let alpha = fwd.tape.scalar_affine(expd, T::one(), T::one());
    EvidenceTensor::new(fwd.tape.val(alpha).clone().reshape(&[b, c, k])?)
}

/// Per-channel uncertainty `u = K / sum_k alpha` and weights `w = 1 - u`.
pub fn uncertainty<T: Real>(alpha: &EvidenceTensor<T>) -> ReliabilityWeights<T> {
    let dims = alpha.values().dims();
    let (b, c, k) = (dims[0], dims[1], dims[2]);
    let kf = real::<T>(k as f64);
    let mut u = Vec::with_capacity(b * c);
    let mut w = Vec::with_capacity(b * c);
    for chunk in alpha.values().data().chunks(k) {
        let total = chunk.iter().fold(T::zero(), |acc, &v| acc + v);
        let uc = kf / total;
        u.push(uc);
        w.push(T::one() - uc);
    }
    ReliabilityWeights {
        u: DenseArray::from_vec(&[b, c], u).unwrap(),
        w: DenseArray::from_vec(&[b, c], w).unwrap(),
    }
}

/// Reliability-weighted fusion followed by the fusion head.
pub fn fuse<T: Real>(
    p: &SupParams,
    store: &ParamStore<T>,
    stack: &DenseArray<T>,
    weights: &ReliabilityWeights<T>,
) -> Result<DenseArray<T>> {
    check_stack(p, stack)?;
    let (b, c) = (stack.dims()[0], stack.dims()[1]);
    if weights.w.dims() != [b, c] {
        return Err(Error::ShapeMismatch {
            context: "sup::fuse",
            detail: format!("weights {:?} for stack {:?}", weights.w.dims(), stack.dims()),
        });
    }
    let floor = real::<T>(1e-9);
    for (row, chunk) in weights.w.data().chunks(c).enumerate() {
        let total = chunk.iter().fold(T::zero(), |acc, &v| acc + v);
        if total < floor {
            return Err(Error::Invalid(format!(
                "weight sum for sample {row} is below 1e-9; weights are corrupted"
            )));
        }
    }
    let mut fwd = Forward::new(store);
    let s = fwd.leaf(stack.clone());
    let w = fwd.leaf(weights.w.clone());
    let mean = fwd.tape.weighted_channel_mean(s, w);
    let fused = p.fuse.forward(&mut fwd, mean);
    Ok(fwd.tape.val(fused).clone())
}

fn check_stack<T: Real>(p: &SupParams, stack: &DenseArray<T>) -> Result<()> {
    if stack.rank() != 3 || stack.dims()[2] != p.evidence.in_dim() {
        return Err(Error::ShapeMismatch {
            context: "sup",
            detail: format!(
                "expected [B x C x {}], got {:?}",
                p.evidence.in_dim(),
                stack.dims()
            ),
        });
    }
    stack.validate_finite("sup input")
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::nn::{Ffn, Linear};

    fn zeroed_sup(store: &mut ParamStore<f64>, k: usize) -> SupParams {
        // all-zero heads: evidence pre-activation is identically zero
        SupParams {
            evidence: Ffn::init(store, &mut ChaCha8Rng::seed_from_u64(0), "z.evidence", &[k, k, k], true),
            fuse: Ffn::init(store, &mut ChaCha8Rng::seed_from_u64(0), "z.fuse", &[k, k, k], true),
        }
    }

    #[test]
    fn zero_head_gives_alpha_two_and_u_half() {
        let mut store = ParamStore::new();
        let k = 4;
        let mut p = zeroed_sup(&mut store, k);
        // also zero the first evidence layer so the pre-activation is 0 exactly
        for layer in &p.evidence.layers {
            let dims = store.get(layer.w).dims().to_vec();
            store.set_value(layer.w, DenseArray::zeros(&dims));
        }
        p.fuse = Ffn::single(Linear::init_identity(&mut store, "id_fuse", k));

        let stack = DenseArray::filled(&[2, 3, k], 0.5);
        let alpha = evidence(&p, &store, &stack).unwrap();
        assert!(alpha.values().data().iter().all(|&v| v == 2.0));

        let rel = uncertainty(&alpha);
        // u = K / (2K) = 0.5 exactly, w = 0.5
        assert!(rel.u.data().iter().all(|&v| v == 0.5));
        assert!(rel.w.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn uncertainty_hand_case_alpha_3_5() {
        let alpha =
            EvidenceTensor::new(DenseArray::from_vec(&[1, 1, 2], vec![3.0, 5.0]).unwrap()).unwrap();
        let rel = uncertainty(&alpha);
        assert_eq!(rel.u.data(), &[0.25]);
        assert_eq!(rel.w.data(), &[0.75]);
    }

    #[test]
    fn strong_evidence_drives_uncertainty_to_zero() {
        let alpha =
            EvidenceTensor::new(DenseArray::from_vec(&[1, 1, 2], vec![1e6, 1e6]).unwrap()).unwrap();
        let rel = uncertainty(&alpha);
        assert!(rel.u.data()[0] < 1e-5);
        assert!(rel.w.data()[0] > 1.0 - 1e-5);
    }

    #[test]
    fn identity_single_layer_evidence_is_exp_plus_one() {
        let mut store = ParamStore::new();
        let k = 3;
        let p = SupParams {
            evidence: Ffn::single(Linear::init_identity(&mut store, "ev", k)),
            fuse: Ffn::single(Linear::init_identity(&mut store, "fu", k)),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let stack = DenseArray::from_vec(&[1, 1, k], data.clone()).unwrap();
        let alpha = evidence(&p, &store, &stack).unwrap();
        for (a, x) in alpha.values().data().iter().zip(&data) {
            assert!((a - (x.exp() + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn evidence_overflow_reports_scale_problem() {
        let mut store = ParamStore::new();
        let p = SupParams {
            evidence: Ffn::single(Linear::init_identity(&mut store, "ev", 2)),
            fuse: Ffn::single(Linear::init_identity(&mut store, "fu", 2)),
        };
        let stack = DenseArray::from_vec(&[1, 1, 2], vec![100.0, 0.0]).unwrap();
        assert!(matches!(
            evidence(&p, &store, &stack),
            Err(Error::EvidenceOverflow { .. })
        ));
    }

    #[test]
    fn fusion_hand_cases() {
        let mut store = ParamStore::new();
        let k = 2;
        let p = SupParams {
            evidence: Ffn::single(Linear::init_identity(&mut store, "ev", k)),
            fuse: Ffn::single(Linear::init_identity(&mut store, "fu", k)),
        };
        let stack = DenseArray::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();

        // one-hot weights select a channel
        let rel = ReliabilityWeights {
            u: DenseArray::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap(),
            w: DenseArray::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap(),
        };
        assert_eq!(fuse(&p, &store, &stack, &rel).unwrap().data(), &[1.0, 0.0]);

        // equal weights give the plain channel mean
        let rel = ReliabilityWeights {
            u: DenseArray::filled(&[1, 2], 0.5),
            w: DenseArray::filled(&[1, 2], 0.5),
        };
        assert_eq!(fuse(&p, &store, &stack, &rel).unwrap().data(), &[0.5, 0.5]);

        // 0.75 / 0.25 mix
        let rel = ReliabilityWeights {
            u: DenseArray::from_vec(&[1, 2], vec![0.25, 0.75]).unwrap(),
            w: DenseArray::from_vec(&[1, 2], vec![0.75, 0.25]).unwrap(),
        };
        assert_eq!(fuse(&p, &store, &stack, &rel).unwrap().data(), &[0.75, 0.25]);

        // corrupted weights rejected
        let rel = ReliabilityWeights {
            u: DenseArray::filled(&[1, 2], 1.0),
            w: DenseArray::filled(&[1, 2], 1e-12),
        };
        assert!(fuse(&p, &store, &stack, &rel).is_err());
    }

    #[test]
    fn invariants_over_random_stacks() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = 4;
        let p = init_sup(&mut store, &mut rng, "sup_t", k);
        let mut data_rng = ChaCha8Rng::seed_from_u64(22);
        for trial in 0..1000 {
            let data: Vec<f64> = (0..2 * 3 * k).map(|_| data_rng.random_range(-2.0..2.0)).collect();
            let stack = DenseArray::from_vec(&[2, 3, k], data).unwrap();
            let alpha = evidence(&p, &store, &stack).unwrap();
            assert!(alpha.values().data().iter().all(|&v| v > 1.0), "trial {trial}");
            let rel = uncertainty(&alpha);
            assert!(rel.u.data().iter().all(|&v| v > 0.0 && v < 1.0));
            for (u, w) in rel.u.data().iter().zip(rel.w.data()) {
                assert_eq!(u + w, 1.0);
            }
        }
    }

    #[test]
    fn scaling_one_channel_evidence_reduces_its_uncertainty() {
        let base = EvidenceTensor::new(
            DenseArray::from_vec(&[1, 2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap(),
        )
        .unwrap();
        let scaled = EvidenceTensor::new(
            DenseArray::from_vec(&[1, 2, 2], vec![3.0, 4.5, 4.0, 5.0]).unwrap(),
        )
        .unwrap();
        let (u0, u1) = (uncertainty(&base), uncertainty(&scaled));
        assert!(u1.u.data()[0] < u0.u.data()[0]);
        assert_eq!(u1.u.data()[1], u0.u.data()[1]);
    }

    #[test]
    fn convex_combination_on_axis_aligned_stacks() {
        // with identity fusion, the pre-head fusion of one-hot channel
        // vectors must have nonnegative coordinates summing to 1
        let mut store = ParamStore::new();
        let k = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let p = SupParams {
            evidence: Ffn::init(&mut store, &mut rng, "cx.evidence", &[k, k, k], false),
            fuse: Ffn::single(Linear::init_identity(&mut store, "cx.fuse", k)),
        };
        let stack = DenseArray::from_vec(
            &[1, 3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let alpha = evidence(&p, &store, &stack).unwrap();
        let rel = uncertainty(&alpha);
        let fused = fuse(&p, &store, &stack, &rel).unwrap();
        let sum: f64 = fused.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "coordinates {:?}", fused.data());
        assert!(fused.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::numerics::{grad_check, DEFAULT_STEP};
        use crate::verify::StoreFn;

        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let p = init_sup(&mut store, &mut rng, "gc", 4);
        let mut drng = ChaCha8Rng::seed_from_u64(41);
        let data: Vec<f64> = (0..2 * 3 * 4).map(|_| drng.random_range(-1.0..1.0)).collect();
        let stack = DenseArray::from_vec(&[2, 3, 4], data).unwrap();

        let f = StoreFn::new(store, move |fwd| {
            let s = fwd.leaf(stack.clone());
            let nodes = forward(&p, fwd, s);
            let sq = fwd.tape.mul(nodes.fused, nodes.fused);
            Ok(fwd.tape.sum_all(sq))
        });
        let x0 = f.flat_params();
        let err = grad_check(&f, &x0, DEFAULT_STEP).unwrap();
        assert!(err < 1e-4, "SUP gradient error {err}");
    }
}
