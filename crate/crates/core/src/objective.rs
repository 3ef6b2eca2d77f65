//! Contrastive and total losses over unified embeddings.
//!
//! Similarity logits are cosine similarities scaled by a learnable
//! temperature `exp(logit_scale)`; the contrastive term averages the
//! cross-entropy over both retrieval directions. The total loss adds
//! the alignment divergence weighted by a fixed balance factor.

use crate::data::BatchLabels;
use crate::error::{Error, Result};
use crate::numerics::{DenseArray, NodeId};
use crate::params::{Forward, ParamId, ParamStore};
use crate::scalar::{real, Real};

/// `exp(logit_scale)` starts at 1/0.07 and is capped at 100.
pub const INIT_LOGIT_SCALE: f64 = 2.659_260_036_932_778; // ln(1/0.07)
pub const MAX_TEMPERATURE: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Learnable log-temperature.
    pub logit_scale: ParamId,
    /// Fixed nonnegative weight on the alignment loss.
    pub balance: f64,
}

pub fn init_loss<T: Real>(store: &mut ParamStore<T>, balance: f64, init_logit_scale: f64) -> Result<LossConfig> {
    if balance < 0.0 {
        return Err(Error::Config(format!("loss balance must be >= 0, got {balance}")));
    }
    let logit_scale = store.add("loss.logit_scale", DenseArray::scalar(real::<T>(init_logit_scale)));
    Ok(LossConfig { logit_scale, balance })
}

/// Clamp the log-temperature so `exp(logit_scale) <= MAX_TEMPERATURE`.
/// Applied after each optimizer step.
pub fn clamp_logit_scale<T: Real>(store: &mut ParamStore<T>, cfg: &LossConfig) {
    let cap = real::<T>(MAX_TEMPERATURE.ln());
    let v = store.get_mut(cfg.logit_scale);
    if v.data()[0] > cap {
        v.data_mut()[0] = cap;
    }
}

/// Symmetric contrastive loss on the tape. Rows of `f_brain` pair with
/// equal-index rows of `f_vis`.
pub fn contrastive_node<T: Real>(
    fwd: &mut Forward<T>,
    cfg: &LossConfig,
    f_brain: NodeId,
    f_vis: NodeId,
) -> NodeId {
    let b = fwd.tape.dims(f_brain)[0];
    let nb = fwd.tape.l2_normalize_rows(f_brain);
    let nv = fwd.tape.l2_normalize_rows(f_vis);
    let sims = fwd.tape.matmul_tb(nb, nv);
    let ls = fwd.p(cfg.logit_scale);
    let temp = fwd.tape.exp(ls);
    let logits = fwd.tape.mul_scalar_node(sims, temp);
    let targets: Vec<usize> = (0..b).collect();
    let ce_fwd = fwd.tape.cross_entropy_rows(logits, targets.clone());
    let logits_t = fwd.tape.transpose2d(logits);
    let ce_bwd = fwd.tape.cross_entropy_rows(logits_t, targets);
    let sum = fwd.tape.add(ce_fwd, ce_bwd);
    fwd.tape.scalar_affine(sum, real::<T>(0.5), T::zero())
}

/// Total objective: `l_con + balance * l_align`.
pub fn total_node<T: Real>(
    fwd: &mut Forward<T>,
    cfg: &LossConfig,
    l_con: NodeId,
    l_align: NodeId,
) -> NodeId {
    let weighted = fwd.tape.scalar_affine(l_align, real::<T>(cfg.balance), T::zero());
    fwd.tape.add(l_con, weighted)
}

/// Contrastive loss without a persistent tape.
pub fn contrastive_loss<T: Real>(
    store: &ParamStore<T>,
    cfg: &LossConfig,
    f_brain: &DenseArray<T>,
    f_vis: &DenseArray<T>,
    labels: &BatchLabels,
) -> Result<T> {
    if f_brain.rank() != 2 || f_brain.dims() != f_vis.dims() {
        return Err(Error::ShapeMismatch {
            context: "contrastive_loss",
            detail: format!("{:?} vs {:?}", f_brain.dims(), f_vis.dims()),
        });
    }
    if labels.len() != f_brain.rows() || !labels.is_identity() {
        return Err(Error::Invalid(
            "contrastive_loss expects the identity pairing over the batch".into(),
        ));
    }
    for (side, arr) in [("brain", f_brain), ("vision", f_vis)] {
        for (i, row) in (0..arr.rows()).map(|i| (i, arr.row(i))) {
            let norm = row.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
            if norm <= real::<T>(1e-12) {
                return Err(Error::ZeroNormRow {
                    side,
                    index: i,
                    norm: norm.to_f64().unwrap_or(0.0),
                });
            }
        }
    }
    let mut fwd = Forward::new(store);
    let fb = fwd.leaf(f_brain.clone());
    let fv = fwd.leaf(f_vis.clone());
    let loss = contrastive_node(&mut fwd, cfg, fb, fv);
    let v = fwd.tape.scalar_val(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite("contrastive_loss".into()));
    }
    Ok(v)
}

/// `l_con + balance * l_align` for already-computed scalars.
pub fn total_loss<T: Real>(cfg: &LossConfig, l_con: T, l_align: T) -> Result<T> {
    if !l_con.is_finite() || !l_align.is_finite() {
        return Err(Error::NonFinite("total_loss".into()));
    }
    if l_align < T::zero() {
        return Err(Error::Invalid("alignment loss must be >= 0".into()));
    }
    Ok(l_con + real::<T>(cfg.balance) * l_align)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;

    fn setup(balance: f64) -> (ParamStore<f64>, LossConfig) {
        let mut store = ParamStore::new();
        let cfg = init_loss(&mut store, balance, INIT_LOGIT_SCALE).unwrap();
        (store, cfg)
    }

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DenseArray<f64> {
        let mut data = vec![0.0f64; n * d];
        for row in data.chunks_mut(d) {
            let mut norm = 0.0;
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
                norm += *v * *v;
            }
            let norm = norm.sqrt();
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        DenseArray::from_vec(&[n, d], data).unwrap()
    }

    #[test]
    fn uniform_logits_give_exactly_ln_b() {
        // temperature 0 makes every logit zero regardless of similarity
        let (mut store, cfg) = setup(1.0);
        store.set_value(cfg.logit_scale, DenseArray::scalar(f64::NEG_INFINITY));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for b in [2usize, 64] {
            let fb = unit_rows(&mut rng, b, 16);
            let fv = unit_rows(&mut rng, b, 16);
            let loss = contrastive_loss(&store, &cfg, &fb, &fv, &BatchLabels::identity(b)).unwrap();
            assert_eq!(loss, (b as f64).ln(), "batch {b}");
        }
    }

    #[test]
    fn perfect_matches_with_hot_temperature_drive_loss_to_zero() {
        let (mut store, cfg) = setup(1.0);
        store.set_value(cfg.logit_scale, DenseArray::scalar(MAX_TEMPERATURE.ln()));
        // orthonormal, perfectly paired embeddings
        let eye = crate::params::identity_matrix::<f64>(8);
        let loss = contrastive_loss(&store, &cfg, &eye, &eye, &BatchLabels::identity(8)).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn random_unit_embeddings_at_temperature_one_sit_near_ln_b() {
        let (mut store, cfg) = setup(1.0);
        store.set_value(cfg.logit_scale, DenseArray::scalar(0.0)); // temperature 1
        let b = 64;
        let expect = (b as f64).ln();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let fb = unit_rows(&mut rng, b, 128);
            let fv = unit_rows(&mut rng, b, 128);
            let loss = contrastive_loss(&store, &cfg, &fb, &fv, &BatchLabels::identity(b)).unwrap();
            assert!(
                (loss - expect).abs() < 0.15,
                "seed {seed}: loss {loss} vs ln 64 = {expect}"
            );
        }
    }

    #[test]
    fn common_permutation_leaves_loss_unchanged() {
        let (store, cfg) = setup(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = 8;
        let fb = unit_rows(&mut rng, b, 12);
        let fv = unit_rows(&mut rng, b, 12);
        let base = contrastive_loss(&store, &cfg, &fb, &fv, &BatchLabels::identity(b)).unwrap();

        let perm = [5usize, 2, 7, 0, 3, 6, 1, 4];
        let pb = fb.gather_axis0(&perm);
        let pv = fv.gather_axis0(&perm);
        let permuted = contrastive_loss(&store, &cfg, &pb, &pv, &BatchLabels::identity(b)).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn row_shift_invariance_of_cross_entropy() {
        // adding a constant to all logits of a row leaves that row's term
        // unchanged; exercised through the tape primitive directly
        let mut t = crate::numerics::Tape::<f64>::new();
        let x = t.leaf(DenseArray::from_vec(&[2, 3], vec![0.1, -0.4, 0.8, 1.0, 0.0, -1.0]).unwrap());
        let l1 = t.cross_entropy_rows(x, vec![0, 2]);
        let shifted = t.scalar_affine(x, 1.0, 5.0);
        let l2 = t.cross_entropy_rows(shifted, vec![0, 2]);
        assert!((t.scalar_val(l1) - t.scalar_val(l2)).abs() < 1e-9);
    }

    #[test]
    fn zero_norm_embedding_row_is_an_error() {
        let (store, cfg) = setup(1.0);
        let mut fb = crate::params::identity_matrix::<f64>(4);
        for v in fb.data_mut()[4..8].iter_mut() {
            *v = 0.0;
        }
        let fv = crate::params::identity_matrix::<f64>(4);
        assert!(matches!(
            contrastive_loss(&store, &cfg, &fb, &fv, &BatchLabels::identity(4)),
            Err(Error::ZeroNormRow { index: 1, .. })
        ));
    }

    #[test]
    fn total_loss_hand_cases() {
        let (_, cfg) = setup(0.2);
        assert_eq!(total_loss(&cfg, 1.0, 0.5).unwrap(), 1.1);

        let (_, cfg0) = setup(0.0);
        assert_eq!(total_loss(&cfg0, 0.9, 123.0).unwrap(), 0.9);
        assert_eq!(total_loss(&cfg0, 0.9, 0.0).unwrap(), 0.9);
        assert!(total_loss(&cfg0, f64::NAN, 0.0).is_err());
        assert!(total_loss(&cfg0, 0.5, -0.1).is_err());
    }

    #[test]
    fn balance_must_be_nonnegative() {
        let mut store = ParamStore::<f64>::new();
        assert!(init_loss(&mut store, -0.5, INIT_LOGIT_SCALE).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::numerics::{grad_check, DEFAULT_STEP};
        use crate::verify::StoreFn;

        let (store, cfg) = setup(0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fb = unit_rows(&mut rng, 3, 6);
        let fv = unit_rows(&mut rng, 3, 6);
        let la = unit_rows(&mut rng, 3, 5);
        let lb = unit_rows(&mut rng, 3, 5);

        let f = StoreFn::new(store, move |fwd| {
            let bn = fwd.leaf(fb.clone());
            let vn = fwd.leaf(fv.clone());
            let l_con = contrastive_node(fwd, &cfg, bn, vn);
            let lan = fwd.leaf(la.clone());
            let lbn = fwd.leaf(lb.clone());
            let align = crate::sla::align_loss_node(fwd, lan, lbn);
            Ok(total_node(fwd, &cfg, l_con, align))
        });
        let x0 = f.flat_params();
        let err = grad_check(&f, &x0, DEFAULT_STEP).unwrap();
        assert!(err < 1e-4, "objective gradient error {err}");
    }
}
