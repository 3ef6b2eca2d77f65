//! Language-anchored alignment. Fused features interact with an anchor
//! through per-sample outer products in a shared projected space; the
//! interaction matrices are compressed to a latent code, the brain and
//! vision codes are pulled together by a symmetric KL penalty, and a
//! prior-modulated sigmoid gate refines the decoded matrices before
//! row-mean pooling. The pooled vector is concatenated onto the base
//! feature to form the unified embedding.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Ffn, Linear};
use crate::numerics::{self, DenseArray, FloorMode, NodeId};
use crate::params::{Forward, ParamId, ParamStore};
use crate::scalar::Real;

/// Which feature anchors the vision-side interaction matrix.
/// ("paper" is accepted as an alias for the brain-anchored default.)
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VisionAnchor {
    /// Anchor on the brain feature (default).
    #[default]
    Brain,
    /// Anchor on the language feature instead.
    Language,
}

impl VisionAnchor {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" | "brain" => Ok(VisionAnchor::Brain),
            "language" => Ok(VisionAnchor::Language),
            other => Err(Error::Config(format!("unknown vision_anchor \"{other}\""))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VisionAnchor::Brain => "brain",
            VisionAnchor::Language => "language",
        }
    }
}

/// What the refinement gate multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateOperand {
    /// Gate the decoded latent matrix (default).
    #[default]
    Decoded,
    /// Gate the raw interaction matrix instead.
    Raw,
}

impl GateOperand {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "decoded" => Ok(GateOperand::Decoded),
            "raw" => Ok(GateOperand::Raw),
            other => Err(Error::Config(format!("unknown gate_operand \"{other}\""))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GateOperand::Decoded => "decoded",
            GateOperand::Raw => "raw",
        }
    }
}

/// Processing stage of an interaction matrix; transitions only move
/// raw -> latent -> refined-pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Per-sample outer products, `[B x K' x K']`.
    Raw,
    /// Latent codes, `[B x L_m]`.
    Latent,
    /// Gated, pooled rows, `[B x K']`.
    RefinedPooled,
}

/// Interaction matrix at a known stage.
#[derive(Debug, Clone)]
pub struct InteractionMatrix<T> {
    stage: Stage,
    values: DenseArray<T>,
}

impl<T: Real> InteractionMatrix<T> {
    pub fn raw(values: DenseArray<T>) -> Result<Self> {
        if values.rank() != 3 || values.dims()[1] != values.dims()[2] {
            return Err(Error::ShapeMismatch {
                context: "InteractionMatrix::raw",
                detail: format!("expected [B x K' x K'], got {:?}", values.dims()),
            });
        }
        values.validate_finite("InteractionMatrix")?;
        Ok(InteractionMatrix { stage: Stage::Raw, values })
    }

    pub fn latent(values: DenseArray<T>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::ShapeMismatch {
                context: "InteractionMatrix::latent",
                detail: format!("expected [B x L_m], got {:?}", values.dims()),
            });
        }
        values.validate_finite("InteractionMatrix")?;
        Ok(InteractionMatrix { stage: Stage::Latent, values })
    }

    fn refined(values: DenseArray<T>) -> Self {
        InteractionMatrix { stage: Stage::RefinedPooled, values }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn values(&self) -> &DenseArray<T> {
        &self.values
    }

    fn expect(&self, stage: Stage, context: &'static str) -> Result<&DenseArray<T>> {
        if self.stage == stage {
            Ok(&self.values)
        } else {
            Err(Error::Invalid(format!(
                "{context}: expected {stage:?} stage, got {:?}",
                self.stage
            )))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlaParams {
    /// Shared projection into the interaction space (no bias).
    pub phi: Linear,
    /// Latent encoder, flattened matrix -> code.
    pub latent_enc: Ffn,
    /// Latent decoder, code -> flattened matrix; final layer zero-init
    /// so the first refinement step is exactly the half-open gate.
    pub latent_dec: Ffn,
    pub prior_brain: ParamId,
    pub prior_vision: ParamId,
    pub k_prime: usize,
    pub latent_dim: usize,
}

pub fn init_sla<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    k: usize,
    k_prime: usize,
    latent_dim: usize,
) -> SlaParams {
    let kk = k_prime * k_prime;
    SlaParams {
        phi: Linear {
            w: store.add("sla.phi.w", crate::params::glorot::<T>(rng, k, k_prime)),
            b: None,
            in_dim: k,
            out_dim: k_prime,
        },
        latent_enc: Ffn::init::<T>(store, rng, "sla.enc", &[kk, latent_dim, latent_dim], false),
        latent_dec: Ffn::init::<T>(store, rng, "sla.dec", &[latent_dim, k_prime, kk], true),
        prior_brain: store.add("sla.prior_brain", DenseArray::zeros(&[k_prime, k_prime])),
        prior_vision: store.add("sla.prior_vision", DenseArray::zeros(&[k_prime, k_prime])),
        k_prime,
        latent_dim,
    }
}

// ── tape builders ──────────────────────────────────────────────────

/// Raw interaction: per sample, `phi(x) ⊗ phi(anchor)`.
pub fn interaction_node<T: Real>(
    p: &SlaParams,
    fwd: &mut Forward<T>,
    x: NodeId,
    anchor: NodeId,
) -> NodeId {
    let px = p.phi.forward(fwd, x);
    let pa = p.phi.forward(fwd, anchor);
    fwd.tape.batch_outer(px, pa)
}

/// Latent code of a raw interaction node.
pub fn latent_node<T: Real>(p: &SlaParams, fwd: &mut Forward<T>, raw: NodeId) -> NodeId {
    let dims = fwd.tape.dims(raw).to_vec();
    let flat = fwd.tape.reshape(raw, &[dims[0], dims[1] * dims[2]]);
    p.latent_enc.forward(fwd, flat)
}

/// Symmetric KL between row-softmaxed latent codes.
pub fn align_loss_node<T: Real>(fwd: &mut Forward<T>, mb: NodeId, mv: NodeId) -> NodeId {
    let pb = fwd.tape.softmax_last(mb);
    let pv = fwd.tape.softmax_last(mv);
    fwd.tape.sym_kl_rows(pb, pv)
}

/// Decode, gate against the prior, pool rows: `[B x L_m] -> [B x K']`.
pub fn refine_node<T: Real>(
    p: &SlaParams,
    fwd: &mut Forward<T>,
    latent: NodeId,
    prior: ParamId,
    operand: GateOperand,
    raw: Option<NodeId>,
) -> NodeId {
    let b = fwd.tape.dims(latent)[0];
    let kk = p.k_prime;
    let dec_flat = p.latent_dec.forward(fwd, latent);
    let decoded = fwd.tape.reshape(dec_flat, &[b, kk, kk]);
    let prior = fwd.p(prior);
    let gate_arg = fwd.tape.add_broadcast(decoded, prior);
    let gate = fwd.tape.sigmoid(gate_arg);
    let base = match operand {
        GateOperand::Decoded => decoded,
        GateOperand::Raw => raw.expect("raw gate operand requires the raw interaction node"),
    };
    let gated = fwd.tape.mul(base, gate);
    fwd.tape.mean_last(gated)
}

/// Base feature first, pooled interaction second.
pub fn assemble_node<T: Real>(fwd: &mut Forward<T>, base: NodeId, pooled: NodeId) -> NodeId {
    fwd.tape.concat_cols(base, pooled)
}

// ── eager operations ───────────────────────────────────────────────

/// Per-sample interaction matrices `phi(x_i) ⊗ phi(anchor_i)`.
pub fn interaction<T: Real>(
    p: &SlaParams,
    store: &ParamStore<T>,
    x: &DenseArray<T>,
    anchor: &DenseArray<T>,
) -> Result<InteractionMatrix<T>> {
    if x.rank() != 2 || x.dims() != anchor.dims() || x.cols() != p.phi.in_dim {
        return Err(Error::ShapeMismatch {
            context: "sla::interaction",
            detail: format!(
                "expected matching [B x {}], got {:?} and {:?}",
                p.phi.in_dim,
                x.dims(),
                anchor.dims()
            ),
        });
    }
    let mut fwd = Forward::new(store);
    let xn = fwd.leaf(x.clone());
    let an = fwd.leaf(anchor.clone());
    let m = interaction_node(p, &mut fwd, xn, an);
    InteractionMatrix::raw(fwd.tape.val(m).clone())
}

/// Compress a raw interaction matrix into the latent space.
pub fn latent_encode<T: Real>(
    p: &SlaParams,
    store: &ParamStore<T>,
    m: &InteractionMatrix<T>,
) -> Result<InteractionMatrix<T>> {
    let raw = m.expect(Stage::Raw, "latent_encode")?;
    let mut fwd = Forward::new(store);
    let node = fwd.leaf(raw.clone());
    let latent = latent_node(p, &mut fwd, node);
    InteractionMatrix::latent(fwd.tape.val(latent).clone())
}

/// Alignment loss between two latent codes: row softmax, then mean
/// symmetric KL. Zero iff the softmaxed rows coincide.
pub fn align_loss<T: Real>(mb: &InteractionMatrix<T>, mv: &InteractionMatrix<T>) -> Result<T> {
    let b = mb.expect(Stage::Latent, "align_loss")?;
    let v = mv.expect(Stage::Latent, "align_loss")?;
    let pb = numerics::row_softmax(b)?;
    let pv = numerics::row_softmax(v)?;
    numerics::symmetric_kl(&pb, &pv, FloorMode::Clamp)
}

/// Refinement of a latent code against one prior matrix.
pub fn refine<T: Real>(
    p: &SlaParams,
    store: &ParamStore<T>,
    m: &InteractionMatrix<T>,
    prior: ParamId,
    operand: GateOperand,
    raw: Option<&InteractionMatrix<T>>,
) -> Result<InteractionMatrix<T>> {
    let latent = m.expect(Stage::Latent, "refine")?;
    if store.get(prior).dims() != [p.k_prime, p.k_prime] {
        return Err(Error::ShapeMismatch {
            context: "sla::refine",
            detail: format!("prior {:?}, expected [{0} x {0}]", p.k_prime),
        });
    }
    let mut fwd = Forward::new(store);
    let node = fwd.leaf(latent.clone());
    let raw_node = match (operand, raw) {
        (GateOperand::Raw, Some(r)) => Some(fwd.leaf(r.expect(Stage::Raw, "refine")?.clone())),
        (GateOperand::Raw, None) => {
            return Err(Error::Invalid(
                "gate_operand = raw requires the raw interaction matrix".into(),
            ))
        }
        _ => None,
    };
    let out = refine_node(p, &mut fwd, node, prior, operand, raw_node);
    Ok(InteractionMatrix::refined(fwd.tape.val(out).clone()))
}

/// Unified embedding half: base feature with the pooled matrix appended.
pub fn assemble<T: Real>(
    base: &DenseArray<T>,
    pooled: &InteractionMatrix<T>,
) -> Result<DenseArray<T>> {
    let m = pooled.expect(Stage::RefinedPooled, "assemble")?;
    if base.rank() != 2 || base.rows() != m.rows() {
        return Err(Error::ShapeMismatch {
            context: "sla::assemble",
            detail: format!("base {:?} vs pooled {:?}", base.dims(), m.dims()),
        });
    }
    let (r, ca, cb) = (base.rows(), base.cols(), m.cols());
    let mut out = Vec::with_capacity(r * (ca + cb));
    for i in 0..r {
        out.extend_from_slice(base.row(i));
        out.extend_from_slice(m.row(i));
    }
    DenseArray::from_vec(&[r, ca + cb], out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::params::identity_matrix;

    fn identity_sla(store: &mut ParamStore<f64>, k: usize, latent_dim: usize) -> SlaParams {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = init_sla(store, &mut rng, k, k, latent_dim);
        let phi_w = p.phi.w;
        store.set_value(phi_w, identity_matrix::<f64>(k));
        p.phi = Linear { w: phi_w, b: None, in_dim: k, out_dim: k };
        p
    }

    #[test]
    fn interaction_hand_cases() {
        let mut store = ParamStore::new();
        let p = identity_sla(&mut store, 2, 3);

        let x = DenseArray::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let a = DenseArray::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
        let m = interaction(&p, &store, &x, &a).unwrap();
        assert_eq!(m.values().data(), &[0.0, 1.0, 0.0, 0.0]);

        let zero = DenseArray::zeros(&[1, 2]);
        let m = interaction(&p, &store, &x, &zero).unwrap();
        assert_eq!(m.values().data(), &[0.0; 4]);

        let x = DenseArray::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let a = DenseArray::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let m = interaction(&p, &store, &x, &a).unwrap();
        assert_eq!(m.values().data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn latent_encode_respects_stage_and_shape() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = init_sla(&mut store, &mut rng, 3, 3, 4);
        let raw = InteractionMatrix::raw(DenseArray::zeros(&[2, 3, 3])).unwrap();
        let latent = latent_encode(&p, &store, &raw).unwrap();
        assert_eq!(latent.stage(), Stage::Latent);
        assert_eq!(latent.values().dims(), &[2, 4]);

        // stage violation
        assert!(latent_encode(&p, &store, &latent).is_err());
    }

    #[test]
    fn zero_bias_encoder_maps_zero_to_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = init_sla(&mut store, &mut rng, 3, 3, 4);
        // an encoder with zero biases keeps the zero matrix at zero
        let mut zero_rng = ChaCha8Rng::seed_from_u64(4);
        p.latent_enc = Ffn::init(&mut store, &mut zero_rng, "sla_zb.enc", &[9, 4, 4], false);
        for layer in &p.latent_enc.layers {
            if let Some(b) = layer.b {
                let dims = store.get(b).dims().to_vec();
                store.set_value(b, DenseArray::zeros(&dims));
            }
        }
        let raw = InteractionMatrix::raw(DenseArray::zeros(&[1, 3, 3])).unwrap();
        let latent = latent_encode(&p, &store, &raw).unwrap();
        assert_eq!(latent.values().data(), &[0.0; 4]);
    }

    #[test]
    fn align_loss_identity_and_hand_value() {
        let m = InteractionMatrix::latent(
            DenseArray::from_vec(&[2, 3], vec![0.3, -0.1, 0.9, 0.0, 0.0, 0.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(align_loss(&m, &m).unwrap(), 0.0);

        // rows softmax to [0.75, 0.25] vs [0.25, 0.75]
        let a = InteractionMatrix::latent(
            DenseArray::from_vec(&[1, 2], vec![3.0f64.ln(), 0.0]).unwrap(),
        )
        .unwrap();
        let b = InteractionMatrix::latent(
            DenseArray::from_vec(&[1, 2], vec![0.0, 3.0f64.ln()]).unwrap(),
        )
        .unwrap();
        let v = align_loss(&a, &b).unwrap();
        assert!((v - 3.0f64.ln()).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn align_loss_nonnegative_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let ma = InteractionMatrix::latent(DenseArray::from_vec(&[2, 4], a.clone()).unwrap()).unwrap();
            let mb = InteractionMatrix::latent(DenseArray::from_vec(&[2, 4], b.clone()).unwrap()).unwrap();
            let v = align_loss(&ma, &mb).unwrap();
            assert!(v >= 0.0);

            // identical permutation of latent coordinates on both sides
            let perm = [2usize, 0, 3, 1];
            let pa: Vec<f64> = (0..2).flat_map(|r| perm.iter().map(|&c| a[r * 4 + c]).collect::<Vec<_>>()).collect();
            let pb: Vec<f64> = (0..2).flat_map(|r| perm.iter().map(|&c| b[r * 4 + c]).collect::<Vec<_>>()).collect();
            let mpa = InteractionMatrix::latent(DenseArray::from_vec(&[2, 4], pa).unwrap()).unwrap();
            let mpb = InteractionMatrix::latent(DenseArray::from_vec(&[2, 4], pb).unwrap()).unwrap();
            let vp = align_loss(&mpa, &mpb).unwrap();
            assert!((v - vp).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_cold_start_is_half_gate() {
        // zero priors + zero-init decoder final layer: gate = 0.5
        // everywhere and the decoded base is zero, so the pooled output
        // is exactly 0.5 * rowmean(0) = 0
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = init_sla(&mut store, &mut rng, 3, 3, 4);
        let latent = InteractionMatrix::latent(DenseArray::filled(&[2, 4], 0.3)).unwrap();
        let out = refine(&p, &store, &latent, p.prior_brain, GateOperand::Decoded, None).unwrap();
        assert_eq!(out.values().data(), &[0.0; 6]);

        // and in raw mode the same gate halves the raw matrix row-means
        let raw_vals = DenseArray::from_vec(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let raw = InteractionMatrix::raw(raw_vals).unwrap();
        let latent1 = InteractionMatrix::latent(DenseArray::filled(&[1, 4], 0.3)).unwrap();
        let out = refine(&p, &store, &latent1, p.prior_vision, GateOperand::Raw, Some(&raw)).unwrap();
        // rows of raw: mean([1,2,3]) = 2, mean([4,5,6]) = 5, mean([7,8,9]) = 8; halved
        assert_eq!(out.values().data(), &[1.0, 2.5, 4.0]);
    }

    #[test]
    fn saturated_prior_opens_the_gate() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = init_sla(&mut store, &mut rng, 3, 3, 4);
        store.set_value(p.prior_vision, DenseArray::filled(&[3, 3], 1e4));
        let raw_vals = DenseArray::from_vec(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let raw = InteractionMatrix::raw(raw_vals).unwrap();
        let latent = InteractionMatrix::latent(DenseArray::filled(&[1, 4], 0.3)).unwrap();
        let out = refine(&p, &store, &latent, p.prior_vision, GateOperand::Raw, Some(&raw)).unwrap();
        for (got, want) in out.values().data().iter().zip([2.0, 5.0, 8.0]) {
            assert!((got - want).abs() < 1e-9, "gate not saturated: {got} vs {want}");
        }
    }

    #[test]
    fn gates_stay_inside_unit_interval() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = init_sla(&mut store, &mut rng, 4, 4, 5);
        let mut drng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let latent: Vec<f64> = (0..2 * 5).map(|_| drng.random_range(-3.0..3.0)).collect();
            let latent = fwd_gate_values(&store, &p, latent);
            assert!(latent.iter().all(|&g| g > 0.0 && g < 1.0));
        }
    }

    fn fwd_gate_values(store: &ParamStore<f64>, p: &SlaParams, latent: Vec<f64>) -> Vec<f64> {
        let mut fwd = Forward::new(store);
        let node = fwd.leaf(DenseArray::from_vec(&[2, 5], latent).unwrap());
        let dec_flat = p.latent_dec.forward(&mut fwd, node);
        let decoded = fwd.tape.reshape(dec_flat, &[2, 4, 4]);
        let prior = fwd.p(p.prior_brain);
        let arg = fwd.tape.add_broadcast(decoded, prior);
        let gate = fwd.tape.sigmoid(arg);
        fwd.tape.val(gate).data().to_vec()
    }

    #[test]
    fn refine_hand_case_pool_of_half_base() {
        // directly verify pool(0.5 * base) for base [[1,2],[3,4]]
        let store = ParamStore::<f64>::new();
        let mut fwd = Forward::new(&store);
        let base = fwd.leaf(DenseArray::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gate = fwd.leaf(DenseArray::filled(&[1, 2, 2], 0.5));
        let gated = fwd.tape.mul(base, gate);
        let pooled = fwd.tape.mean_last(gated);
        assert_eq!(fwd.tape.val(pooled).data(), &[0.75, 1.75]);
    }

    #[test]
    fn assemble_concatenates_base_first() {
        let base = DenseArray::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let pooled = InteractionMatrix::refined(DenseArray::from_vec(&[1, 1], vec![3.0]).unwrap());
        let out = assemble(&base, &pooled).unwrap();
        assert_eq!(out.dims(), &[1, 3]);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);

        let bad = InteractionMatrix::refined(DenseArray::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap());
        assert!(assemble(&base, &bad).is_err());
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        use crate::numerics::{grad_check, DEFAULT_STEP};
        use crate::verify::StoreFn;

        let (b, k, k_prime, latent_dim) = (2, 4, 3, 5);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = init_sla(&mut store, &mut rng, k, k_prime, latent_dim);
        // non-zero decoder so the refinement path has signal
        for layer in &p.latent_dec.layers {
            let dims = store.get(layer.w).dims().to_vec();
            store.set_value(layer.w, crate::params::glorot::<f64>(&mut rng, dims[0], dims[1]));
        }
        let mut drng = ChaCha8Rng::seed_from_u64(11);
        let mk = |rng: &mut ChaCha8Rng| -> DenseArray<f64> {
            let data: Vec<f64> = (0..b * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            DenseArray::from_vec(&[b, k], data).unwrap()
        };
        let (bfeat, vfeat, tfeat) = (mk(&mut drng), mk(&mut drng), mk(&mut drng));

        let f = StoreFn::new(store, move |fwd| {
            let bn = fwd.leaf(bfeat.clone());
            let vn = fwd.leaf(vfeat.clone());
            let tn = fwd.leaf(tfeat.clone());
            let m_b = interaction_node(&p, fwd, bn, tn);
            let m_v = interaction_node(&p, fwd, vn, bn);
            let lat_b = latent_node(&p, fwd, m_b);
            let lat_v = latent_node(&p, fwd, m_v);
            let align = align_loss_node(fwd, lat_b, lat_v);
            let ref_b = refine_node(&p, fwd, lat_b, p.prior_brain, GateOperand::Decoded, None);
            let ref_v = refine_node(&p, fwd, lat_v, p.prior_vision, GateOperand::Decoded, None);
            let f_b = assemble_node(fwd, bn, ref_b);
            let f_v = assemble_node(fwd, vn, ref_v);
            let cat = fwd.tape.concat_cols(f_b, f_v);
            let sq = fwd.tape.mul(cat, cat);
            let s = fwd.tape.sum_all(sq);
            Ok(fwd.tape.add(s, align))
        });
        let x0 = f.flat_params();
        let err = grad_check(&f, &x0, DEFAULT_STEP).unwrap();
        assert!(err < 1e-4, "SLA gradient error {err}");
    }
}
