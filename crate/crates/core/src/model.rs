//! The assembled model: brain encoder, per-modality uncertainty
//! weighting, language-anchored alignment, and the contrastive head.
//!
//! Parameter names are stable and prefix-grouped (`encoder.`, `sup_vis.`,
//! `sup_txt.`, `sla.`, `loss.`, `adapter.`), which is what checkpoint
//! manifests and the fine-tuning freeze rely on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Embedding};
use crate::encoder::{self, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numerics::{DenseArray, NodeId};
use crate::objective::{self, LossConfig};
use crate::params::{Forward, ParamId, ParamStore};
use crate::scalar::Real;
use crate::sla::{self, GateOperand, SlaParams, VisionAnchor};
use crate::sup::{self, SupParams};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub timesteps: usize,
    /// Semantic dimension K (stack channels and encoder output).
    pub k: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Interaction space side K'.
    pub k_prime: usize,
    /// Latent code width L_m.
    pub latent_dim: usize,
    pub vision_anchor: VisionAnchor,
    pub gate_operand: GateOperand,
    pub balance: f64,
    pub init_logit_scale: f64,
}

impl ModelConfig {
    /// Desk-scale defaults for a given input geometry.
    pub fn defaults(channels: usize, timesteps: usize, k: usize) -> Self {
        ModelConfig {
            channels,
            timesteps,
            k,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            k_prime: k,
            latent_dim: k,
            vision_anchor: VisionAnchor::default(),
            gate_operand: GateOperand::default(),
            balance: 1.0,
            init_logit_scale: objective::INIT_LOGIT_SCALE,
        }
    }

    fn encoder_cfg(&self) -> EncoderConfig {
        EncoderConfig {
            channels: self.channels,
            timesteps: self.timesteps,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            out_dim: self.k,
        }
    }
}

/// Gated input adapter trained when a new modality is added: the
/// encoder consumes `g * map(x) + (1 - g) * x` with `g = sigmoid(theta)`.
#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub map: Linear,
    pub gate_theta: ParamId,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: EncoderParams,
    pub sup_vis: SupParams,
    pub sup_txt: SupParams,
    pub sla: SlaParams,
    pub loss: LossConfig,
    pub adapter: Option<AdapterParams>,
}

/// Loss and embedding nodes of one forward pass.
pub struct BatchNodes {
    pub brain_feat: NodeId,
    pub vis_feat: NodeId,
    pub txt_feat: NodeId,
    pub align_loss: NodeId,
    pub contrastive: NodeId,
    pub total: NodeId,
    pub f_brain: NodeId,
    pub f_vis: NodeId,
}

impl<T: Real> Model<T> {
    /// Deterministic initialization; the same seed yields bit-identical
    /// parameters for every scalar type.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = encoder::init_encoder::<T>(&mut store, &mut rng, cfg.encoder_cfg())?;
        let sup_vis = sup::init_sup::<T>(&mut store, &mut rng, "sup_vis", cfg.k);
        let sup_txt = sup::init_sup::<T>(&mut store, &mut rng, "sup_txt", cfg.k);
        let sla = sla::init_sla::<T>(&mut store, &mut rng, cfg.k, cfg.k_prime, cfg.latent_dim);
        let loss = objective::init_loss::<T>(&mut store, cfg.balance, cfg.init_logit_scale)?;
        Ok(Model {
            cfg,
            store,
            encoder,
            sup_vis,
            sup_txt,
            sla,
            loss,
            adapter: None,
        })
    }

    /// Install the fine-tuning adapter (identity map, half-open gate).
    pub fn add_adapter(&mut self) {
        assert!(self.adapter.is_none(), "adapter already installed");
        let dim = self.cfg.channels * self.cfg.timesteps;
        let map = Linear::init_identity::<T>(&mut self.store, "adapter.map", dim);
        let gate_theta = self.store.add("adapter.gate_theta", DenseArray::scalar(T::zero()));
        self.adapter = Some(AdapterParams { map, gate_theta });
    }

    /// Encoder input after the optional gated adapter.
    fn adapted_input(&self, fwd: &mut Forward<T>, x: NodeId) -> NodeId {
        let Some(adapter) = &self.adapter else {
            return x;
        };
        let dims = fwd.tape.dims(x).to_vec();
        let (b, c, t) = (dims[0], dims[1], dims[2]);
        let flat = fwd.tape.reshape(x, &[b, c * t]);
        let mapped = adapter.map.forward(fwd, flat);
        let theta = fwd.p(adapter.gate_theta);
        let g = fwd.tape.sigmoid(theta);
        let one_minus_g = fwd.tape.scalar_affine(g, -T::one(), T::one());
        let gated_new = fwd.tape.mul_scalar_node(mapped, g);
        let gated_old = fwd.tape.mul_scalar_node(flat, one_minus_g);
        let blended = fwd.tape.add(gated_new, gated_old);
        fwd.tape.reshape(blended, &[b, c, t])
    }

    /// Record the full training graph for one batch.
    ///
    /// `brain` is `[B x C x T]`, `vis` `[B x 5 x K]`, `txt` `[B x 4 x K]`.
    pub fn forward_batch(
        &self,
        fwd: &mut Forward<T>,
        brain: &DenseArray<T>,
        vis: &DenseArray<T>,
        txt: &DenseArray<T>,
    ) -> Result<BatchNodes> {
        if brain.rank() != 3 || vis.rank() != 3 || txt.rank() != 3 {
            return Err(Error::ShapeMismatch {
                context: "forward_batch",
                detail: "all inputs must be rank 3 batches".into(),
            });
        }
        let b = brain.dims()[0];
        if vis.dims() != [b, 5, self.cfg.k] || txt.dims() != [b, 4, self.cfg.k] {
            return Err(Error::ShapeMismatch {
                context: "forward_batch",
                detail: format!(
                    "stacks {:?} / {:?} for batch {b} and k {}",
                    vis.dims(),
                    txt.dims(),
                    self.cfg.k
                ),
            });
        }

        let x = fwd.leaf(brain.clone());
        let x = self.adapted_input(fwd, x);
        let brain_feat = encoder::forward(&self.encoder, fwd, x);

        let vis_node = fwd.leaf(vis.clone());
        let txt_node = fwd.leaf(txt.clone());
        let vis_feat = sup::forward(&self.sup_vis, fwd, vis_node).fused;
        let txt_feat = sup::forward(&self.sup_txt, fwd, txt_node).fused;

        let m_brain = sla::interaction_node(&self.sla, fwd, brain_feat, txt_feat);
        let vis_anchor = match self.cfg.vision_anchor {
            VisionAnchor::Brain => brain_feat,
            VisionAnchor::Language => txt_feat,
        };
        let m_vis = sla::interaction_node(&self.sla, fwd, vis_feat, vis_anchor);

        let lat_brain = sla::latent_node(&self.sla, fwd, m_brain);
        let lat_vis = sla::latent_node(&self.sla, fwd, m_vis);
        let align_loss = sla::align_loss_node(fwd, lat_brain, lat_vis);

        let raw_b = matches!(self.cfg.gate_operand, GateOperand::Raw).then_some(m_brain);
        let raw_v = matches!(self.cfg.gate_operand, GateOperand::Raw).then_some(m_vis);
        let pooled_brain = sla::refine_node(
            &self.sla,
            fwd,
            lat_brain,
            self.sla.prior_brain,
            self.cfg.gate_operand,
            raw_b,
        );
        let pooled_vis = sla::refine_node(
            &self.sla,
            fwd,
            lat_vis,
            self.sla.prior_vision,
            self.cfg.gate_operand,
            raw_v,
        );

        let f_brain = sla::assemble_node(fwd, brain_feat, pooled_brain);
        let f_vis = sla::assemble_node(fwd, vis_feat, pooled_vis);

        let contrastive = objective::contrastive_node(fwd, &self.loss, f_brain, f_vis);
        let total = objective::total_node(fwd, &self.loss, contrastive, align_loss);

        Ok(BatchNodes {
            brain_feat,
            vis_feat,
            txt_feat,
            align_loss,
            contrastive,
            total,
            f_brain,
            f_vis,
        })
    }

    /// Unified embeddings `(F_brain, F_vis)` for a whole dataset,
    /// processed in fixed-size chunks.
    pub fn embed_dataset(&self, ds: &Dataset<T>) -> Result<(Embedding<T>, Embedding<T>)> {
        ds.validate()?;
        let n = ds.n_samples();
        let f_dim = self.cfg.k + self.cfg.k_prime;
        let mut f_brain = Vec::with_capacity(n * f_dim);
        let mut f_vis = Vec::with_capacity(n * f_dim);
        let chunk = 128usize;
        let mut lo = 0;
        while lo < n {
            let hi = (lo + chunk).min(n);
            let idx: Vec<usize> = (lo..hi).collect();
            let brain = ds.brain.gather(&idx);
            let vis = ds.vision.gather(&idx);
            let txt = ds.text.gather(&idx);
            let mut fwd = Forward::new(&self.store);
            let nodes = self.forward_batch(&mut fwd, &brain, &vis, &txt)?;
            f_brain.extend_from_slice(fwd.tape.val(nodes.f_brain).data());
            f_vis.extend_from_slice(fwd.tape.val(nodes.f_vis).data());
            lo = hi;
        }
        let fb = Embedding::new(DenseArray::from_vec(&[n, f_dim], f_brain)?)?;
        let fv = Embedding::new(DenseArray::from_vec(&[n, f_dim], f_vis)?)?;
        Ok((fb, fv))
    }

    /// Names of parameter groups frozen during fine-tuning.
    pub fn frozen_prefixes() -> &'static [&'static str] {
        &["sup_vis.", "sup_txt.", "sla."]
    }
}
