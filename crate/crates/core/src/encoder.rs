//! Brain encoder: inverted tokenization, where each channel's whole
//! time series is one token. A shared temporal projection embeds every
//! channel, pre-norm self-attention mixes channels, and a mean over
//! channel tokens feeds the output head. `T = 1` inputs (static,
//! fMRI-style) degenerate to a per-channel scalar embedding and share
//! the same code path.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, NodeId};
use crate::nn::Linear;
use crate::params::{Forward, ParamId, ParamStore};
use crate::scalar::{real, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub channels: usize,
    pub timesteps: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Output feature dimension K.
    pub out_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if [self.channels, self.timesteps, self.d_model, self.n_heads, self.n_layers, self.d_ff, self.out_dim]
            .contains(&0)
        {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct AttnLayer {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    embed: Linear,
    layers: Vec<AttnLayer>,
    head: Linear,
}

pub fn init_encoder<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    cfg: EncoderConfig,
) -> Result<EncoderParams> {
    cfg.validate()?;
    let d = cfg.d_model;
    let embed = Linear::init::<T>(store, rng, "encoder.embed", cfg.timesteps, d, true);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = format!("encoder.layer{l}");
        layers.push(AttnLayer {
            ln1_gain: store.add(format!("{p}.ln1.gain"), DenseArray::filled(&[d], T::one())),
            ln1_bias: store.add(format!("{p}.ln1.bias"), DenseArray::zeros(&[d])),
            wq: Linear::init::<T>(store, rng, &format!("{p}.wq"), d, d, true),
            wk: Linear::init::<T>(store, rng, &format!("{p}.wk"), d, d, true),
            wv: Linear::init::<T>(store, rng, &format!("{p}.wv"), d, d, true),
            wo: Linear::init::<T>(store, rng, &format!("{p}.wo"), d, d, true),
            ln2_gain: store.add(format!("{p}.ln2.gain"), DenseArray::filled(&[d], T::one())),
            ln2_bias: store.add(format!("{p}.ln2.bias"), DenseArray::zeros(&[d])),
            ff1: Linear::init::<T>(store, rng, &format!("{p}.ff1"), d, cfg.d_ff, true),
            ff2: Linear::init::<T>(store, rng, &format!("{p}.ff2"), cfg.d_ff, d, true),
        });
    }
    let head = Linear::init::<T>(store, rng, "encoder.head", d, cfg.out_dim, true);
    Ok(EncoderParams { cfg, embed, layers, head })
}

/// Tape forward over a `[B x C x T]` batch, producing `[B x K]`.
pub fn forward<T: Real>(p: &EncoderParams, fwd: &mut Forward<T>, x: NodeId) -> NodeId {
    let dims = fwd.tape.dims(x).to_vec();
    assert_eq!(dims.len(), 3, "encoder input must be [B, C, T]");
    let (b, c, t) = (dims[0], dims[1], dims[2]);
    assert_eq!(c, p.cfg.channels, "encoder channel count");
    assert_eq!(t, p.cfg.timesteps, "encoder timestep count");
    let d = p.cfg.d_model;
    let heads = p.cfg.n_heads;
    let hd = d / heads;
    let scale = real::<T>(1.0 / (hd as f64).sqrt());

    // every channel token embeds its own time series
    let flat = fwd.tape.reshape(x, &[b * c, t]);
    let mut h = p.embed.forward(fwd, flat); // [(B*C) x d]

    for layer in &p.layers {
        let g1 = fwd.p(layer.ln1_gain);
        let b1 = fwd.p(layer.ln1_bias);
        let normed = fwd.tape.layer_norm(h, g1, b1);
        let q = layer.wq.forward(fwd, normed);
        let k = layer.wk.forward(fwd, normed);
        let v = layer.wv.forward(fwd, normed);
        let qh = fwd.tape.split_heads(q, b, c, heads, hd);
        let kh = fwd.tape.split_heads(k, b, c, heads, hd);
        let vh = fwd.tape.split_heads(v, b, c, heads, hd);
        let scores = fwd.tape.batch_matmul(qh, kh, true);
        let scaled = fwd.tape.scalar_affine(scores, scale, T::zero());
        let attn = fwd.tape.softmax_last(scaled);
        let ctx = fwd.tape.batch_matmul(attn, vh, false);
        let merged = fwd.tape.merge_heads(ctx, b, c, heads, hd);
        let proj = layer.wo.forward(fwd, merged);
        h = fwd.tape.add(h, proj);

        let g2 = fwd.p(layer.ln2_gain);
        let b2 = fwd.p(layer.ln2_bias);
        let normed2 = fwd.tape.layer_norm(h, g2, b2);
        let ff = layer.ff1.forward(fwd, normed2);
        let ff = fwd.tape.silu(ff);
        let ff = layer.ff2.forward(fwd, ff);
        h = fwd.tape.add(h, ff);
    }

    let tokens = fwd.tape.reshape(h, &[b, c, d]);
    let pooled = fwd.tape.mean_mid(tokens); // [B x d]
    p.head.forward(fwd, pooled) // [B x K]
}

/// Encode a batch without keeping the tape.
pub fn encode_brain<T: Real>(
    p: &EncoderParams,
    store: &ParamStore<T>,
    batch: &DenseArray<T>,
) -> Result<DenseArray<T>> {
    if batch.rank() != 3 || batch.dims()[1] != p.cfg.channels || batch.dims()[2] != p.cfg.timesteps {
        return Err(Error::ShapeMismatch {
            context: "encode_brain",
            detail: format!(
                "expected [B x {} x {}], got {:?}",
                p.cfg.channels,
                p.cfg.timesteps,
                batch.dims()
            ),
        });
    }
    batch.validate_finite("encode_brain input")?;
    let mut fwd = Forward::new(store);
    let x = fwd.leaf(batch.clone());
    let out = forward(p, &mut fwd, x);
    let result = fwd.tape.val(out).clone();
    result.validate_finite("encode_brain output")?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            channels: 3,
            timesteps: 5,
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            d_ff: 6,
            out_dim: 4,
        }
    }

    fn build(seed: u64, cfg: EncoderConfig) -> (ParamStore<f64>, EncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = init_encoder(&mut store, &mut rng, cfg).unwrap();
        (store, p)
    }

    #[test]
    fn output_shape_contract() {
        let (store, p) = build(3, tiny_cfg());
        let batch = DenseArray::filled(&[7, 3, 5], 0.25);
        let out = encode_brain(&p, &store, &batch).unwrap();
        assert_eq!(out.dims(), &[7, 4]);
    }

    #[test]
    fn zero_input_with_zero_head_gives_zero_output() {
        let (mut store, p) = build(4, tiny_cfg());
        // zero the output head; attention over all-zero tokens stays zero-valued
        // on the value path, so the head bias (zero) is the whole output
        let w = store.find("encoder.head.w").unwrap();
        store.set_value(w, DenseArray::zeros(&[4, 4]));
        let batch = DenseArray::zeros(&[2, 3, 5]);
        let out = encode_brain(&p, &store, &batch).unwrap();
        assert_eq!(out.data(), &[0.0; 8]);
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let (store, p) = build(5, tiny_cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let data: Vec<f64> = (0..4 * 3 * 5).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let batch = DenseArray::from_vec(&[4, 3, 5], data).unwrap();
        let out = encode_brain(&p, &store, &batch).unwrap();

        let perm = [2usize, 0, 3, 1];
        let permuted = batch.gather_axis0(&perm);
        let out_p = encode_brain(&p, &store, &permuted).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(out_p.row(dst), out.row(src), "row {dst} after permutation");
        }
    }

    #[test]
    fn single_timestep_inputs_accepted() {
        let mut cfg = tiny_cfg();
        cfg.timesteps = 1;
        let (store, p) = build(6, cfg);
        let batch = DenseArray::filled(&[2, 3, 1], 0.5);
        let out = encode_brain(&p, &store, &batch).unwrap();
        assert_eq!(out.dims(), &[2, 4]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (store, p) = build(7, tiny_cfg());
        let batch = DenseArray::filled(&[2, 3, 9], 0.5);
        assert!(encode_brain(&p, &store, &batch).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::numerics::{grad_check, DEFAULT_STEP};
        use crate::verify::StoreFn;

        let (store, p) = build(8, tiny_cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let data: Vec<f64> = (0..2 * 3 * 5).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let batch = DenseArray::from_vec(&[2, 3, 5], data).unwrap();

        let f = StoreFn::new(store, move |fwd| {
            let x = fwd.leaf(batch.clone());
            let out = forward(&p, fwd, x);
            let sq = fwd.tape.mul(out, out);
            Ok(fwd.tape.sum_all(sq))
        });
        let x0 = f.flat_params();
        let err = grad_check(&f, &x0, DEFAULT_STEP).unwrap();
        assert!(err < 1e-4, "encoder gradient error {err}");
    }
}
