//! Small trainable blocks reused across modules.

use rand_chacha::ChaCha8Rng;

use crate::numerics::NodeId;
use crate::params::{glorot, identity_matrix, Forward, ParamId, ParamStore};
use crate::scalar::Real;
use crate::DenseArray;

/// Dense layer `y = x W (+ b)` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot::<T>(rng, in_dim, out_dim));
        let b = bias.then(|| store.add(format!("{name}.b"), DenseArray::zeros(&[out_dim])));
        Linear { w, b, in_dim, out_dim }
    }

    /// All-zero weights and bias (used for cold-start decoders).
    pub fn init_zero<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), DenseArray::zeros(&[in_dim, out_dim]));
        let b = Some(store.add(format!("{name}.b"), DenseArray::zeros(&[out_dim])));
        Linear { w, b, in_dim, out_dim }
    }

    /// Square map starting as the identity (plus zero bias).
    pub fn init_identity<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let w = store.add(format!("{name}.w"), identity_matrix::<T>(dim));
        let b = Some(store.add(format!("{name}.b"), DenseArray::zeros(&[dim])));
        Linear { w, b, in_dim: dim, out_dim: dim }
    }

    pub fn forward<T: Real>(&self, fwd: &mut Forward<T>, x: NodeId) -> NodeId {
        let w = fwd.p(self.w);
        let y = fwd.tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = fwd.p(b);
                fwd.tape.add_broadcast(y, b)
            }
            None => y,
        }
    }
}

/// Feed-forward stack with SiLU between consecutive layers. `dims` lists
/// the layer widths, e.g. `[k, k, k]` is one hidden layer of width `k`.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub layers: Vec<Linear>,
}

impl Ffn {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: &[usize],
        zero_last: bool,
    ) -> Self {
        assert!(dims.len() >= 2, "Ffn needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let lname = format!("{name}.{i}");
                if zero_last && i == dims.len() - 2 {
                    Linear::init_zero::<T>(store, &lname, w[0], w[1])
                } else {
                    Linear::init::<T>(store, rng, &lname, w[0], w[1], true)
                }
            })
            .collect();
        Ffn { layers }
    }

    /// Single dense layer (identity-initializable), used by tests that
    /// need an invertible evidence head.
    pub fn single(layer: Linear) -> Self {
        Ffn { layers: vec![layer] }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().unwrap().in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward<T: Real>(&self, fwd: &mut Forward<T>, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = fwd.tape.silu(h);
            }
            h = layer.forward(fwd, h);
        }
        h
    }
}
