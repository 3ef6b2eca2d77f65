//! Verification harnesses: whole-module gradient checks against the
//! finite-difference oracle, and the fast invariant suite behind the
//! `selftest` command.

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, NodeId, ScalarFn};
use crate::params::{Forward, ParamStore};

/// [`ScalarFn`] over every parameter of a store at once: the probe
/// vector is the concatenation of all parameter values in registration
/// order, and the graph is rebuilt per evaluation.
pub struct StoreFn<F>
where
    F: Fn(&mut Forward<f64>) -> Result<NodeId>,
{
    store: ParamStore<f64>,
    build: F,
}

impl<F> StoreFn<F>
where
    F: Fn(&mut Forward<f64>) -> Result<NodeId>,
{
    pub fn new(store: ParamStore<f64>, build: F) -> Self {
        StoreFn { store, build }
    }

    /// All parameter values flattened into one probe vector.
    pub fn flat_params(&self) -> DenseArray<f64> {
        let mut data = Vec::with_capacity(self.store.total_scalars());
        for e in self.store.entries() {
            data.extend_from_slice(e.value.data());
        }
        DenseArray::from_vec(&[data.len()], data).expect("non-empty store")
    }

    fn store_with(&self, x: &DenseArray<f64>) -> ParamStore<f64> {
        let mut store = self.store.clone();
        let mut off = 0;
        for id in self.store.ids().collect::<Vec<_>>() {
            let dims = self.store.get(id).dims().to_vec();
            let n: usize = dims.iter().product();
            let chunk = x.data()[off..off + n].to_vec();
            store.set_value(id, DenseArray::from_vec(&dims, chunk).unwrap());
            off += n;
        }
        assert_eq!(off, x.len(), "probe vector length");
        store
    }
}

impl<F> ScalarFn for StoreFn<F>
where
    F: Fn(&mut Forward<f64>) -> Result<NodeId>,
{
    fn eval(&self, x: &DenseArray<f64>) -> Result<f64> {
        let store = self.store_with(x);
        let mut fwd = Forward::new(&store);
        let loss = (self.build)(&mut fwd)?;
        let v = fwd.tape.scalar_val(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite("StoreFn loss".into()));
        }
        Ok(v)
    }

    fn grad(&self, x: &DenseArray<f64>) -> Result<Vec<f64>> {
        let store = self.store_with(x);
        let mut fwd = Forward::new(&store);
        let loss = (self.build)(&mut fwd)?;
        if !fwd.tape.scalar_val(loss).is_finite() {
            return Err(Error::NonFinite("StoreFn loss".into()));
        }
        let grads = fwd.tape.backward(loss);
        let per_param = fwd.param_grads(&grads);
        let mut out = Vec::with_capacity(x.len());
        for (entry, g) in store.entries().iter().zip(per_param) {
            match g {
                Some(arr) => out.extend_from_slice(arr.data()),
                None => out.extend(std::iter::repeat_n(0.0, entry.value.len())),
            }
        }
        Ok(out)
    }
}

/// One entry of a verification suite.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    /// Scalar parameter count of the checked instance (gradient suite).
    pub params: usize,
    /// Max relative error vs central differences (gradient suite) or 0.
    pub max_err: f64,
    pub passed: bool,
    pub detail: String,
}

fn entry(name: &'static str, params: usize, max_err: f64, tol: f64) -> SuiteEntry {
    SuiteEntry {
        name,
        params,
        max_err,
        passed: max_err < tol,
        detail: format!("max relative error {max_err:.3e} (tolerance {tol:.0e})"),
    }
}

/// Gradient verification of every differentiable block on small
/// double-precision instances (each below 2000 parameters).
pub fn gradient_suite() -> Result<Vec<SuiteEntry>> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::encoder::{self, EncoderConfig};
    use crate::model::{Model, ModelConfig};
    use crate::numerics::{grad_check, DEFAULT_STEP};
    use crate::objective;
    use crate::sla;
    use crate::sup;
    use crate::synth::{gen_dataset, SynthConfig};

    const TOL: f64 = 1e-4;
    let mut out = Vec::new();

    // brain encoder
    {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let p = encoder::init_encoder(
            &mut store,
            &mut rng,
            EncoderConfig {
                channels: 3,
                timesteps: 5,
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                d_ff: 12,
                out_dim: 4,
            },
        )?;
        let mut drng = ChaCha8Rng::seed_from_u64(102);
        let data: Vec<f64> = (0..2 * 3 * 5).map(|_| drng.random_range(-1.0..1.0)).collect();
        let batch = DenseArray::from_vec(&[2, 3, 5], data)?;
        let params = store.total_scalars();
        let f = StoreFn::new(store, move |fwd| {
            let x = fwd.leaf(batch.clone());
            let out = encoder::forward(&p, fwd, x);
            let sq = fwd.tape.mul(out, out);
            Ok(fwd.tape.sum_all(sq))
        });
        let err = grad_check(&f, &f.flat_params(), DEFAULT_STEP)?;
        out.push(entry("encoder", params, err, TOL));
    }

    // semantic uncertainty block
    {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let p = sup::init_sup(&mut store, &mut rng, "sup", 4);
        let mut drng = ChaCha8Rng::seed_from_u64(104);
        let data: Vec<f64> = (0..2 * 3 * 4).map(|_| drng.random_range(-1.0..1.0)).collect();
        let stack = DenseArray::from_vec(&[2, 3, 4], data)?;
        let params = store.total_scalars();
        let f = StoreFn::new(store, move |fwd| {
            let s = fwd.leaf(stack.clone());
            let nodes = sup::forward(&p, fwd, s);
            let sq = fwd.tape.mul(nodes.fused, nodes.fused);
            Ok(fwd.tape.sum_all(sq))
        });
        let err = grad_check(&f, &f.flat_params(), DEFAULT_STEP)?;
        out.push(entry("sup", params, err, TOL));
    }

    // alignment block end to end
    {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let p = sla::init_sla(&mut store, &mut rng, 4, 3, 5);
        for layer in &p.latent_dec.layers {
            let dims = store.get(layer.w).dims().to_vec();
            store.set_value(layer.w, crate::params::glorot::<f64>(&mut rng, dims[0], dims[1]));
        }
        let mut drng = ChaCha8Rng::seed_from_u64(106);
        let mut mk = |b: usize, k: usize| -> DenseArray<f64> {
            let data: Vec<f64> = (0..b * k).map(|_| drng.random_range(-1.0..1.0)).collect();
            DenseArray::from_vec(&[b, k], data).unwrap()
        };
        let (bf, vf, tf) = (mk(2, 4), mk(2, 4), mk(2, 4));
        let params = store.total_scalars();
        let f = StoreFn::new(store, move |fwd| {
            let bn = fwd.leaf(bf.clone());
            let vn = fwd.leaf(vf.clone());
            let tn = fwd.leaf(tf.clone());
            let m_b = sla::interaction_node(&p, fwd, bn, tn);
            let m_v = sla::interaction_node(&p, fwd, vn, bn);
            let lat_b = sla::latent_node(&p, fwd, m_b);
            let lat_v = sla::latent_node(&p, fwd, m_v);
            let align = sla::align_loss_node(fwd, lat_b, lat_v);
            let rb = sla::refine_node(&p, fwd, lat_b, p.prior_brain, sla::GateOperand::Decoded, None);
            let rv = sla::refine_node(&p, fwd, lat_v, p.prior_vision, sla::GateOperand::Decoded, None);
            let fb = sla::assemble_node(fwd, bn, rb);
            let fv = sla::assemble_node(fwd, vn, rv);
            let cat = fwd.tape.concat_cols(fb, fv);
            let sq = fwd.tape.mul(cat, cat);
            let s = fwd.tape.sum_all(sq);
            Ok(fwd.tape.add(s, align))
        });
        let err = grad_check(&f, &f.flat_params(), DEFAULT_STEP)?;
        out.push(entry("sla", params, err, TOL));
    }

    // contrastive objective with temperature
    {
        let mut store = ParamStore::<f64>::new();
        let cfg = objective::init_loss(&mut store, 0.7, objective::INIT_LOGIT_SCALE)?;
        let mut drng = ChaCha8Rng::seed_from_u64(107);
        let mut mk = |b: usize, k: usize| -> DenseArray<f64> {
            let data: Vec<f64> = (0..b * k).map(|_| drng.random_range(-1.0..1.0)).collect();
            DenseArray::from_vec(&[b, k], data).unwrap()
        };
        let (fb, fv, la, lb) = (mk(3, 6), mk(3, 6), mk(3, 5), mk(3, 5));
        let params = store.total_scalars();
        let f = StoreFn::new(store, move |fwd| {
            let bn = fwd.leaf(fb.clone());
            let vn = fwd.leaf(fv.clone());
            let l_con = objective::contrastive_node(fwd, &cfg, bn, vn);
            let lan = fwd.leaf(la.clone());
            let lbn = fwd.leaf(lb.clone());
            let align = sla::align_loss_node(fwd, lan, lbn);
            Ok(objective::total_node(fwd, &cfg, l_con, align))
        });
        let err = grad_check(&f, &f.flat_params(), DEFAULT_STEP)?;
        out.push(entry("objective", params, err, TOL));
    }

    // the whole loss on a 4-sample batch
    {
        let synth = SynthConfig {
            seed: 9,
            n_train: 4,
            n_test: 2,
            latent_dim: 4,
            k: 8,
            channels: 3,
            timesteps: 5,
            sigma_brain: 0.05,
            sigma_sem: 0.05,
            modality: crate::data::Modality::Eeg,
            n_categories: 0,
        };
        let ds = gen_dataset::<f64>(&synth)?;
        let mut cfg = ModelConfig::defaults(3, 5, 8);
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.n_layers = 1;
        cfg.d_ff = 12;
        cfg.k_prime = 4;
        cfg.latent_dim = 4;
        let model = Model::<f64>::init(cfg, 108)?;
        let idx: Vec<usize> = (0..4).collect();
        let brain = ds.brain.gather(&idx);
        let vis = ds.vision.gather(&idx);
        let txt = ds.text.gather(&idx);
        let params = model.store.total_scalars();
        let store = model.store.clone();
        let f = StoreFn::new(store, move |fwd| {
            let nodes = model.forward_batch(fwd, &brain, &vis, &txt)?;
            Ok(nodes.total)
        });
        let err = grad_check(&f, &f.flat_params(), DEFAULT_STEP)?;
        out.push(entry("full_loss", params, err, TOL));
    }

    Ok(out)
}

/// Fast runtime re-checks of the core invariants (no training).
pub fn invariant_suite() -> Vec<SuiteEntry> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::numerics::{row_softmax, symmetric_kl, FloorMode};

    let mut out = Vec::new();
    let mut push = |name: &'static str, result: std::result::Result<(), String>| {
        out.push(SuiteEntry {
            name,
            params: 0,
            max_err: 0.0,
            passed: result.is_ok(),
            detail: result.err().unwrap_or_else(|| "ok".into()),
        });
    };

    push("softmax_rows_sum_to_one", {
        let mut rng = ChaCha8Rng::seed_from_u64(201);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let data: Vec<f64> = (0..8).map(|_| rng.random_range(-50.0..50.0)).collect();
            let x = DenseArray::from_vec(&[2, 4], data).unwrap();
            let s = row_softmax(&x).unwrap();
            for row in s.data().chunks(4) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        if worst < 1e-6 {
            Ok(())
        } else {
            Err(format!("row sum deviates by {worst:e}"))
        }
    });

    push("symmetric_kl_symmetry_and_sign", {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let mut problem = None;
        for _ in 0..200 {
            let a: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = row_softmax(&DenseArray::from_vec(&[2, 3], a).unwrap()).unwrap();
            let q = row_softmax(&DenseArray::from_vec(&[2, 3], b).unwrap()).unwrap();
            let pq = symmetric_kl(&p, &q, FloorMode::Clamp).unwrap();
            let qp = symmetric_kl(&q, &p, FloorMode::Clamp).unwrap();
            if pq != qp {
                problem = Some(format!("asymmetry: {pq} vs {qp}"));
            }
            if pq < 0.0 {
                problem = Some(format!("negative divergence {pq}"));
            }
        }
        problem.map_or(Ok(()), Err)
    });

    push("evidence_and_weights_in_range", {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(203);
        let p = crate::sup::init_sup(&mut store, &mut rng, "inv_sup", 4);
        let mut drng = ChaCha8Rng::seed_from_u64(204);
        let mut problem = None;
        for _ in 0..100 {
            let data: Vec<f64> = (0..2 * 3 * 4).map(|_| drng.random_range(-2.0..2.0)).collect();
            let stack = DenseArray::from_vec(&[2, 3, 4], data).unwrap();
            let alpha = crate::sup::evidence(&p, &store, &stack).unwrap();
            if !alpha.values().data().iter().all(|&v| v > 1.0) {
                problem = Some("alpha <= 1".to_string());
            }
            let rel = crate::sup::uncertainty(&alpha);
            if !rel.u.data().iter().all(|&v| v > 0.0 && v < 1.0) {
                problem = Some("u outside (0,1)".to_string());
            }
        }
        problem.map_or(Ok(()), Err)
    });

    push("tensor_file_roundtrip", {
        let mut rng = ChaCha8Rng::seed_from_u64(205);
        let mut problem = None;
        for _ in 0..20 {
            let rank = rng.random_range(1..=3usize);
            let dims: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=4usize)).collect();
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let a = DenseArray::from_vec(&dims, data).unwrap();
            let bytes = crate::data::bten::encode(&a, crate::data::RoleTag::Generic);
            match crate::data::bten::decode::<f32>(&bytes) {
                Ok((b, _)) if b == a => {}
                other => problem = Some(format!("roundtrip failed: {other:?}")),
            }
        }
        problem.map_or(Ok(()), Err)
    });

    push("retrieval_chance_convergence", {
        let mut rng = ChaCha8Rng::seed_from_u64(206);
        let n = 128;
        let d = 16;
        let mut mk = || {
            let mut data = vec![0.0f64; n * d];
            for row in data.chunks_mut(d) {
                let mut norm = 0.0;
                for v in row.iter_mut() {
                    *v = rng.sample(rand_distr::StandardNormal);
                    norm += *v * *v;
                }
                for v in row.iter_mut() {
                    *v /= norm.sqrt();
                }
            }
            crate::data::Embedding::new(DenseArray::from_vec(&[n, d], data).unwrap()).unwrap()
        };
        let b = mk();
        let v = mk();
        let cell = crate::evalkit::nway_topk(&b, &v, 4, 1, 4000, 207).unwrap();
        let sigma = (0.25f64 * 0.75 / 4000.0).sqrt();
        if (cell.accuracy - 0.25).abs() <= 3.0 * sigma + 0.01 {
            Ok(())
        } else {
            Err(format!("accuracy {} vs chance 0.25", cell.accuracy))
        }
    });

    push("lr_schedule_shape", {
        let peak = 1e-3;
        let total = 400;
        let warmup = 20;
        let ok = crate::optim::lr_at(0, total, peak, 0.05, true) == 0.0
            && crate::optim::lr_at(warmup, total, peak, 0.05, true) == peak
            && (warmup..total).all(|s| {
                crate::optim::lr_at(s + 1, total, peak, 0.05, true)
                    <= crate::optim::lr_at(s, total, peak, 0.05, true)
            });
        if ok {
            Ok(())
        } else {
            Err("schedule violates warmup/decay shape".into())
        }
    });

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes_everywhere() {
        let t0 = std::time::Instant::now();
        let entries = gradient_suite().unwrap();
        assert_eq!(entries.len(), 5);
        for e in &entries {
            assert!(e.params <= 2000, "{}: {} params", e.name, e.params);
            assert!(e.passed, "{}: {}", e.name, e.detail);
        }
        assert!(t0.elapsed().as_secs() < 60, "suite too slow: {:?}", t0.elapsed());
    }

    #[test]
    fn invariant_suite_passes_everywhere() {
        for e in invariant_suite() {
            assert!(e.passed, "{}: {}", e.name, e.detail);
        }
    }
}
