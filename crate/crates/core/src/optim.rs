//! Adaptive-moment optimizer with decoupled weight decay, plus the
//! warmup/cosine learning-rate schedule.

use crate::numerics::DenseArray;
use crate::params::ParamStore;
use crate::scalar::{real, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment state aligned with store entry order. Frozen
/// parameters are never written; the write path asserts it.
pub struct AdamW<T> {
    cfg: OptimConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: usize,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: OptimConfig) -> Self {
        let m = store.entries().iter().map(|e| vec![T::zero(); e.value.len()]).collect();
        let v = store.entries().iter().map(|e| vec![T::zero(); e.value.len()]).collect();
        AdamW { cfg, m, v, t: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// One update over every trainable parameter that received a
    /// gradient this step.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<DenseArray<T>>],
        lr: f64,
    ) {
        assert_eq!(grads.len(), store.len(), "gradient slot count");
        self.t += 1;
        let b1 = real::<T>(self.cfg.beta1);
        let b2 = real::<T>(self.cfg.beta2);
        let eps = real::<T>(self.cfg.eps);
        let lr_t = real::<T>(lr);
        let wd = real::<T>(self.cfg.weight_decay);
        let bias1 = real::<T>(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bias2 = real::<T>(1.0 - self.cfg.beta2.powi(self.t as i32));

        for (idx, id) in store.ids().enumerate().collect::<Vec<_>>() {
            // frozen parameters still receive gradients (they sit on the
            // graph) but must never be written
            if store.is_frozen(id) {
                continue;
            }
            let Some(g) = &grads[idx] else { continue };
            self.update_entry(store, idx, id, g, (b1, b2, eps, lr_t, wd), (bias1, bias2));
        }
    }

    fn update_entry(
        &mut self,
        store: &mut ParamStore<T>,
        idx: usize,
        id: crate::params::ParamId,
        g: &DenseArray<T>,
        (b1, b2, eps, lr_t, wd): (T, T, T, T, T),
        (bias1, bias2): (T, T),
    ) {
        assert!(
            !store.is_frozen(id),
            "optimizer write to frozen parameter \"{}\"",
            store.name(id)
        );
        let m = &mut self.m[idx];
        let v = &mut self.v[idx];
        let p = store.get_mut(id);
        for ((pv, gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mv = b1 * *mv + (T::one() - b1) * *gv;
            *vv = b2 * *vv + (T::one() - b2) * *gv * *gv;
            let m_hat = *mv / bias1;
            let v_hat = *vv / bias2;
            *pv = *pv - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * *pv);
        }
    }
}

/// Learning rate at `step` of `total_steps`: linear warmup from zero
/// over the first `warmup_frac` of steps, then cosine to zero (or flat
/// when `cosine` is off). `lr(0) = 0`, `lr(warmup_end) = peak`, and the
/// tail never increases.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_frac: f64, cosine: bool) -> f64 {
    assert!(total_steps > 0);
    let warmup = ((total_steps as f64 * warmup_frac).round() as usize).max(1);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if !cosine {
        return peak;
    }
    let denom = (total_steps - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / denom).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
