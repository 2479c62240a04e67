//! AdamW with decoupled weight decay.

use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers plus the shared step counter. The learning
/// rate is passed per step so schedules live outside the optimizer.
#[derive(Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let m = store
            .iter_ids()
            .map(|id| vec![0.0; store.value(id).numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        Self { cfg, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamWConfig {
        self.cfg
    }

    /// One update from the gradients currently held in `store`; the caller
    /// zeroes gradients afterwards.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let (b1, b2, eps, wd) = (
            self.cfg.beta1,
            self.cfg.beta2,
            self.cfg.eps,
            self.cfg.weight_decay,
        );
        for id in store.iter_ids().collect::<Vec<ParamId>>() {
            let pi = id.0;
            let (p, g) = store.value_and_grad(id);
            debug_assert_eq!(p.numel(), self.m[pi].len());
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let pd = p.data_mut();
            for ((pv, &gv), (mv, vv)) in pd
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + eps) + wd * *pv);
            }
        }
    }

    /// Raw access for checkpointing.
    pub fn state(&self) -> (&[Vec<f64>], &[Vec<f64>], u64) {
        (&self.m, &self.v, self.step)
    }

    pub fn restore(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: u64) {
        assert_eq!(m.len(), self.m.len(), "moment buffer count");
        assert_eq!(v.len(), self.v.len(), "moment buffer count");
        for (a, b) in m.iter().zip(&self.m) {
            assert_eq!(a.len(), b.len(), "moment buffer length");
        }
        self.m = m;
        self.v = v;
        self.step = step;
    }
}
