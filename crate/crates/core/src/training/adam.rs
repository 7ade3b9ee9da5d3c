use crate::error::{Error, Result};
use crate::models::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Per-parameter moments. `t` counts the updates this parameter received.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of `step` calls.
    pub steps: u64,
    slots: Vec<Option<AdamSlot>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.5, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState { beta1, beta2, eps, steps: 0, slots: Vec::new() }
    }

    pub fn slot(&self, id: ParamId) -> Option<&AdamSlot> {
        self.slots.get(id.index()).and_then(|s| s.as_ref())
    }

    /// Slots in parameter order (for persistence).
    pub fn slots(&self) -> impl Iterator<Item = (ParamId, &AdamSlot)> + '_ {
        self.slots.iter().enumerate().filter_map(|(i, s)| s.as_ref().map(|s| (param_id(i), s)))
    }

    pub fn set_slot(&mut self, id: ParamId, slot: AdamSlot) {
        if self.slots.len() <= id.index() {
            self.slots.resize(id.index() + 1, None);
        }
        self.slots[id.index()] = Some(slot);
    }

    /// One bias-corrected Adam update of every parameter that has a gradient.
    /// Parameters absent from `grads` are left untouched, moments included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor<f32>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if store.get(*id).shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    store.name(*id),
                    store.get(*id).shape()
                )));
            }
        }
        self.steps += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let (a1, a2) = ((1.0 - self.beta1) as f32, (1.0 - self.beta2) as f32);
        for (id, g) in grads {
            if self.slots.len() <= id.index() {
                self.slots.resize(id.index() + 1, None);
            }
            let n = g.len();
            let slot = self.slots[id.index()].get_or_insert_with(|| AdamSlot { m: vec![0.0; n], v: vec![0.0; n], t: 0 });
            if slot.m.len() != n {
                return Err(Error::shape(format!("optimizer state for {} has {} entries, gradient {n}", store.name(*id), slot.m.len())));
            }
            slot.t += 1;
            let c1 = 1.0 - self.beta1.powi(slot.t as i32);
            let c2 = 1.0 - self.beta2.powi(slot.t as i32);
            let step = (lr / c1) as f32;
            let c2 = c2 as f32;
            let eps = self.eps as f32;
            let p = store.get_mut(*id).data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(slot.m.iter_mut()).zip(slot.v.iter_mut()) {
                *m = b1 * *m + a1 * g;
                *v = b2 * *v + a2 * g * g;
                *p -= step * *m / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn param_id(i: usize) -> ParamId {
    ParamId::from_index(i)
}
