//! Adam optimizer driven by parameter visitors.
//!
//! Moment slots are created lazily on the first step in visit order, which
//! is also the checkpoint order.

use super::{Param, ParamVisitor, Scalar};

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    slots: Vec<Slot<T>>,
}

#[derive(Debug, Clone)]
struct Slot<T> {
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            slots: Vec::new(),
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn set_t(&mut self, t: u64) {
        self.t = t;
    }

    /// Apply one update over every parameter yielded by `visit`.
    pub fn step<F>(&mut self, visit: F)
    where
        F: FnOnce(&mut ParamVisitor<'_, T>),
    {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let slots = &mut self.slots;
        let mut idx = 0usize;
        visit(&mut |_name: String, p: &mut Param<T>| {
            if slots.len() == idx {
                slots.push(Slot {
                    m: vec![T::zero(); p.len()],
                    v: vec![T::zero(); p.len()],
                });
            }
            let slot = &mut slots[idx];
            assert_eq!(slot.m.len(), p.len(), "optimizer slot/param size mismatch");
            idx += 1;
            for i in 0..p.len() {
                let g = p.grad[i].as_f64();
                let m = b1 * slot.m[i].as_f64() + (1.0 - b1) * g;
                let v = b2 * slot.v[i].as_f64() + (1.0 - b2) * g * g;
                slot.m[i] = T::from_f64(m);
                slot.v[i] = T::from_f64(v);
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                p.value[i] = T::from_f64(p.value[i].as_f64() - update);
            }
        });
        assert_eq!(idx, slots.len(), "visit yielded fewer params than before");
    }

    /// Moment buffers in slot order, for checkpointing.
    pub fn visit_state(&mut self, mut f: impl FnMut(usize, &mut Vec<T>, &mut Vec<T>)) {
        for (i, slot) in self.slots.iter_mut().enumerate() {
            f(i, &mut slot.m, &mut slot.v);
        }
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Pre-create slots (used when restoring a checkpoint before any step).
    pub fn ensure_slots(&mut self, sizes: &[usize]) {
        if self.slots.is_empty() {
            self.slots = sizes
                .iter()
                .map(|&len| Slot {
                    m: vec![T::zero(); len],
                    v: vec![T::zero(); len],
                })
                .collect();
        }
    }
}
