//! Adam and the step learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamSet};
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// `base_lr * gamma^floor(epoch / step)`.
pub fn step_lr(epoch: usize, base_lr: f64, step: usize, gamma: f64) -> f64 {
    base_lr * gamma.powi((epoch / step.max(1)) as i32)
}

/// Adam with bias correction. Moments are kept per tensor ("slot").
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments for tensors of the given sizes.
    pub fn new(lr: f64, slot_sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
            step_count: 0,
            first_moment: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &ParamSet) -> Self {
        let sizes: Vec<usize> = params.iter().map(|(_, _, v)| v.len()).collect();
        Self::new(lr, &sizes)
    }

    /// One update of every slot that has a gradient; slots with `None` are
    /// left untouched, moments included.
    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[Option<&[f64]>]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::shape(format!(
                "adam: {} slots, {} params, {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (slot, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != params[slot].len() || g.len() != self.first_moment[slot].len() {
                    return Err(Error::shape(format!("adam slot {slot}: length mismatch")));
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Diverged(format!("non-finite gradient in slot {slot}")));
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = self.lr;
        for (slot, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.first_moment[slot];
            let v = &mut self.second_moment[slot];
            let p = &mut *params[slot];
            let mut finite = true;
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.iter()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                finite &= p.is_finite();
            }
            if !finite {
                return Err(Error::Diverged(format!("non-finite parameter in slot {slot}")));
            }
        }
        Ok(())
    }

    /// Updates a parameter set from tape gradients.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        let ids: Vec<_> = params.ids().collect();
        let mut slices: Vec<&mut [f64]> = params
            .values_mut()
            .map(|a| a.as_slice_mut().expect("parameters are contiguous"))
            .collect();
        let gs: Vec<Option<&[f64]>> = ids
            .iter()
            .map(|&id| grads.param(id).map(|g| g.as_slice().expect("gradients are contiguous")))
            .collect();
        self.step_slices(&mut slices, &gs)
    }
}
