//! Adam optimiser over flat parameter vectors.

use crate::error::{param_err, Result};

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update. Parameters whose gradient has always been zero do
    /// not move.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return param_err(format!(
                "adam state has {} entries but got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }

    /// Keeps the state of the entries listed in `keep`, in that order.
    pub fn retain(&mut self, keep: &[usize], stride: usize) {
        let pick = |src: &[f64]| {
            keep.iter()
                .flat_map(|&k| src[k * stride..(k + 1) * stride].iter().copied())
                .collect()
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }
}
