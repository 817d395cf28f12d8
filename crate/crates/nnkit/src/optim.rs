use crate::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
///
/// A step with a non-finite gradient is rejected: parameters and moments are
/// left untouched and [`Adam::rejected`] is incremented.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
    rejected: u64,
}

impl Adam {
    pub fn new(n: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            rejected: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn moments(&self) -> (&[f32], &[f32]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f32) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(NnError::dim("adam params", self.m.len(), params.len()));
        }
        if grad.len() != params.len() {
            return Err(NnError::dim("adam gradient", params.len(), grad.len()));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            self.rejected += 1;
            return Err(NnError::Numerical {
                term: "gradient".into(),
                detail: format!("non-finite value {} at index {i}; step rejected", grad[i]),
            });
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let lr = lr as f64;
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = g as f64;
            let mn = beta1 * *m as f64 + (1.0 - beta1) * g;
            let vn = beta2 * *v as f64 + (1.0 - beta2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + eps);
            *p = (*p as f64 - update) as f32;
        }
        Ok(())
    }
}
