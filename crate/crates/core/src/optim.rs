//! Adam with linear warmup followed by inverse-square-root decay.

use crate::params::ParamStore;
use crate::tensor::Mat;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps: 200 }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        assert!(cfg.warmup_steps >= 1, "warmup_steps must be >= 1");
        Adam {
            cfg,
            step: 0,
            m: (0..n_params).map(|_| None).collect(),
            v: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate at a 1-based step: linear ramp to `lr` over the warmup,
    /// then `lr * sqrt(warmup / step)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.cfg.warmup_steps as f64;
        let t = step.max(1) as f64;
        self.cfg.lr * (t / w).min((w / t).sqrt())
    }

    /// Apply one update using the gradients accumulated in the store, then
    /// clear them. Parameters without a gradient buffer are untouched, so a
    /// step with no accumulated gradients is a no-op (aside from the step
    /// counter advancing).
    pub fn step(&mut self, ps: &mut ParamStore) {
        self.step += 1;
        let lr = self.lr_at(self.step);
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for idx in 0..ps.len() {
            let Some(grad) = ps.take_grad_at(idx) else { continue };
            let m = self.m[idx].get_or_insert_with(|| vec![0.0; grad.data.len()]);
            let v = self.v[idx].get_or_insert_with(|| vec![0.0; grad.data.len()]);
            let data = ps.data_mut_at(idx);
            for ((p, g), (mi, vi)) in data
                .data
                .iter_mut()
                .zip(&grad.data)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *p -= lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
    }

    /// Moment tensors for checkpointing, named `opt.m.<param>` / `opt.v.<param>`,
    /// plus `meta.opt.step`. Only parameters that have state are emitted.
    pub fn state_tensors(&self, ps: &ParamStore) -> Vec<(String, Mat)> {
        let mut out = Vec::new();
        out.push(("meta.opt.step".to_string(), Mat::scalar(self.step as f64)));
        for idx in 0..ps.len() {
            if let Some(m) = &self.m[idx] {
                let (r, c) = ps.shape_at(idx);
                out.push((format!("opt.m.{}", ps.name_at(idx)), Mat::from_vec(r, c, m.clone())));
                out.push((
                    format!("opt.v.{}", ps.name_at(idx)),
                    Mat::from_vec(r, c, self.v[idx].clone().expect("m and v paired")),
                ));
            }
        }
        out
    }

    /// Restore moments and step counter from checkpoint tensors.
    pub fn load_state(&mut self, ps: &ParamStore, tensors: &[(String, Mat)]) {
        for (name, mat) in tensors {
            if name == "meta.opt.step" {
                self.step = mat.data[0] as u64;
            } else if let Some(p) = name.strip_prefix("opt.m.") {
                if let Some(pid) = ps.find(p) {
                    self.m[pid.0] = Some(mat.data.clone());
                }
            } else if let Some(p) = name.strip_prefix("opt.v.") {
                if let Some(pid) = ps.find(p) {
                    self.v[pid.0] = Some(mat.data.clone());
                }
            }
        }
    }
}
