//! Continuous integrate-and-fire boundary detector: per-position firing
//! weights from a sigmoid projection, accumulate-and-fire integration into
//! shrunk unit states, teacher-forced weight scaling, the unit-count loss,
//! and the streaming firing count used by the wait-k policy.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::{
    cif_unit_count, sigmoid_val, CifAux, CifMode, Mat, Tid,
};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct CifHead {
    pub w: ParamId,
    pub b: ParamId,
    pub beta: f64,
    pub tail_threshold: f64,
}

impl CifHead {
    pub fn new(cfg: &ModelConfig, ps: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (cfg.d_model + 1) as f64).sqrt();
        CifHead {
            w: ps.register("cif.w", Mat::randn(cfg.d_model, 1, std, rng)),
            b: ps.register("cif.b", Mat::zeros(1, 1)),
            beta: cfg.beta,
            tail_threshold: cfg.tail_threshold,
        }
    }

    /// Firing weights α = sigmoid(a·w + b), one per row of `a`.
    pub fn alphas(&self, g: &mut Graph, ps: &ParamStore, a: Tid) -> Tid {
        let w = g.p(ps, self.w);
        let b = g.p(ps, self.b);
        let z = g.tape.matmul(a, w);
        let z = g.tape.add_row(z, b);
        g.tape.sigmoid(z)
    }

    /// Off-tape weights for streaming inference.
    pub fn alphas_plain(&self, ps: &ParamStore, a: &Mat) -> Vec<f64> {
        let w = ps.get(self.w);
        let b = ps.get(self.b).data[0];
        (0..a.rows)
            .map(|i| {
                let z: f64 = a.row(i).iter().zip(&w.data).map(|(x, y)| x * y).sum();
                sigmoid_val(z + b)
            })
            .collect()
    }

    /// Offline integration: tail residual fires iff it reaches the tail
    /// threshold.
    pub fn integrate_offline(&self, g: &mut Graph, alpha: Tid, a: Tid) -> (Tid, CifAux) {
        g.tape.cif_integrate(
            alpha,
            a,
            self.beta,
            CifMode::Offline { tail_threshold: self.tail_threshold },
        )
    }

    /// Streaming integration: only complete firings, never a tail unit.
    pub fn integrate_streaming(&self, g: &mut Graph, alpha: Tid, a: Tid) -> (Tid, CifAux) {
        g.tape.cif_integrate(alpha, a, self.beta, CifMode::Streaming)
    }

    /// Teacher-forced integration: rescale α so the accumulated mass is
    /// exactly J·β, then fire exactly J units. Gradients flow through the
    /// rescaling.
    pub fn integrate_scaled(
        &self,
        g: &mut Graph,
        alpha: Tid,
        a: Tid,
        j: usize,
    ) -> Result<(Tid, CifAux)> {
        assert!(j >= 1, "scale_to needs J >= 1");
        let sum = g.tape.sum_all(alpha);
        let total = g.tape.data(sum).data[0];
        if total <= 0.0 {
            return Err(Error::contract("cannot scale firing weights with zero total"));
        }
        let inv = g.tape.recip(sum);
        let unit_mass = g.tape.scale_by_scalar(alpha, inv);
        let scaled = g.tape.scale(unit_mass, j as f64 * self.beta);
        Ok(g.tape.cif_integrate(scaled, a, self.beta, CifMode::ForceUnits(j)))
    }

    /// Weakly supervised unit-count loss |J − Σα|. Piecewise linear; the
    /// sign is fixed by the forward value, matching the subgradient.
    pub fn length_loss(&self, g: &mut Graph, alpha: Tid, j: usize) -> Tid {
        assert!(j >= 1, "length loss needs J >= 1");
        let sum = g.tape.sum_all(alpha);
        let jc = g.constant(Mat::scalar(j as f64));
        let diff = g.tape.sub(jc, sum);
        let sign = g.tape.data(diff).data[0].signum();
        let sign = if g.tape.data(diff).data[0] == 0.0 { 0.0 } else { sign };
        g.tape.scale(diff, sign)
    }

    /// Complete firings over a weight prefix (wait-k's unit counter N).
    pub fn streaming_count(&self, alphas: &[f64]) -> usize {
        cif_unit_count(alphas, self.beta)
    }
}
