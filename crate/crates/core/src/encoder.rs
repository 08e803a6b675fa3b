//! Acoustic encoder: convolutional subsampler, bidirectional transformer,
//! mask-embedding future context, and the masked-reconstruction loss.
//!
//! The conv front end uses left-aligned stride-2 windows with zero padding on
//! the odd tail, so the first floor(prefix/S) outputs of any prefix are
//! bit-identical to the full run. It stays frozen at its random
//! initialization: it only needs to be a fixed deterministic featurizer, and
//! freezing it keeps the distillation student's input tokens c identical to
//! the teacher's.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::nn::{positions, sinusoid_table, EncoderLayer, LayerNorm, Linear};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::{gelu_val, Mat, Tid};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct AcousticEncoder {
    conv: Vec<Linear>,
    layers: Vec<EncoderLayer>,
    ln_out: LayerNorm,
    pub mask_emb: ParamId,
    pos: Mat,
    pub stride: usize,
    pub d_in: usize,
    pub d_model: usize,
}

impl AcousticEncoder {
    /// Registers all `acoustic.*` parameters and freezes the conv stack.
    pub fn new(cfg: &ModelConfig, ps: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let n_conv = cfg.conv_stride.trailing_zeros() as usize;
        let mut conv = Vec::with_capacity(n_conv);
        for i in 0..n_conv {
            let d_prev = if i == 0 { cfg.d_in } else { cfg.d_model };
            conv.push(Linear::new(
                ps,
                &format!("acoustic.conv.{i}"),
                2 * d_prev,
                cfg.d_model,
                rng,
            ));
        }
        ps.set_trainable_prefix("acoustic.conv.", false);
        let mask_emb = ps.register(
            "acoustic.mask_emb",
            Mat::randn(1, cfg.d_model, 0.1, rng),
        );
        let layers = (0..cfg.acoustic_layers)
            .map(|i| {
                EncoderLayer::new(
                    ps,
                    &format!("acoustic.layer{i}"),
                    cfg.d_model,
                    cfg.n_heads,
                    cfg.d_ff,
                    rng,
                )
            })
            .collect();
        let ln_out = LayerNorm::new(ps, "acoustic.ln_out", cfg.d_model);
        AcousticEncoder {
            conv,
            layers,
            ln_out,
            mask_emb,
            pos: sinusoid_table(cfg.max_positions, cfg.d_model),
            stride: cfg.conv_stride,
            d_in: cfg.d_in,
            d_model: cfg.d_model,
        }
    }

    /// Subsample frames into speech tokens c, one row per `stride` frames
    /// (ceil on the tail). Frozen parameters, so this runs off-tape.
    pub fn conv_subsample(&self, ps: &ParamStore, frames: &Mat) -> Result<Mat> {
        if frames.rows < self.stride {
            return Err(Error::contract(format!(
                "conv_subsample needs at least {} frames, got {}",
                self.stride, frames.rows
            )));
        }
        assert_eq!(frames.cols, self.d_in, "frame feature dim mismatch");
        let mut cur = frames.clone();
        for lin in &self.conv {
            let w = ps.get(lin.w);
            let b = ps.get(lin.b);
            let n_out = cur.rows.div_ceil(2);
            let d_prev = cur.cols;
            let mut win = Mat::zeros(n_out, 2 * d_prev);
            for i in 0..n_out {
                win.row_mut(i)[..d_prev].copy_from_slice(cur.row(2 * i));
                if 2 * i + 1 < cur.rows {
                    win.row_mut(i)[d_prev..].copy_from_slice(cur.row(2 * i + 1));
                }
            }
            let mut out = Mat::zeros(n_out, w.cols);
            crate::tensor::matmul_into(&win.data, &w.data, n_out, 2 * d_prev, w.cols, &mut out.data);
            for i in 0..n_out {
                for (v, bias) in out.row_mut(i).iter_mut().zip(&b.data) {
                    *v = gelu_val(*v + bias);
                }
            }
            cur = out;
        }
        Ok(cur)
    }

    /// Number of complete conv windows in a frame prefix: outputs 0..this are
    /// stable as more audio arrives.
    pub fn stable_tokens(&self, n_frames: usize) -> usize {
        n_frames / self.stride
    }

    fn encode_rows(&self, g: &mut Graph, ps: &ParamStore, x: Tid) -> Tid {
        let n = g.tape.shape(x).0;
        let pos = positions(g, &self.pos, 0, n);
        let mut h = g.tape.add(x, pos);
        for layer in &self.layers {
            h = layer.forward(g, ps, h, None);
        }
        self.ln_out.forward(g, ps, h)
    }

    /// Bidirectional encoding of speech tokens into representations a.
    pub fn encode(&self, g: &mut Graph, ps: &ParamStore, c: Tid) -> Tid {
        assert!(g.tape.shape(c).0 >= 1, "encode needs at least one token");
        self.encode_rows(g, ps, c)
    }

    /// Future-aware encoding: append m mask embeddings after the prefix,
    /// encode the (τ+m)-row sequence, and keep the first
    /// τ + round((1−p)·m) rows. Returns the output and the kept mask-row
    /// count.
    pub fn encode_fai(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        c_prefix: &Mat,
        m: usize,
        p: f64,
    ) -> (Tid, usize) {
        assert!((0.0..=1.0).contains(&p), "discard rate p must be in [0,1]");
        let tau = c_prefix.rows;
        assert!(tau >= 1, "encode_fai needs a nonempty prefix");
        let c = g.constant(c_prefix.clone());
        let x = if m > 0 {
            let e = g.p(ps, self.mask_emb);
            let masks = g.tape.repeat_row(e, m);
            g.tape.concat_rows(&[c, masks])
        } else {
            c
        };
        let a = self.encode_rows(g, ps, x);
        let kept_masks = ((1.0 - p) * m as f64).round() as usize;
        let out = g.tape.slice_rows(a, 0, tau + kept_masks);
        (out, kept_masks)
    }

    /// Masked-reconstruction loss on one utterance: rows of c flagged in
    /// `mask` are replaced by the mask embedding; the loss is the mean
    /// squared error between encoder outputs at those rows and the clean c.
    /// Returns None when nothing is masked.
    pub fn masked_loss(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        c: &Mat,
        mask: &[bool],
    ) -> Option<Tid> {
        assert_eq!(mask.len(), c.rows, "mask length must equal token count");
        let masked_idx: Vec<usize> =
            (0..c.rows).filter(|&i| mask[i]).collect();
        if masked_idx.is_empty() {
            return None;
        }
        // Build the corrupted input as runs of clean rows and mask rows.
        let mut segments: Vec<Tid> = Vec::new();
        let mut i = 0;
        while i < c.rows {
            let start = i;
            let flagged = mask[i];
            while i < c.rows && mask[i] == flagged {
                i += 1;
            }
            if flagged {
                let e = g.p(ps, self.mask_emb);
                segments.push(g.tape.repeat_row(e, i - start));
            } else {
                let mut seg = Mat::zeros(i - start, c.cols);
                for r in start..i {
                    seg.row_mut(r - start).copy_from_slice(c.row(r));
                }
                segments.push(g.constant(seg));
            }
        }
        let x = if segments.len() == 1 {
            segments[0]
        } else {
            g.tape.concat_rows(&segments)
        };
        let out = self.encode_rows(g, ps, x);
        let picked = g.tape.gather_rows(out, &masked_idx);
        let mut target = Mat::zeros(masked_idx.len(), c.cols);
        for (r, &src) in masked_idx.iter().enumerate() {
            target.row_mut(r).copy_from_slice(c.row(src));
        }
        let t = g.constant(target);
        let diff = g.tape.sub(picked, t);
        let sq = g.tape.square(diff);
        Some(g.tape.mean_all(sq))
    }
}

/// Draw mask spans over `tau` positions: uniform span starts, lengths uniform
/// in `span`, until at least `coverage` of positions are flagged.
pub fn sample_mask_spans(
    tau: usize,
    coverage: f64,
    span: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Vec<bool> {
    assert!(span.0 >= 1 && span.0 <= span.1);
    let mut mask = vec![false; tau];
    if tau == 0 {
        return mask;
    }
    let target = ((coverage * tau as f64).ceil() as usize).min(tau);
    let mut covered = 0;
    let mut attempts = 0;
    while covered < target && attempts < 50 * tau.max(1) {
        attempts += 1;
        let start = rng.gen_range(0..tau);
        let len = rng.gen_range(span.0..=span.1);
        for slot in mask.iter_mut().skip(start).take(len) {
            if !*slot {
                *slot = true;
                covered += 1;
            }
        }
    }
    mask
}
