//! Transformer building blocks: linear/layer-norm wrappers over the tape,
//! multi-head attention, feed-forward, and pre-LN encoder/decoder layers.
//!
//! Blocks hold [`ParamId`]s, not data; every forward binds parameters onto
//! the caller's [`Graph`].

use rand_chacha::ChaCha8Rng;

use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::{Mat, Tid};

pub const LN_EPS: f64 = 1e-5;

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Mat::randn(rows, cols, std, rng)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Linear {
            w: ps.register(format!("{name}.w"), xavier(d_in, d_out, rng)),
            b: ps.register(format!("{name}.b"), Mat::zeros(1, d_out)),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Tid) -> Tid {
        let w = g.p(ps, self.w);
        let b = g.p(ps, self.b);
        let h = g.tape.matmul(x, w);
        g.tape.add_row(h, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            g: ps.register(format!("{name}.g"), Mat::from_vec(1, d, vec![1.0; d])),
            b: ps.register(format!("{name}.b"), Mat::zeros(1, d)),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Tid) -> Tid {
        let gamma = g.p(ps, self.g);
        let beta = g.p(ps, self.b);
        g.tape.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttn {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttn {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(d_model % heads == 0, "d_model {d_model} not divisible by {heads} heads");
        MultiHeadAttn {
            wq: Linear::new(ps, &format!("{name}.wq"), d_model, d_model, rng),
            wk: Linear::new(ps, &format!("{name}.wk"), d_model, d_model, rng),
            wv: Linear::new(ps, &format!("{name}.wv"), d_model, d_model, rng),
            wo: Linear::new(ps, &format!("{name}.wo"), d_model, d_model, rng),
            heads,
            d_model,
        }
    }

    /// Attention of `xq` over `xkv`. `mask` is an additive (n_q, n_kv)
    /// constant (0 / -1e30) already on the tape.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        xq: Tid,
        xkv: Tid,
        mask: Option<Tid>,
    ) -> Tid {
        let q = self.wq.forward(g, ps, xq);
        let k = self.wk.forward(g, ps, xkv);
        let v = self.wv.forward(g, ps, xkv);
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = g.tape.slice_cols(q, c0, c1);
            let kh = g.tape.slice_cols(k, c0, c1);
            let vh = g.tape.slice_cols(v, c0, c1);
            let kt = g.tape.transpose(kh);
            let scores = g.tape.matmul(qh, kt);
            let mut scores = g.tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.tape.add(scores, m);
            }
            let probs = g.tape.softmax_rows(scores);
            outs.push(g.tape.matmul(probs, vh));
        }
        let cat = g.tape.concat_cols(&outs);
        self.wo.forward(g, ps, cat)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FeedForward {
            w1: Linear::new(ps, &format!("{name}.w1"), d_model, d_ff, rng),
            w2: Linear::new(ps, &format!("{name}.w2"), d_ff, d_model, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Tid) -> Tid {
        let h = self.w1.forward(g, ps, x);
        let h = g.tape.gelu(h);
        self.w2.forward(g, ps, h)
    }
}

/// Pre-LN self-attention encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttn,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d_model),
            attn: MultiHeadAttn::new(ps, &format!("{name}.attn"), d_model, heads, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d_model),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), d_model, d_ff, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Tid, mask: Option<Tid>) -> Tid {
        let n = self.ln1.forward(g, ps, x);
        let a = self.attn.forward(g, ps, n, n, mask);
        let x = g.tape.add(x, a);
        let n = self.ln2.forward(g, ps, x);
        let f = self.ffn.forward(g, ps, n);
        g.tape.add(x, f)
    }
}

/// Pre-LN decoder layer: causal self-attention, cross-attention, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttn,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttn,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        DecoderLayer {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d_model),
            self_attn: MultiHeadAttn::new(ps, &format!("{name}.self"), d_model, heads, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d_model),
            cross_attn: MultiHeadAttn::new(ps, &format!("{name}.cross"), d_model, heads, rng),
            ln3: LayerNorm::new(ps, &format!("{name}.ln3"), d_model),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), d_model, d_ff, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x: Tid,
        enc: Tid,
        causal: Tid,
    ) -> Tid {
        let n = self.ln1.forward(g, ps, x);
        let a = self.self_attn.forward(g, ps, n, n, Some(causal));
        let x = g.tape.add(x, a);
        let n = self.ln2.forward(g, ps, x);
        let c = self.cross_attn.forward(g, ps, n, enc, None);
        let x = g.tape.add(x, c);
        let n = self.ln3.forward(g, ps, x);
        let f = self.ffn.forward(g, ps, n);
        g.tape.add(x, f)
    }
}

/// Sinusoidal position table, rows 0..max_len.
pub fn sinusoid_table(max_len: usize, d: usize) -> Mat {
    let mut m = Mat::zeros(max_len, d);
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let x = pos as f64 * freq;
            m.data[pos * d + 2 * i] = x.sin();
            m.data[pos * d + 2 * i + 1] = x.cos();
        }
    }
    m
}

/// Positions rows r0..r0+n as a tape constant.
pub fn positions(g: &mut Graph, table: &Mat, r0: usize, n: usize) -> Tid {
    assert!(
        r0 + n <= table.rows,
        "sequence length {} exceeds position table {}",
        r0 + n,
        table.rows
    );
    let mut out = Mat::zeros(n, table.cols);
    for i in 0..n {
        out.row_mut(i).copy_from_slice(table.row(r0 + i));
    }
    g.constant(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::component_rng;
    use crate::tensor::test_mat;

    fn setup() -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(), component_rng(42, "nn-test", 0))
    }

    #[test]
    fn encoder_layer_shapes_and_determinism() {
        let (mut ps, mut rng) = setup();
        let layer = EncoderLayer::new(&mut ps, "enc.0", 32, 4, 128, &mut rng);
        let x = test_mat(7, 32, 1, "nn-x");
        let run = |ps: &ParamStore| {
            let mut g = Graph::eval(ps);
            let xi = g.constant(x.clone());
            let y = layer.forward(&mut g, ps, xi, None);
            g.tape.data(y).clone()
        };
        let y1 = run(&ps);
        let y2 = run(&ps);
        assert_eq!((y1.rows, y1.cols), (7, 32));
        assert!(y1.all_finite());
        assert!(y1.data.iter().zip(&y2.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn causal_self_attention_ignores_future() {
        let (mut ps, mut rng) = setup();
        let layer = DecoderLayer::new(&mut ps, "dec.0", 32, 4, 128, &mut rng);
        let enc = test_mat(5, 32, 2, "nn-enc");
        let x1 = test_mat(6, 32, 3, "nn-dx");
        let mut x2 = x1.clone();
        for v in x2.row_mut(5).iter_mut() {
            *v += 3.0;
        }
        let run = |x: &Mat, ps: &ParamStore| {
            let mut g = Graph::eval(ps);
            let xi = g.constant(x.clone());
            let ei = g.constant(enc.clone());
            let mask = g.tape.causal_mask(6);
            let y = layer.forward(&mut g, ps, xi, ei, mask);
            g.tape.data(y).clone()
        };
        let y1 = run(&x1, &ps);
        let y2 = run(&x2, &ps);
        // Rows before the perturbed position are bit-identical.
        for i in 0..5 {
            assert!(
                y1.row(i).iter().zip(y2.row(i)).all(|(a, b)| a.to_bits() == b.to_bits()),
                "row {i} leaked future information"
            );
        }
        assert!(y1.row(5).iter().zip(y2.row(5)).any(|(a, b)| a != b));
    }

    #[test]
    fn attention_gradients_check_out() {
        let (mut ps, mut rng) = setup();
        let layer = EncoderLayer::new(&mut ps, "enc.0", 8, 2, 16, &mut rng);
        let x = test_mat(4, 8, 5, "nn-gc");
        let r = crate::tensor::gradcheck::check(&[x], 1e-5, |tape, ids| {
            let taken = std::mem::replace(tape, crate::tensor::Tape::new(false));
            let mut g = Graph::over(taken, &ps);
            let y = layer.forward(&mut g, &ps, ids[0], None);
            let s = g.tape.sum_all(y);
            *tape = g.into_tape();
            s
        });
        assert!(r.max_rel_err < 1e-4, "rel err {}", r.max_rel_err);
    }

    #[test]
    fn sinusoid_table_is_bounded_and_position_sensitive() {
        let t = sinusoid_table(64, 32);
        assert!(t.data.iter().all(|v| v.abs() <= 1.0));
        assert!(t.row(3).iter().zip(t.row(4)).any(|(a, b)| a != b));
    }
}
