//! Dense f64 matrices and tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable value lives on a [`Tape`] as a node holding its data
//! and the op that produced it. `backward` walks the tape in reverse creating
//! gradients only for nodes that need them; leaves created with
//! `requires_grad = false` (frozen parameters, constants) never get a
//! gradient buffer at all.
//!
//! Shapes are fully determined by the model configuration, so shape
//! mismatches are programmer errors and panic; fallible IO lives elsewhere.
//!
//! The integrate-and-fire op ([`Tape::cif_integrate`]) is the one custom
//! piece: its forward decomposes the accumulated weight mass into
//! (unit, frame, weight) pieces and its backward differentiates through the
//! clipped-interval formula `w = min(S_i, hi) - max(S_{i-1}, lo)`.

use crate::rng::component_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ── Plain matrices ──────────────────────────────────────────────────────────

/// Row-major dense matrix. Vectors are (n, 1), scalars (1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "Mat::from_rows: ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn scalar(v: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    /// Gaussian init, N(0, std^2), from a dedicated derived stream.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for v in m.data.iter_mut() {
            *v = std * normal(rng);
        }
        m
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// self += c * other
    pub fn scaled_add(&mut self, c: f64, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "scaled_add shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One standard-normal draw (Box-Muller on two uniform draws).
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// C = A @ B for flat row-major slices, ikj order.
pub fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// C = A @ B^T (B given row-major as (n, k)); rows of A dot rows of B.
fn matmul_nt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// C += A^T @ B (A given row-major as (k, m)).
fn matmul_tn_into(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

// ── Tape ────────────────────────────────────────────────────────────────────

/// Node id on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tid(pub usize);

/// Integrate-and-fire emission mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CifMode {
    /// Cross-threshold units only; leftover weight below `tail_threshold`
    /// is dropped, at or above it a final partial unit is emitted.
    Offline { tail_threshold: f64 },
    /// Exactly this many units: the first n-1 close at multiples of beta,
    /// the last takes all remaining mass. Callers pre-scale alpha so the
    /// total mass is (close to) n * beta.
    ForceUnits(usize),
    /// Cross-threshold units only, leftover weight stays un-emitted.
    Streaming,
}

/// Side information from an integrate-and-fire pass.
#[derive(Debug, Clone)]
pub struct CifAux {
    /// 0-based frame index at which each unit completed.
    pub boundaries: Vec<usize>,
    /// Accumulated weight not emitted as a unit.
    pub residual: f64,
    pub units: usize,
    pub sum_alpha: f64,
}

/// (unit, frame, weight) piece plus subgradient flags for the two clips.
#[derive(Debug, Clone)]
struct CifPiece {
    unit: u32,
    frame: u32,
    weight: f64,
    /// d weight / d S_frame = 1 (upper clip inactive).
    d_hi: bool,
    /// d weight / d S_{frame-1} = -1 (lower clip inactive).
    d_lo: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Tid, b: Tid },
    Transpose { x: Tid },
    Add { a: Tid, b: Tid },
    Sub { a: Tid, b: Tid },
    Mul { a: Tid, b: Tid },
    Square { x: Tid },
    Scale { x: Tid, c: f64 },
    AddConst { x: Tid },
    AddRow { x: Tid, row: Tid },
    ScaleByScalar { x: Tid, s: Tid },
    Recip { x: Tid },
    Gelu { x: Tid },
    Sigmoid { x: Tid },
    SoftmaxRows { x: Tid },
    LayerNorm { x: Tid, gamma: Tid, beta: Tid, eps: f64 },
    SumAll { x: Tid },
    MeanAll { x: Tid },
    SliceRows { x: Tid, r0: usize },
    SliceCols { x: Tid, c0: usize },
    ConcatRows { parts: Vec<Tid> },
    ConcatCols { parts: Vec<Tid> },
    RepeatRow { row: Tid, n: usize },
    GatherRows { x: Tid, idx: Vec<usize> },
    CrossEntropySum { logits: Tid, targets: Vec<usize>, smoothing: f64, probs: Mat },
    CosineRows { a: Tid, b: Tid },
    BernoulliKlSum { p: Tid, q: Tid, eps: f64 },
    CifIntegrate { alpha: Tid, a: Tid, beta: f64, pieces: Vec<CifPiece> },
}

struct Node {
    data: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node id.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. the given node, if one was produced.
    /// Leaves without `requires_grad` and unreached nodes have none.
    pub fn get(&self, id: Tid) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

const NEG_INF_MASK: f64 = -1e30;

impl Tape {
    /// `grad_enabled = false` gives a forward-only tape: no op bookkeeping,
    /// no gradient buffers, backward is a contract violation.
    pub fn new(grad_enabled: bool) -> Self {
        Tape { nodes: Vec::with_capacity(128), grad_enabled }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: Tid) -> &Mat {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: Tid) -> (usize, usize) {
        let m = &self.nodes[id.0].data;
        (m.rows, m.cols)
    }

    fn push(&mut self, data: Mat, op: Op, parents_need: bool) -> Tid {
        let needs = self.grad_enabled && parents_need;
        let op = if needs { op } else { Op::Leaf };
        self.nodes.push(Node { data, op, needs_grad: needs });
        Tid(self.nodes.len() - 1)
    }

    fn needs(&self, id: Tid) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Leaves ──

    pub fn leaf(&mut self, m: Mat, requires_grad: bool) -> Tid {
        let needs = self.grad_enabled && requires_grad;
        self.nodes.push(Node { data: m, op: Op::Leaf, needs_grad: needs });
        Tid(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Mat) -> Tid {
        self.leaf(m, false)
    }

    // ── Ops ──

    pub fn matmul(&mut self, a: Tid, b: Tid) -> Tid {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul: inner dims {ka} vs {kb}");
        let mut out = Mat::zeros(m, n);
        matmul_into(&self.data(a).data, &self.data(b).data, m, ka, n, &mut out.data);
        let need = self.needs(a) || self.needs(b);
        self.push(out, Op::Matmul { a, b }, need)
    }

    pub fn transpose(&mut self, x: Tid) -> Tid {
        let out = self.data(x).transpose();
        let need = self.needs(x);
        self.push(out, Op::Transpose { x }, need)
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let mut out = self.data(a).clone();
        out.add_assign(self.data(b));
        let need = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, need)
    }

    pub fn sub(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let mut out = self.data(a).clone();
        out.scaled_add(-1.0, self.data(b));
        let need = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub { a, b }, need)
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let mut out = self.data(a).clone();
        for (o, v) in out.data.iter_mut().zip(&self.data(b).data) {
            *o *= v;
        }
        let need = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul { a, b }, need)
    }

    pub fn square(&mut self, x: Tid) -> Tid {
        let mut out = self.data(x).clone();
        for v in out.data.iter_mut() {
            *v *= *v;
        }
        let need = self.needs(x);
        self.push(out, Op::Square { x }, need)
    }

    pub fn scale(&mut self, x: Tid, c: f64) -> Tid {
        let mut out = self.data(x).clone();
        for v in out.data.iter_mut() {
            *v *= c;
        }
        let need = self.needs(x);
        self.push(out, Op::Scale { x, c }, need)
    }

    pub fn add_const(&mut self, x: Tid, c: f64) -> Tid {
        let mut out = self.data(x).clone();
        for v in out.data.iter_mut() {
            *v += c;
        }
        let need = self.needs(x);
        self.push(out, Op::AddConst { x }, need)
    }

    /// Broadcast-add a (1, c) row to every row of x.
    pub fn add_row(&mut self, x: Tid, row: Tid) -> Tid {
        let (_, c) = self.shape(x);
        assert_eq!(self.shape(row), (1, c), "add_row: row must be (1, {c})");
        let mut out = self.data(x).clone();
        let r = self.data(row).data.clone();
        for i in 0..out.rows {
            for (o, v) in out.row_mut(i).iter_mut().zip(&r) {
                *o += v;
            }
        }
        let need = self.needs(x) || self.needs(row);
        self.push(out, Op::AddRow { x, row }, need)
    }

    /// Multiply every element of x by a (1, 1) scalar node.
    pub fn scale_by_scalar(&mut self, x: Tid, s: Tid) -> Tid {
        assert!(self.data(s).is_scalar(), "scale_by_scalar: s must be (1,1)");
        let sv = self.data(s).data[0];
        let mut out = self.data(x).clone();
        for v in out.data.iter_mut() {
            *v *= sv;
        }
        let need = self.needs(x) || self.needs(s);
        self.push(out, Op::ScaleByScalar { x, s }, need)
    }

    pub fn recip(&mut self, x: Tid) -> Tid {
        let mut out = self.data(x).clone();
        for v in out.data.iter_mut() {
            *v = 1.0 / *v;
        }
        let need = self.needs(x);
        self.push(out, Op::Recip { x }, need)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Tid) -> Tid {
        let mut out = self.data(x).clone();
        for v in out.data.iter_mut() {
            *v = gelu_val(*v);
        }
        let need = self.needs(x);
        self.push(out, Op::Gelu { x }, need)
    }

    pub fn sigmoid(&mut self, x: Tid) -> Tid {
        let mut out = self.data(x).clone();
        for v in out.data.iter_mut() {
            *v = sigmoid_val(*v);
        }
        let need = self.needs(x);
        self.push(out, Op::Sigmoid { x }, need)
    }

    /// Row-wise softmax with max subtraction; exact zeros for entries masked
    /// with [`Tape::causal_mask`]-style additive -1e30.
    pub fn softmax_rows(&mut self, x: Tid) -> Tid {
        let xm = self.data(x);
        let mut out = Mat::zeros(xm.rows, xm.cols);
        for i in 0..xm.rows {
            softmax_row(xm.row(i), out.row_mut(i));
        }
        let need = self.needs(x);
        self.push(out, Op::SoftmaxRows { x }, need)
    }

    /// Per-row layer norm with affine (gamma, beta are (1, c)), biased variance.
    pub fn layer_norm(&mut self, x: Tid, gamma: Tid, beta: Tid, eps: f64) -> Tid {
        let (_, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c), "layer_norm: gamma shape");
        assert_eq!(self.shape(beta), (1, c), "layer_norm: beta shape");
        let xm = self.data(x);
        let g = &self.data(gamma).data;
        let b = &self.data(beta).data;
        let mut out = Mat::zeros(xm.rows, xm.cols);
        for i in 0..xm.rows {
            let row = xm.row(i);
            let (mu, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out.data[i * c + j] = g[j] * (row[j] - mu) * inv + b[j];
            }
        }
        let need = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, eps }, need)
    }

    pub fn sum_all(&mut self, x: Tid) -> Tid {
        let s: f64 = self.data(x).data.iter().sum();
        let need = self.needs(x);
        self.push(Mat::scalar(s), Op::SumAll { x }, need)
    }

    pub fn mean_all(&mut self, x: Tid) -> Tid {
        let m = self.data(x);
        assert!(!m.data.is_empty(), "mean_all: empty tensor");
        let s: f64 = m.data.iter().sum::<f64>() / m.data.len() as f64;
        let need = self.needs(x);
        self.push(Mat::scalar(s), Op::MeanAll { x }, need)
    }

    /// Rows r0..r1 (half-open).
    pub fn slice_rows(&mut self, x: Tid, r0: usize, r1: usize) -> Tid {
        let (r, c) = self.shape(x);
        assert!(r0 <= r1 && r1 <= r, "slice_rows: {r0}..{r1} of {r}");
        let xm = self.data(x);
        let out = Mat::from_vec(r1 - r0, c, xm.data[r0 * c..r1 * c].to_vec());
        let need = self.needs(x);
        self.push(out, Op::SliceRows { x, r0 }, need)
    }

    /// Columns c0..c1 (half-open).
    pub fn slice_cols(&mut self, x: Tid, c0: usize, c1: usize) -> Tid {
        let (r, c) = self.shape(x);
        assert!(c0 <= c1 && c1 <= c, "slice_cols: {c0}..{c1} of {c}");
        let xm = self.data(x);
        let mut out = Mat::zeros(r, c1 - c0);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&xm.row(i)[c0..c1]);
        }
        let need = self.needs(x);
        self.push(out, Op::SliceCols { x, c0 }, need)
    }

    pub fn concat_rows(&mut self, parts: &[Tid]) -> Tid {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut need = false;
        for &p in parts {
            assert_eq!(self.shape(p).1, c, "concat_rows: column mismatch");
            data.extend_from_slice(&self.data(p).data);
            need |= self.needs(p);
        }
        let rows = data.len() / c.max(1);
        let out = Mat::from_vec(rows, c, data);
        self.push(out, Op::ConcatRows { parts: parts.to_vec() }, need)
    }

    pub fn concat_cols(&mut self, parts: &[Tid]) -> Tid {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let r = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Mat::zeros(r, total);
        let mut need = false;
        let mut off = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            assert_eq!(pr, r, "concat_cols: row mismatch");
            for i in 0..r {
                out.row_mut(i)[off..off + pc].copy_from_slice(self.data(p).row(i));
            }
            off += pc;
            need |= self.needs(p);
        }
        self.push(out, Op::ConcatCols { parts: parts.to_vec() }, need)
    }

    /// Stack a (1, c) row n times into (n, c).
    pub fn repeat_row(&mut self, row: Tid, n: usize) -> Tid {
        let (r, c) = self.shape(row);
        assert_eq!(r, 1, "repeat_row: input must be (1, c)");
        let src = self.data(row).data.clone();
        let mut out = Mat::zeros(n, c);
        for i in 0..n {
            out.row_mut(i).copy_from_slice(&src);
        }
        let need = self.needs(row);
        self.push(out, Op::RepeatRow { row, n }, need)
    }

    /// Out row i = x row idx[i]; duplicate indices allowed (embedding lookup).
    pub fn gather_rows(&mut self, x: Tid, idx: &[usize]) -> Tid {
        let (r, c) = self.shape(x);
        let mut out = Mat::zeros(idx.len(), c);
        for (i, &ix) in idx.iter().enumerate() {
            assert!(ix < r, "gather_rows: index {ix} out of {r}");
            let src = self.data(x).row(ix).to_vec();
            out.row_mut(i).copy_from_slice(&src);
        }
        let need = self.needs(x);
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, need)
    }

    /// Sum over rows of label-smoothed negative log-likelihood.
    /// Targets are class indices per row; smoothing 0 gives plain NLL.
    pub fn cross_entropy_sum(&mut self, logits: Tid, targets: &[usize], smoothing: f64) -> Tid {
        let (r, v) = self.shape(logits);
        assert_eq!(r, targets.len(), "cross_entropy_sum: target count");
        assert!((0.0..1.0).contains(&smoothing), "cross_entropy_sum: smoothing in [0,1)");
        let xm = self.data(logits);
        let mut probs = Mat::zeros(r, v);
        let mut loss = 0.0;
        for i in 0..r {
            let t = targets[i];
            assert!(t < v, "cross_entropy_sum: target {t} out of {v}");
            let row = xm.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for j in 0..v {
                let logp = row[j] - lse;
                probs.data[i * v + j] = logp.exp();
                let q = if j == t { 1.0 - smoothing + smoothing / v as f64 } else { smoothing / v as f64 };
                if q != 0.0 {
                    loss -= q * logp;
                }
            }
        }
        let need = self.needs(logits);
        self.push(
            Mat::scalar(loss),
            Op::CrossEntropySum { logits, targets: targets.to_vec(), smoothing, probs },
            need,
        )
    }

    /// Per-row cosine similarity between same-shape matrices, output (n, 1).
    /// A row with (near-)zero norm on either side yields 0 with zero gradient.
    pub fn cosine_rows(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "cosine_rows: shape mismatch");
        let (r, _) = self.shape(a);
        let am = self.data(a);
        let bm = self.data(b);
        let mut out = Mat::zeros(r, 1);
        for i in 0..r {
            out.data[i] = cosine_val(am.row(i), bm.row(i));
        }
        let need = self.needs(a) || self.needs(b);
        self.push(out, Op::CosineRows { a, b }, need)
    }

    /// Sum over entries of KL(Bernoulli(p_i) || Bernoulli(q_i)); both sides
    /// clamped into [eps, 1-eps]. Gradient is zero where the clamp is active.
    pub fn bernoulli_kl_sum(&mut self, p: Tid, q: Tid, eps: f64) -> Tid {
        assert_eq!(self.shape(p), self.shape(q), "bernoulli_kl_sum: shape mismatch");
        let pm = self.data(p);
        let qm = self.data(q);
        let mut loss = 0.0;
        for (&pv, &qv) in pm.data.iter().zip(&qm.data) {
            let pc = pv.clamp(eps, 1.0 - eps);
            let qc = qv.clamp(eps, 1.0 - eps);
            loss += pc * (pc / qc).ln() + (1.0 - pc) * ((1.0 - pc) / (1.0 - qc)).ln();
        }
        let need = self.needs(p) || self.needs(q);
        self.push(Mat::scalar(loss), Op::BernoulliKlSum { p, q, eps }, need)
    }

    /// Integrate-and-fire: accumulate per-frame weights `alpha` (T, 1) to the
    /// threshold `beta`, splitting a frame's weight across units where the
    /// accumulator crosses, and emit each unit as its weighted sum of frame
    /// vectors `a` (T, d) divided by beta.
    pub fn cif_integrate(&mut self, alpha: Tid, a: Tid, beta: f64, mode: CifMode) -> (Tid, CifAux) {
        let (t, one) = self.shape(alpha);
        let (ta, d) = self.shape(a);
        assert_eq!(one, 1, "cif_integrate: alpha must be (T, 1)");
        assert_eq!(t, ta, "cif_integrate: alpha/a length mismatch");
        assert!(beta > 0.0, "cif_integrate: beta must be positive");
        let (pieces, aux) = cif_pieces(&self.data(alpha).data, beta, mode);
        let am = self.data(a);
        let mut states = Mat::zeros(aux.units, d);
        for p in &pieces {
            let w = p.weight / beta;
            let src = am.row(p.frame as usize);
            let dst = states.row_mut(p.unit as usize);
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += w * v;
            }
        }
        let need = self.needs(alpha) || self.needs(a);
        let id = self.push(states, Op::CifIntegrate { alpha, a, beta, pieces }, need);
        (id, aux)
    }

    /// (n, m) additive causal mask: 0 at or below the diagonal, -1e30 above.
    pub fn causal_mask(&mut self, n: usize) -> Tid {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                m.data[i * n + j] = NEG_INF_MASK;
            }
        }
        self.constant(m)
    }

    // ── Backward ──

    /// Reverse pass from a scalar root. Gradients are accumulated only into
    /// nodes that need them; internal-node gradients are freed as soon as
    /// their parents have been served.
    pub fn backward(&self, root: Tid) -> Grads {
        assert!(self.grad_enabled, "backward on a forward-only tape");
        assert!(self.data(root).is_scalar(), "backward root must be scalar");
        assert!(self.needs(root), "backward root does not depend on any trainable leaf");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::scalar(1.0));
        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let g = grads[id].take().expect("grad present");
            self.backprop_node(id, &g, &mut grads);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Mat>], id: Tid, f: impl FnOnce(&mut Mat)) {
        if !self.needs(id) {
            return;
        }
        let (r, c) = self.shape(id);
        let slot = grads[id.0].get_or_insert_with(|| Mat::zeros(r, c));
        f(slot);
    }

    fn backprop_node(&self, id: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.shape(*a);
                let (_, n) = self.shape(*b);
                if self.needs(*a) {
                    let bd = &self.data(*b).data;
                    self.acc(grads, *a, |da| {
                        matmul_nt_into(&g.data, bd, m, n, k, &mut da.data);
                    });
                }
                if self.needs(*b) {
                    let ad = &self.data(*a).data;
                    self.acc(grads, *b, |db| {
                        matmul_tn_into(ad, &g.data, m, k, n, &mut db.data);
                    });
                }
            }
            Op::Transpose { x } => {
                let gt = g.transpose();
                self.acc(grads, *x, |dx| dx.add_assign(&gt));
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, |da| da.add_assign(g));
                self.acc(grads, *b, |db| db.add_assign(g));
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, |da| da.add_assign(g));
                self.acc(grads, *b, |db| db.scaled_add(-1.0, g));
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bd = self.data(*b).clone();
                    self.acc(grads, *a, |da| {
                        for ((o, &gv), &bv) in da.data.iter_mut().zip(&g.data).zip(&bd.data) {
                            *o += gv * bv;
                        }
                    });
                }
                if self.needs(*b) {
                    let ad = self.data(*a).clone();
                    self.acc(grads, *b, |db| {
                        for ((o, &gv), &av) in db.data.iter_mut().zip(&g.data).zip(&ad.data) {
                            *o += gv * av;
                        }
                    });
                }
            }
            Op::Square { x } => {
                let xd = self.data(*x).clone();
                self.acc(grads, *x, |dx| {
                    for ((o, &gv), &xv) in dx.data.iter_mut().zip(&g.data).zip(&xd.data) {
                        *o += 2.0 * xv * gv;
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.acc(grads, *x, |dx| dx.scaled_add(c, g));
            }
            Op::AddConst { x } => {
                self.acc(grads, *x, |dx| dx.add_assign(g));
            }
            Op::AddRow { x, row } => {
                self.acc(grads, *x, |dx| dx.add_assign(g));
                if self.needs(*row) {
                    let cols = g.cols;
                    self.acc(grads, *row, |dr| {
                        for i in 0..g.rows {
                            for (o, &gv) in dr.data.iter_mut().zip(&g.data[i * cols..(i + 1) * cols]) {
                                *o += gv;
                            }
                        }
                    });
                }
            }
            Op::ScaleByScalar { x, s } => {
                let sv = self.data(*s).data[0];
                self.acc(grads, *x, |dx| dx.scaled_add(sv, g));
                if self.needs(*s) {
                    let xd = self.data(*x);
                    let dot: f64 = xd.data.iter().zip(&g.data).map(|(x, gv)| x * gv).sum();
                    self.acc(grads, *s, |ds| ds.data[0] += dot);
                }
            }
            Op::Recip { x } => {
                let yd = self.data(Tid(id)).clone();
                self.acc(grads, *x, |dx| {
                    for ((o, &gv), &yv) in dx.data.iter_mut().zip(&g.data).zip(&yd.data) {
                        *o -= gv * yv * yv;
                    }
                });
            }
            Op::Gelu { x } => {
                let xd = self.data(*x).clone();
                self.acc(grads, *x, |dx| {
                    for ((o, &gv), &xv) in dx.data.iter_mut().zip(&g.data).zip(&xd.data) {
                        *o += gv * gelu_grad(xv);
                    }
                });
            }
            Op::Sigmoid { x } => {
                let yd = self.data(Tid(id)).clone();
                self.acc(grads, *x, |dx| {
                    for ((o, &gv), &yv) in dx.data.iter_mut().zip(&g.data).zip(&yd.data) {
                        *o += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                let yd = self.data(Tid(id)).clone();
                self.acc(grads, *x, |dx| {
                    for i in 0..yd.rows {
                        let y = yd.row(i);
                        let gr = &g.data[i * yd.cols..(i + 1) * yd.cols];
                        let dot: f64 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for ((o, &gv), &yv) in
                            dx.row_mut(i).iter_mut().zip(gr).zip(y)
                        {
                            *o += (gv - dot) * yv;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xd = self.data(*x).clone();
                let gd = self.data(*gamma).data.clone();
                let (r, c) = (xd.rows, xd.cols);
                if self.needs(*x) {
                    self.acc(grads, *x, |dx| {
                        for i in 0..r {
                            let row = xd.row(i);
                            let (mu, var) = mean_var(row);
                            let inv = 1.0 / (var + eps).sqrt();
                            let gr = &g.data[i * c..(i + 1) * c];
                            // dy/dxhat = gamma; standard layer-norm backward.
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..c {
                                let xh = (row[j] - mu) * inv;
                                let gg = gr[j] * gd[j];
                                m1 += gg;
                                m2 += gg * xh;
                            }
                            m1 /= c as f64;
                            m2 /= c as f64;
                            for j in 0..c {
                                let xh = (row[j] - mu) * inv;
                                let gg = gr[j] * gd[j];
                                dx.row_mut(i)[j] += (gg - m1 - xh * m2) * inv;
                            }
                        }
                    });
                }
                if self.needs(*gamma) {
                    self.acc(grads, *gamma, |dg| {
                        for i in 0..r {
                            let row = xd.row(i);
                            let (mu, var) = mean_var(row);
                            let inv = 1.0 / (var + eps).sqrt();
                            let gr = &g.data[i * c..(i + 1) * c];
                            for j in 0..c {
                                dg.data[j] += gr[j] * (row[j] - mu) * inv;
                            }
                        }
                    });
                }
                if self.needs(*beta) {
                    self.acc(grads, *beta, |db| {
                        for i in 0..r {
                            for (o, &gv) in db.data.iter_mut().zip(&g.data[i * c..(i + 1) * c]) {
                                *o += gv;
                            }
                        }
                    });
                }
            }
            Op::SumAll { x } => {
                let gv = g.data[0];
                self.acc(grads, *x, |dx| {
                    for o in dx.data.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::MeanAll { x } => {
                let n = self.data(*x).data.len() as f64;
                let gv = g.data[0] / n;
                self.acc(grads, *x, |dx| {
                    for o in dx.data.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::SliceRows { x, r0 } => {
                let c = g.cols;
                let r0 = *r0;
                self.acc(grads, *x, |dx| {
                    for i in 0..g.rows {
                        for (o, &gv) in dx.row_mut(r0 + i).iter_mut().zip(&g.data[i * c..(i + 1) * c]) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::SliceCols { x, c0 } => {
                let c0 = *c0;
                self.acc(grads, *x, |dx| {
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            dx.row_mut(i)[c0 + j] += g.at(i, j);
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut r0 = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    if self.needs(p) {
                        self.acc(grads, p, |dp| {
                            for i in 0..pr {
                                for (o, &gv) in
                                    dp.row_mut(i).iter_mut().zip(&g.data[(r0 + i) * pc..(r0 + i + 1) * pc])
                                {
                                    *o += gv;
                                }
                            }
                        });
                    }
                    r0 += pr;
                }
            }
            Op::ConcatCols { parts } => {
                let mut c0 = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    if self.needs(p) {
                        self.acc(grads, p, |dp| {
                            for i in 0..pr {
                                for j in 0..pc {
                                    dp.row_mut(i)[j] += g.at(i, c0 + j);
                                }
                            }
                        });
                    }
                    c0 += pc;
                }
            }
            Op::RepeatRow { row, n } => {
                let n = *n;
                let c = g.cols;
                self.acc(grads, *row, |dr| {
                    for i in 0..n {
                        for (o, &gv) in dr.data.iter_mut().zip(&g.data[i * c..(i + 1) * c]) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = g.cols;
                let idx = idx.clone();
                self.acc(grads, *x, |dx| {
                    for (i, &ix) in idx.iter().enumerate() {
                        for (o, &gv) in dx.row_mut(ix).iter_mut().zip(&g.data[i * c..(i + 1) * c]) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::CrossEntropySum { logits, targets, smoothing, probs } => {
                let gv = g.data[0];
                let (r, v) = (probs.rows, probs.cols);
                let probs = probs.clone();
                let targets = targets.clone();
                let smoothing = *smoothing;
                self.acc(grads, *logits, |dl| {
                    for i in 0..r {
                        for j in 0..v {
                            let q = if j == targets[i] {
                                1.0 - smoothing + smoothing / v as f64
                            } else {
                                smoothing / v as f64
                            };
                            dl.data[i * v + j] += gv * (probs.data[i * v + j] - q);
                        }
                    }
                });
            }
            Op::CosineRows { a, b } => {
                let am = self.data(*a).clone();
                let bm = self.data(*b).clone();
                let (r, c) = (am.rows, am.cols);
                for (side, this, other) in [(0, *a, &bm), (1, *b, &am)] {
                    if !self.needs(this) {
                        continue;
                    }
                    let me = if side == 0 { &am } else { &bm };
                    self.acc(grads, this, |dm| {
                        for i in 0..r {
                            let x = me.row(i);
                            let y = other.row(i);
                            let nx = norm(x);
                            let ny = norm(y);
                            if nx < COS_NORM_FLOOR || ny < COS_NORM_FLOOR {
                                continue;
                            }
                            let dot: f64 = x.iter().zip(y).map(|(u, v)| u * v).sum();
                            let cosv = dot / (nx * ny);
                            let gv = g.data[i];
                            for j in 0..c {
                                dm.row_mut(i)[j] += gv * (y[j] / (nx * ny) - cosv * x[j] / (nx * nx));
                            }
                        }
                    });
                }
            }
            Op::BernoulliKlSum { p, q, eps } => {
                let gv = g.data[0];
                let eps = *eps;
                let pm = self.data(*p).clone();
                let qm = self.data(*q).clone();
                if self.needs(*p) {
                    self.acc(grads, *p, |dp| {
                        for (i, o) in dp.data.iter_mut().enumerate() {
                            let pv = pm.data[i];
                            if pv <= eps || pv >= 1.0 - eps {
                                continue;
                            }
                            let qc = qm.data[i].clamp(eps, 1.0 - eps);
                            *o += gv * ((pv / qc).ln() - ((1.0 - pv) / (1.0 - qc)).ln());
                        }
                    });
                }
                if self.needs(*q) {
                    self.acc(grads, *q, |dq| {
                        for (i, o) in dq.data.iter_mut().enumerate() {
                            let qv = qm.data[i];
                            if qv <= eps || qv >= 1.0 - eps {
                                continue;
                            }
                            let pc = pm.data[i].clamp(eps, 1.0 - eps);
                            *o += gv * (-pc / qv + (1.0 - pc) / (1.0 - qv));
                        }
                    });
                }
            }
            Op::CifIntegrate { alpha, a, beta, pieces } => {
                let t = self.shape(*alpha).0;
                let am = self.data(*a).clone();
                let beta = *beta;
                let pieces = pieces.clone();
                if self.needs(*a) {
                    self.acc(grads, *a, |da| {
                        for p in &pieces {
                            let w = p.weight / beta;
                            let gi = &g.data[p.unit as usize * g.cols..(p.unit as usize + 1) * g.cols];
                            for (o, &gv) in da.row_mut(p.frame as usize).iter_mut().zip(gi) {
                                *o += w * gv;
                            }
                        }
                    });
                }
                if self.needs(*alpha) {
                    // dL/dS_k first, then dalpha_i = sum_{k >= i} dS_k.
                    let mut ds = vec![0.0; t];
                    for p in &pieces {
                        let i = p.frame as usize;
                        let gi = &g.data[p.unit as usize * g.cols..(p.unit as usize + 1) * g.cols];
                        let gpa: f64 =
                            gi.iter().zip(am.row(i)).map(|(gv, av)| gv * av).sum::<f64>() / beta;
                        if p.d_hi {
                            ds[i] += gpa;
                        }
                        if p.d_lo && i > 0 {
                            ds[i - 1] -= gpa;
                        }
                    }
                    self.acc(grads, *alpha, |dal| {
                        let mut suffix = 0.0;
                        for k in (0..t).rev() {
                            suffix += ds[k];
                            dal.data[k] += suffix;
                        }
                    });
                }
            }
        }
    }
}

const COS_NORM_FLOOR: f64 = 1e-12;

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn cosine_val(x: &[f64], y: &[f64]) -> f64 {
    let nx = norm(x);
    let ny = norm(y);
    if nx < COS_NORM_FLOOR || ny < COS_NORM_FLOOR {
        return 0.0;
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    dot / (nx * ny)
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var)
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn sigmoid_val(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu_val(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Tolerance when testing whether the accumulator reached a threshold, so a
/// forced-scale pass whose weights sum to J up to rounding still fires J times.
const CIF_TOL: f64 = 1e-12;

/// Number of thresholds crossed by the running sum of `alpha` (streaming
/// firing count; no tail unit).
pub fn cif_unit_count(alpha: &[f64], beta: f64) -> usize {
    let s: f64 = alpha.iter().sum();
    ((s + CIF_TOL) / beta).floor().max(0.0) as usize
}

/// Decompose the integrate-and-fire pass into (unit, frame, weight) pieces.
fn cif_pieces(alpha: &[f64], beta: f64, mode: CifMode) -> (Vec<CifPiece>, CifAux) {
    let t = alpha.len();
    let mut s = Vec::with_capacity(t + 1);
    s.push(0.0);
    let mut acc = 0.0;
    for &a in alpha {
        acc += a;
        s.push(acc);
    }
    let total = acc;
    let crossings = cif_unit_count(alpha, beta);

    // (lo, hi, closes_at_end) per unit.
    let mut bounds: Vec<(f64, f64, bool)> = Vec::new();
    match mode {
        CifMode::Streaming => {
            for j in 1..=crossings {
                bounds.push(((j - 1) as f64 * beta, j as f64 * beta, false));
            }
        }
        CifMode::Offline { tail_threshold } => {
            for j in 1..=crossings {
                bounds.push(((j - 1) as f64 * beta, j as f64 * beta, false));
            }
            let residual = total - crossings as f64 * beta;
            if residual >= tail_threshold {
                bounds.push((crossings as f64 * beta, total, true));
            }
        }
        CifMode::ForceUnits(n) => {
            assert!(n >= 1, "cif_integrate: ForceUnits needs n >= 1");
            assert!(t >= 1, "cif_integrate: ForceUnits on empty input");
            assert!(
                total + CIF_TOL >= (n - 1) as f64 * beta,
                "cif_integrate: total weight {total} cannot fill {n} units"
            );
            for j in 1..n {
                bounds.push(((j - 1) as f64 * beta, j as f64 * beta, false));
            }
            bounds.push(((n - 1) as f64 * beta, total, true));
        }
    }

    let units = bounds.len();
    let mut pieces = Vec::with_capacity(t + units);
    let mut boundaries = Vec::with_capacity(units);
    let mut fi = 1usize; // 1-based frame cursor into s
    for (j, &(lo, hi, takes_rest)) in bounds.iter().enumerate() {
        while fi <= t && s[fi] <= lo + CIF_TOL {
            fi += 1;
        }
        let mut ii = fi;
        let mut closed_at = t.saturating_sub(1);
        while ii <= t {
            let hi_eff = if takes_rest { s[t] } else { hi };
            let u = s[ii].min(hi_eff);
            let l = s[ii - 1].max(lo);
            let w = u - l;
            if w > 0.0 {
                pieces.push(CifPiece {
                    unit: j as u32,
                    frame: (ii - 1) as u32,
                    // For a takes-rest unit the upper bound is S_T itself, so
                    // d min(S_i, S_T)/dS_i = 1 throughout (S is nondecreasing).
                    weight: w,
                    d_hi: takes_rest || s[ii] < hi - CIF_TOL,
                    d_lo: s[ii - 1] > lo + CIF_TOL,
                });
            }
            if !takes_rest && s[ii] >= hi - CIF_TOL {
                closed_at = ii - 1;
                break;
            }
            ii += 1;
        }
        if takes_rest {
            closed_at = t.saturating_sub(1);
        }
        boundaries.push(closed_at);
        fi = if takes_rest { t + 1 } else { closed_at + 1 };
    }

    let emitted: f64 = match mode {
        CifMode::Streaming => crossings as f64 * beta,
        CifMode::Offline { .. } | CifMode::ForceUnits(_) => {
            if bounds.last().map(|b| b.2).unwrap_or(false) {
                total
            } else {
                crossings as f64 * beta
            }
        }
    };
    let aux = CifAux {
        boundaries,
        residual: total - emitted,
        units,
        sum_alpha: total,
    };
    (pieces, aux)
}

/// Forward-only integrate-and-fire on plain data (streaming evaluation path).
pub fn cif_forward_plain(alpha: &[f64], a: &Mat, beta: f64, mode: CifMode) -> (Mat, CifAux) {
    assert_eq!(alpha.len(), a.rows, "cif_forward_plain: alpha/a length mismatch");
    let (pieces, aux) = cif_pieces(alpha, beta, mode);
    let mut states = Mat::zeros(aux.units, a.cols);
    for p in &pieces {
        let w = p.weight / beta;
        let src = a.row(p.frame as usize);
        let dst = states.row_mut(p.unit as usize);
        for (o, &v) in dst.iter_mut().zip(src) {
            *o += w * v;
        }
    }
    (states, aux)
}

/// Per-unit contributing weights, exposed for conservation checks:
/// weights[j] lists (frame, weight) for unit j.
pub fn cif_weights(alpha: &[f64], beta: f64, mode: CifMode) -> (Vec<Vec<(usize, f64)>>, CifAux) {
    let (pieces, aux) = cif_pieces(alpha, beta, mode);
    let mut weights = vec![Vec::new(); aux.units];
    for p in &pieces {
        weights[p.unit as usize].push((p.frame as usize, p.weight));
    }
    (weights, aux)
}

// ── Gradient checking ───────────────────────────────────────────────────────

/// Finite-difference gradient verification.
///
/// Builds the graph twice: once with autodiff to get analytic gradients, then
/// re-evaluates the scalar loss with each leaf element nudged by ±h (central
/// differences). The relative error uses `|ad - fd| / max(1, |ad|, |fd|)` so
/// tiny gradients are compared absolutely.
pub mod gradcheck {
    use super::*;

    pub struct GradCheck {
        pub max_rel_err: f64,
        pub checked: usize,
    }

    pub fn check<F>(leaves: &[Mat], h: f64, build: F) -> GradCheck
    where
        F: Fn(&mut Tape, &[Tid]) -> Tid,
    {
        let mut tape = Tape::new(true);
        let ids: Vec<Tid> = leaves.iter().map(|m| tape.leaf(m.clone(), true)).collect();
        let loss = build(&mut tape, &ids);
        assert!(tape.data(loss).is_scalar(), "gradcheck loss must be scalar");
        let grads = tape.backward(loss);

        let eval = |leaves: &[Mat]| -> f64 {
            let mut t = Tape::new(false);
            let ids: Vec<Tid> = leaves.iter().map(|m| t.leaf(m.clone(), false)).collect();
            let l = build(&mut t, &ids);
            t.data(l).data[0]
        };

        let mut max_rel = 0.0f64;
        let mut checked = 0;
        let mut work: Vec<Mat> = leaves.to_vec();
        for (li, leaf) in leaves.iter().enumerate() {
            let ad = grads.get(ids[li]).expect("leaf gradient missing");
            for e in 0..leaf.data.len() {
                let orig = leaf.data[e];
                work[li].data[e] = orig + h;
                let up = eval(&work);
                work[li].data[e] = orig - h;
                let dn = eval(&work);
                work[li].data[e] = orig;
                let fd = (up - dn) / (2.0 * h);
                let a = ad.data[e];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
                if rel > max_rel {
                    max_rel = rel;
                }
                checked += 1;
            }
        }
        GradCheck { max_rel_err: max_rel, checked }
    }
}

/// Convenience: small random matrix for tests, from a tagged stream.
pub fn test_mat(rows: usize, cols: usize, seed: u64, tag: &str) -> Mat {
    let mut rng = component_rng(seed, tag, 0);
    Mat::randn(rows, cols, 1.0, &mut rng)
}
