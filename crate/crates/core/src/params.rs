//! Named parameter storage shared across forward passes.
//!
//! Parameters live outside any tape. A [`Graph`] wraps one tape and lazily
//! binds parameters onto it per forward pass: the first use of a parameter
//! creates a leaf (with `requires_grad` only if the parameter is currently
//! trainable), later uses reuse that leaf. After backward, leaf gradients
//! flow back into the store where the optimizer finds them.

use std::collections::BTreeMap;

use crate::tensor::{Mat, Tape, Tid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

struct Entry {
    name: String,
    data: Mat,
    grad: Option<Mat>,
    trainable: bool,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter; names must be unique. Registration order is the
    /// deterministic iteration order everywhere (checkpoints, optimizer).
    pub fn register(&mut self, name: impl Into<String>, data: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        self.entries.push(Entry { name: name.clone(), data, grad: None, trainable: true });
        let id = self.entries.len() - 1;
        self.index.insert(name, id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].data
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
        if !trainable {
            self.entries[id.0].grad = None;
        }
    }

    /// Toggle every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut() {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
                if !trainable {
                    e.grad = None;
                }
            }
        }
    }

    pub fn accum_grad(&mut self, id: ParamId, g: &Mat) {
        let e = &mut self.entries[id.0];
        assert!(e.trainable, "gradient accumulated into frozen `{}`", e.name);
        match &mut e.grad {
            Some(buf) => buf.add_assign(g),
            None => e.grad = Some(g.clone()),
        }
    }

    pub fn grad(&self, id: ParamId) -> Option<&Mat> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn clear_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad = None;
        }
    }

    /// Scale every accumulated gradient, e.g. by 1/batch for a mean step.
    pub fn scale_grads(&mut self, c: f64) {
        for e in self.entries.iter_mut() {
            if let Some(g) = e.grad.as_mut() {
                for v in g.data.iter_mut() {
                    *v *= c;
                }
            }
        }
    }

    /// Rescale gradients so their global L2 norm is at most `max_norm`.
    /// `max_norm <= 0` disables clipping. Returns the pre-clip norm when a
    /// rescale happened.
    pub fn clip_grads(&mut self, max_norm: f64) -> Option<f64> {
        if max_norm <= 0.0 {
            return None;
        }
        let norm = self.grad_norm();
        if norm <= max_norm {
            return None;
        }
        self.scale_grads(max_norm / norm);
        Some(norm)
    }

    /// Global L2 norm of all accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut s = 0.0;
        for e in &self.entries {
            if let Some(g) = &e.grad {
                s += g.data.iter().map(|v| v * v).sum::<f64>();
            }
        }
        s.sqrt()
    }

    /// Tensors in registration order, for checkpointing.
    pub fn tensors(&self) -> Vec<(String, Mat)> {
        self.entries.iter().map(|e| (e.name.clone(), e.data.clone())).collect()
    }

    /// Overwrite parameter data from named tensors; every parameter must be
    /// covered and shapes must match. Extra tensors (opt.*, meta.*) are
    /// ignored by the caller's filtering.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Mat>) -> crate::Result<()> {
        for e in self.entries.iter_mut() {
            let m = tensors.get(&e.name).ok_or_else(|| {
                crate::Error::data(format!("checkpoint missing tensor `{}`", e.name))
            })?;
            if (m.rows, m.cols) != (e.data.rows, e.data.cols) {
                return Err(crate::Error::data(format!(
                    "tensor `{}` has shape ({}, {}), expected ({}, {})",
                    e.name, m.rows, m.cols, e.data.rows, e.data.cols
                )));
            }
            e.data = m.clone();
        }
        Ok(())
    }

    // Index-based access for the optimizer.
    pub(crate) fn take_grad_at(&mut self, idx: usize) -> Option<Mat> {
        self.entries[idx].grad.take()
    }

    pub(crate) fn data_mut_at(&mut self, idx: usize) -> &mut Mat {
        &mut self.entries[idx].data
    }

    pub(crate) fn name_at(&self, idx: usize) -> &str {
        &self.entries[idx].name
    }

    pub(crate) fn shape_at(&self, idx: usize) -> (usize, usize) {
        let m = &self.entries[idx].data;
        (m.rows, m.cols)
    }

    /// FNV-1a over names, shapes and raw bits; for freeze verification.
    pub fn fingerprint_prefix(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for e in &self.entries {
            if !e.name.starts_with(prefix) {
                continue;
            }
            mix(e.name.as_bytes());
            mix(&(e.data.rows as u64).to_le_bytes());
            mix(&(e.data.cols as u64).to_le_bytes());
            for v in &e.data.data {
                mix(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// One forward (and optional backward) pass over a tape with lazy parameter
/// binding.
pub struct Graph {
    pub tape: Tape,
    bound: Vec<Option<Tid>>,
}

impl Graph {
    pub fn train(ps: &ParamStore) -> Self {
        Graph { tape: Tape::new(true), bound: vec![None; ps.len()] }
    }

    pub fn eval(ps: &ParamStore) -> Self {
        Graph { tape: Tape::new(false), bound: vec![None; ps.len()] }
    }

    /// Wrap an existing tape (e.g. inside a finite-difference probe).
    pub fn over(tape: Tape, ps: &ParamStore) -> Self {
        Graph { tape, bound: vec![None; ps.len()] }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    /// Bind a parameter onto the tape (cached per graph).
    pub fn p(&mut self, ps: &ParamStore, id: ParamId) -> Tid {
        if let Some(t) = self.bound[id.0] {
            return t;
        }
        let t = self.tape.leaf(ps.get(id).clone(), ps.is_trainable(id));
        self.bound[id.0] = t.into();
        t
    }

    pub fn constant(&mut self, m: Mat) -> Tid {
        self.tape.constant(m)
    }

    /// Backward from a scalar loss; accumulate gradients of bound trainable
    /// parameters into the store. Returns the loss value.
    pub fn backward_into(&mut self, loss: Tid, ps: &mut ParamStore) -> f64 {
        let val = self.tape.data(loss).data[0];
        let grads = self.tape.backward(loss);
        for (idx, slot) in self.bound.iter().enumerate() {
            let Some(tid) = slot else { continue };
            if !ps.is_trainable(ParamId(idx)) {
                continue;
            }
            if let Some(g) = grads.get(*tid) {
                ps.accum_grad(ParamId(idx), g);
            }
        }
        val
    }
}
