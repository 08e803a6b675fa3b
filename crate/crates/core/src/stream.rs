//! Wait-k streaming inference. A session alternates READ (consume a fixed
//! audio chunk, re-encode the prefix, recount detected units) and WRITE
//! (emit one greedy token over the unit representations of the current
//! prefix), writing whenever the unit lead over the output reaches k. With
//! future-aware inference enabled, each mid-stream encode appends mask
//! embeddings so the kept prefix rows are computed with simulated future
//! context. Emitted tokens are never retracted.

use crate::corpus::{Utterance, FRAME_MS};
use crate::metrics::{self, MetricReport, TraceRecord};
use crate::model::StModel;
use crate::params::ParamStore;
use crate::tensor::{cif_forward_plain, CifMode, Mat};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamPolicy {
    /// Wait lagging, counted in detected acoustic units.
    pub k: usize,
    /// Mask embeddings appended per mid-stream encode.
    pub m: usize,
    /// Discard rate for mask-position rows; 1.0 keeps none.
    pub p: f64,
    pub chunk_frames: usize,
    pub fai_enabled: bool,
}

impl StreamPolicy {
    pub fn baseline(k: usize, chunk_frames: usize) -> Self {
        StreamPolicy { k, m: 0, p: 1.0, chunk_frames, fai_enabled: false }
    }

    pub fn fai(k: usize, m: usize, p: f64, chunk_frames: usize) -> Self {
        StreamPolicy { k, m, p, chunk_frames, fai_enabled: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::contract("wait-k requires k >= 1"));
        }
        if self.chunk_frames == 0 {
            return Err(Error::contract("chunk size must be >= 1 frame"));
        }
        if !(0.0..=1.0).contains(&self.p) || !self.p.is_finite() {
            return Err(Error::contract(format!("discard rate p={} outside [0, 1]", self.p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Read,
    Write(u32),
    Done,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub hyp: Vec<u32>,
    pub delays_ms: Vec<f64>,
    pub truncated: bool,
}

pub struct Session<'a> {
    model: &'a StModel,
    ps: &'a ParamStore,
    policy: StreamPolicy,
    frames: Mat,
    consumed: usize,
    n_units: usize,
    y: Vec<u32>,
    delays: Vec<f64>,
    enc: Option<Mat>,
    alphas: Vec<f64>,
    memory: Option<Mat>,
    max_len: usize,
    truncated: bool,
    finished: bool,
}

impl<'a> Session<'a> {
    pub fn new(
        model: &'a StModel,
        ps: &'a ParamStore,
        utt: &Utterance,
        policy: StreamPolicy,
    ) -> Result<Self> {
        policy.validate()?;
        let frames = utt.frames_mat();
        if frames.rows == 0 {
            return Err(Error::contract("cannot stream an utterance with no audio"));
        }
        let max_len = 2 * frames.rows.div_ceil(model.acoustic.stride) + 5;
        Ok(Session {
            model,
            ps,
            policy,
            frames,
            consumed: 0,
            n_units: 0,
            y: Vec::new(),
            delays: Vec::new(),
            enc: None,
            alphas: Vec::new(),
            memory: None,
            max_len,
            truncated: false,
            finished: false,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn emitted(&self) -> &[u32] {
        &self.y
    }

    pub fn delays_ms(&self) -> &[f64] {
        &self.delays
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    /// CIF units detected in the current prefix encoding.
    pub fn detected_units(&self) -> usize {
        self.n_units
    }

    pub fn consumed_frames(&self) -> usize {
        self.consumed
    }

    /// Rows of the encoding the decoder currently sees (after any mask-row
    /// discard). None before the first successful encode.
    pub fn encoded_rows(&self) -> Option<usize> {
        self.enc.as_ref().map(|e| e.rows)
    }

    pub fn source_exhausted(&self) -> bool {
        self.exhausted()
    }

    fn exhausted(&self) -> bool {
        self.consumed == self.frames.rows
    }

    /// Re-encode the consumed prefix and recount detected units. Mid-stream
    /// only complete conv windows are kept (their outputs never change as
    /// audio arrives); at exhaustion the padded tail window joins in.
    fn refresh_encoding(&mut self) -> Result<()> {
        self.memory = None;
        self.enc = None;
        self.alphas.clear();
        self.n_units = 0;
        let c = if self.exhausted() {
            self.model.speech_tokens(self.ps, &self.frames)?
        } else {
            let stable = self.model.acoustic.stable_tokens(self.consumed);
            if stable == 0 {
                return Ok(());
            }
            let prefix = rows_prefix(&self.frames, self.consumed);
            let mut c = self.model.speech_tokens(self.ps, &prefix)?;
            c = rows_prefix(&c, stable);
            c
        };
        let a = if self.policy.fai_enabled && !self.exhausted() {
            let a = self.model.acoustic_fai_plain(self.ps, &c, self.policy.m, self.policy.p);
            if self.policy.p == 1.0 {
                debug_assert_eq!(a.rows, c.rows, "p=1.0 must discard every mask row");
            }
            a
        } else {
            self.model.acoustic_plain(self.ps, &c)
        };
        self.alphas = self.model.cif.alphas_plain(self.ps, &a);
        self.n_units = self.model.cif.streaming_count(&self.alphas);
        self.enc = Some(a);
        Ok(())
    }

    fn ensure_memory(&mut self) -> Result<&Mat> {
        if self.memory.is_none() {
            let a = self.enc.as_ref().expect("WRITE before any unit was detected");
            let mode = if self.exhausted() {
                CifMode::Offline { tail_threshold: self.model.cif.tail_threshold }
            } else {
                CifMode::Streaming
            };
            let (h, _aux) = cif_forward_plain(&self.alphas, a, self.model.cif.beta, mode);
            if self.exhausted() {
                // Same output cap as offline decoding; mid-stream emissions
                // never exceed the final unit count, so this only tightens.
                self.max_len = 2 * h.rows + 5;
            }
            self.memory = Some(self.model.semantic_plain(self.ps, &h));
        }
        Ok(self.memory.as_ref().unwrap())
    }

    pub fn step(&mut self) -> Result<Action> {
        if self.finished {
            return Err(Error::contract("session_step called after DONE"));
        }
        if !self.exhausted() && self.n_units < self.y.len() + self.policy.k {
            self.consumed = (self.consumed + self.policy.chunk_frames).min(self.frames.rows);
            self.refresh_encoding()?;
            return Ok(Action::Read);
        }
        if !self.exhausted() {
            debug_assert!(self.n_units >= self.y.len() + self.policy.k);
        }
        let consumed = self.consumed;
        let memory = self.ensure_memory()?;
        if memory.rows == 0 {
            self.finished = true;
            return Ok(Action::Done);
        }
        let memory = memory.clone();
        let tok = self.model.greedy_next(self.ps, &memory, &self.y);
        if tok == self.model.eos() {
            self.finished = true;
            return Ok(Action::Done);
        }
        self.y.push(tok);
        self.delays.push(consumed as f64 * FRAME_MS);
        if self.y.len() >= self.max_len {
            self.truncated = true;
            self.finished = true;
        }
        Ok(Action::Write(tok))
    }
}

fn rows_prefix(m: &Mat, n: usize) -> Mat {
    assert!(n <= m.rows);
    Mat { rows: n, cols: m.cols, data: m.data[..n * m.cols].to_vec() }
}

/// Run one session to completion.
pub fn run_session(
    model: &StModel,
    ps: &ParamStore,
    utt: &Utterance,
    policy: StreamPolicy,
) -> Result<SessionResult> {
    let mut session = Session::new(model, ps, utt, policy)?;
    while !session.is_finished() {
        session.step()?;
    }
    Ok(SessionResult {
        hyp: session.y,
        delays_ms: session.delays,
        truncated: session.truncated,
    })
}

/// Run one session and package it as a scoreable trace.
pub fn run_trace(
    model: &StModel,
    ps: &ParamStore,
    utt: &Utterance,
    policy: StreamPolicy,
    mode: &str,
) -> Result<TraceRecord> {
    let res = run_session(model, ps, utt, policy)?;
    Ok(TraceRecord {
        id: utt.id.clone(),
        src_ms: utt.duration_ms(),
        delays_ms: res.delays_ms,
        hyp: res.hyp,
        ref_tokens: utt.tgt_tokens.clone(),
        k: policy.k,
        m: policy.m,
        p: policy.p,
        mode: mode.to_string(),
        truncated: res.truncated,
    })
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub k: usize,
    pub report: MetricReport,
    pub traces: Vec<TraceRecord>,
}

/// Evaluate one policy family across a list of k values. Rows come back
/// sorted by k.
pub fn sweep(
    model: &StModel,
    ps: &ParamStore,
    utts: &[Utterance],
    k_list: &[usize],
    base: StreamPolicy,
    mode: &str,
) -> Result<Vec<SweepRow>> {
    let mut ks: Vec<usize> = k_list.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut rows = Vec::with_capacity(ks.len());
    for k in ks {
        let policy = StreamPolicy { k, ..base };
        let mut traces = Vec::with_capacity(utts.len());
        for utt in utts {
            traces.push(run_trace(model, ps, utt, policy, mode)?);
        }
        let report = metrics::report(&traces);
        rows.push(SweepRow { k, report, traces });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::corpus::{generate, SynthConfig};

    fn tiny_setup() -> (StModel, ParamStore, Vec<Utterance>) {
        let mut cfg = ModelConfig::default();
        cfg.d_model = 16;
        cfg.d_ff = 32;
        cfg.n_heads = 2;
        cfg.acoustic_layers = 1;
        cfg.semantic_layers = 1;
        cfg.decoder_layers = 1;
        let mut ps = ParamStore::new();
        let model = StModel::new(&cfg, &mut ps, 77);
        let mut scfg = SynthConfig::default();
        scfg.d_in = cfg.d_in;
        let utts = generate(&scfg, 5, "stream-test", 4);
        (model, ps, utts)
    }

    #[test]
    fn policy_validation_rejects_bad_fields() {
        assert!(StreamPolicy::baseline(0, 2).validate().is_err());
        assert!(StreamPolicy { chunk_frames: 0, ..StreamPolicy::baseline(1, 2) }
            .validate()
            .is_err());
        assert!(StreamPolicy { p: 1.5, ..StreamPolicy::fai(1, 4, 1.0, 2) }.validate().is_err());
        assert!(StreamPolicy::fai(3, 20, 0.5, 2).validate().is_ok());
    }

    #[test]
    fn session_emits_monotone_bounded_delays_and_refuses_steps_after_done() {
        let (model, ps, utts) = tiny_setup();
        for utt in &utts {
            let mut session =
                Session::new(&model, &ps, utt, StreamPolicy::baseline(1, 2)).unwrap();
            let mut saw_done = false;
            let mut prefix: Vec<u32> = Vec::new();
            while !session.is_finished() {
                let before = session.emitted().to_vec();
                match session.step().unwrap() {
                    Action::Read => assert_eq!(session.emitted(), &before[..]),
                    Action::Write(t) => {
                        prefix.push(t);
                        assert_eq!(session.emitted(), &prefix[..]);
                    }
                    Action::Done => saw_done = true,
                }
            }
            assert!(saw_done || session.truncated());
            let delays = session.delays_ms();
            assert_eq!(delays.len(), session.emitted().len());
            let src_ms = utt.duration_ms();
            let mut prev = 0.0;
            for &d in delays {
                assert!(d > 0.0 && d <= src_ms);
                assert!(d >= prev);
                prev = d;
            }
            let err = session.step().unwrap_err().to_string();
            assert!(err.contains("after DONE"), "got: {err}");
        }
    }

    #[test]
    fn huge_k_reduces_to_offline_greedy_with_ap_one() {
        let (model, ps, utts) = tiny_setup();
        for utt in &utts {
            for policy in [
                StreamPolicy::baseline(1_000_000, 2),
                StreamPolicy::fai(1_000_000, 8, 1.0, 2),
            ] {
                let res = run_session(&model, &ps, utt, policy).unwrap();
                let offline = model.decode_offline(&ps, utt).unwrap();
                assert_eq!(res.hyp, offline);
                if !res.hyp.is_empty() {
                    let ap =
                        metrics::average_proportion(utt.duration_ms(), &res.delays_ms).unwrap();
                    assert_eq!(ap, 1.0);
                }
            }
        }
    }

    #[test]
    fn fai_with_zero_masks_matches_vanilla_wait_k_exactly() {
        let (model, ps, utts) = tiny_setup();
        for utt in &utts {
            let b = run_session(&model, &ps, utt, StreamPolicy::baseline(2, 2)).unwrap();
            let f = run_session(&model, &ps, utt, StreamPolicy::fai(2, 0, 1.0, 2)).unwrap();
            assert_eq!(b, f);
        }
    }

    #[test]
    fn fai_masks_change_midstream_encodings_but_keep_row_counts() {
        let (model, ps, utts) = tiny_setup();
        let utt = &utts[0];
        // Halfway prefix, stable rows only.
        let half = (utt.n_frames() / 2).max(model.acoustic.stride);
        let stable = model.acoustic.stable_tokens(half);
        let prefix = rows_prefix(&utt.frames_mat(), half);
        let c_full = model.speech_tokens(&ps, &prefix).unwrap();
        let c = rows_prefix(&c_full, stable);
        let plain = model.acoustic_plain(&ps, &c);
        let fai = model.acoustic_fai_plain(&ps, &c, 8, 1.0);
        assert_eq!(fai.rows, plain.rows);
        assert!(fai.data.iter().zip(&plain.data).any(|(a, b)| a != b));
        // p = 0 keeps every appended row.
        let kept = model.acoustic_fai_plain(&ps, &c, 8, 0.0);
        assert_eq!(kept.rows, plain.rows + 8);
    }

    #[test]
    fn write_before_exhaustion_respects_unit_lead() {
        let (model, ps, utts) = tiny_setup();
        for k in [1usize, 2, 3] {
            for utt in &utts {
                let mut session =
                    Session::new(&model, &ps, utt, StreamPolicy::baseline(k, 2)).unwrap();
                while !session.is_finished() {
                    let exhausted_before = session.exhausted();
                    let n_before = session.n_units;
                    let len_before = session.emitted().len();
                    if let Action::Write(_) = session.step().unwrap() {
                        if !exhausted_before {
                            assert!(n_before >= len_before + k);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sessions_are_deterministic_and_sweep_sorts_rows() {
        let (model, ps, utts) = tiny_setup();
        let base = StreamPolicy::fai(1, 4, 1.0, 2);
        let rows1 = sweep(&model, &ps, &utts, &[3, 1, 9], base, "fai").unwrap();
        let rows2 = sweep(&model, &ps, &utts, &[1, 3, 9], base, "fai").unwrap();
        let ks: Vec<usize> = rows1.iter().map(|r| r.k).collect();
        assert_eq!(ks, vec![1, 3, 9]);
        for (a, b) in rows1.iter().zip(&rows2) {
            assert_eq!(a.traces, b.traces);
            assert_eq!(a.report.bleu.to_bits(), b.report.bleu.to_bits());
        }
        // Delays never decrease when k grows.
        for (lo, hi) in rows1.iter().zip(rows1.iter().skip(1)) {
            for (a, b) in lo.traces.iter().zip(&hi.traces) {
                let n = a.delays_ms.len().min(b.delays_ms.len());
                for j in 0..n {
                    assert!(b.delays_ms[j] >= a.delays_ms[j] - 1e-12);
                }
            }
        }
    }
}
