//! Quality and latency metrics over streaming delay traces: smoothed corpus
//! BLEU-4, Average Lagging, Average Proportion, and Differentiable Average
//! Lagging, plus the trace JSONL format they consume.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BLEU_EPS: f64 = 1e-9;

fn is_false(b: &bool) -> bool {
    !*b
}

/// One streamed utterance: token delays (ms of source consumed when each
/// hypothesis token was emitted) plus everything needed to score it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub src_ms: f64,
    pub delays_ms: Vec<f64>,
    pub hyp: Vec<u32>,
    #[serde(rename = "ref")]
    pub ref_tokens: Vec<u32>,
    pub k: usize,
    pub m: usize,
    pub p: f64,
    pub mode: String,
    #[serde(default, skip_serializing_if = "is_false")]
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub al_ms: f64,
    pub ap: f64,
    pub dal_ms: f64,
    /// All traces seen.
    pub n_utterances: usize,
    /// Traces with at least one emitted token (the latency means' population).
    pub n_scored: usize,
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut map: HashMap<&[u32], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

fn bleu_stats(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> ([u64; 4], [u64; 4], u64, u64) {
    let mut num = [0u64; 4];
    let mut den = [0u64; 4];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len() as u64;
        ref_len += r.len() as u64;
        for n in 1..=4usize {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            den[n - 1] += h.len().saturating_sub(n - 1) as u64;
            for (gram, count) in hc {
                num[n - 1] += (*rc.get(gram).unwrap_or(&0)).min(count) as u64;
            }
        }
    }
    (num, den, hyp_len, ref_len)
}

/// Corpus BLEU-4 over token ids: clipped n-gram precisions with add-ε
/// smoothing for zero counts, geometric mean, exponential brevity penalty.
pub fn corpus_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
    assert_eq!(hyps.len(), refs.len(), "hypothesis/reference count mismatch");
    if hyps.is_empty() {
        return 0.0;
    }
    let (num, den, hyp_len, ref_len) = bleu_stats(hyps, refs);
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if den[n] == 0 {
            BLEU_EPS
        } else if num[n] == 0 {
            BLEU_EPS / den[n] as f64
        } else {
            num[n] as f64 / den[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    100.0 * bp * (log_sum / 4.0).exp()
}

/// Average Lagging in ms. γ = |y|/src_ms; τ* is the first token that saw the
/// whole source (else |y|); AL = (1/τ*) Σ_{j≤τ*} [g(j) − (j−1)/γ].
pub fn average_lagging(src_ms: f64, delays_ms: &[f64]) -> Option<f64> {
    let n = delays_ms.len();
    if n == 0 || src_ms <= 0.0 {
        return None;
    }
    let gamma = n as f64 / src_ms;
    let tau = delays_ms
        .iter()
        .position(|&g| g >= src_ms)
        .map(|i| i + 1)
        .unwrap_or(n);
    let sum: f64 = delays_ms[..tau]
        .iter()
        .enumerate()
        .map(|(j0, &g)| g - j0 as f64 / gamma)
        .sum();
    Some(sum / tau as f64)
}

/// Average Proportion: Σ g(j) / (src_ms · |y|), in (0, 1] for valid traces.
pub fn average_proportion(src_ms: f64, delays_ms: &[f64]) -> Option<f64> {
    let n = delays_ms.len();
    if n == 0 || src_ms <= 0.0 {
        return None;
    }
    Some(delays_ms.iter().sum::<f64>() / (src_ms * n as f64))
}

/// Differentiable Average Lagging: d′_0 = 0,
/// d′_j = max(g(j), d′_{j−1} + 1/γ), DAL = (1/|y|) Σ_j [d′_j − (j−1)/γ].
pub fn differentiable_average_lagging(src_ms: f64, delays_ms: &[f64]) -> Option<f64> {
    let n = delays_ms.len();
    if n == 0 || src_ms <= 0.0 {
        return None;
    }
    let inv_gamma = src_ms / n as f64;
    let mut d_prev = 0.0f64;
    let mut sum = 0.0;
    for (j0, &g) in delays_ms.iter().enumerate() {
        let d = g.max(d_prev + inv_gamma);
        sum += d - j0 as f64 * inv_gamma;
        d_prev = d;
    }
    Some(sum / n as f64)
}

/// Aggregate a set of traces: corpus BLEU over all pairs; latency metrics
/// averaged over traces with at least one token. With no scored traces the
/// latency fields are NaN.
pub fn report(traces: &[TraceRecord]) -> MetricReport {
    let hyps: Vec<Vec<u32>> = traces.iter().map(|t| t.hyp.clone()).collect();
    let refs: Vec<Vec<u32>> = traces.iter().map(|t| t.ref_tokens.clone()).collect();
    let bleu = corpus_bleu(&hyps, &refs);
    let mut al = 0.0;
    let mut ap = 0.0;
    let mut dal = 0.0;
    let mut scored = 0usize;
    for t in traces {
        let (Some(a), Some(p), Some(d)) = (
            average_lagging(t.src_ms, &t.delays_ms),
            average_proportion(t.src_ms, &t.delays_ms),
            differentiable_average_lagging(t.src_ms, &t.delays_ms),
        ) else {
            continue;
        };
        al += a;
        ap += p;
        dal += d;
        scored += 1;
    }
    let norm = |x: f64| if scored > 0 { x / scored as f64 } else { f64::NAN };
    MetricReport {
        bleu,
        al_ms: norm(al),
        ap: norm(ap),
        dal_ms: norm(dal),
        n_utterances: traces.len(),
        n_scored: scored,
    }
}

pub fn write_traces_jsonl(path: &Path, traces: &[TraceRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for t in traces {
        serde_json::to_writer(&mut buf, t)?;
        buf.write_all(b"\n")?;
    }
    crate::ckpt::write_atomic(path, &buf)
}

pub fn read_traces_jsonl(path: &Path) -> Result<Vec<TraceRecord>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// The metrics CSV consumed by plotting: one row per configuration.
pub fn metrics_csv(rows: &[(usize, usize, f64, String, MetricReport)]) -> String {
    let mut s = String::from("k,m,p,mode,BLEU,AL,AP,DAL\n");
    for (k, m, p, mode, r) in rows {
        s.push_str(&format!(
            "{k},{m},{p},{mode},{bleu:.6},{al:.6},{ap:.6},{dal:.6}\n",
            bleu = r.bleu,
            al = r.al_ms,
            ap = r.ap,
            dal = r.dal_ms,
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(v: &[u32]) -> Vec<u32> {
        v.to_vec()
    }

    #[test]
    fn bleu_identity_and_degenerate_cases() {
        let refs = vec![toks(&[1, 2, 3, 4, 5]), toks(&[9, 8, 7])];
        assert_eq!(corpus_bleu(&refs, &refs), 100.0);
        let empties = vec![vec![], vec![]];
        assert_eq!(corpus_bleu(&empties, &refs), 0.0);
        assert_eq!(corpus_bleu(&[], &[]), 0.0);
    }

    #[test]
    fn bleu_hand_example_matches_closed_form() {
        let hyps = vec![toks(&[1, 2, 3, 4])];
        let refs = vec![toks(&[1, 2, 3, 4, 5])];
        let expect = 100.0 * (-0.25f64).exp();
        assert!((corpus_bleu(&hyps, &refs) - expect).abs() < 1e-9);
    }

    #[test]
    fn bleu_is_permutation_invariant_and_matching_pairs_add_numerators() {
        let hyps = vec![toks(&[1, 2, 3]), toks(&[4, 5]), toks(&[6, 7, 8, 9])];
        let refs = vec![toks(&[1, 2, 4]), toks(&[4, 5, 6]), toks(&[6, 7, 8, 2])];
        let b1 = corpus_bleu(&hyps, &refs);
        let perm = [2usize, 0, 1];
        let hyps2: Vec<_> = perm.iter().map(|&i| hyps[i].clone()).collect();
        let refs2: Vec<_> = perm.iter().map(|&i| refs[i].clone()).collect();
        assert_eq!(corpus_bleu(&hyps2, &refs2).to_bits(), b1.to_bits());

        let (num_before, ..) = bleu_stats(&hyps, &refs);
        let mut hyps3 = hyps.clone();
        let mut refs3 = refs.clone();
        hyps3.push(toks(&[11, 12, 13, 14, 15]));
        refs3.push(toks(&[11, 12, 13, 14, 15]));
        let (num_after, ..) = bleu_stats(&hyps3, &refs3);
        for n in 0..4 {
            assert!(num_after[n] > num_before[n]);
        }
    }

    #[test]
    fn al_hand_example_and_offline_limit() {
        let al = average_lagging(10.0, &[2.0, 4.0, 6.0, 8.0, 10.0]).unwrap();
        assert!((al - 2.0).abs() < 1e-12);
        // Only the first token that saw everything counts.
        let al = average_lagging(10.0, &[10.0, 10.0, 10.0]).unwrap();
        assert!((al - 10.0).abs() < 1e-12);
        assert!(average_lagging(10.0, &[]).is_none());
    }

    #[test]
    fn ap_hand_example_and_bounds() {
        let ap = average_proportion(10.0, &[2.0, 4.0, 6.0, 8.0, 10.0]).unwrap();
        assert!((ap - 0.6).abs() < 1e-12);
        assert_eq!(average_proportion(10.0, &[10.0, 10.0]).unwrap(), 1.0);
    }

    #[test]
    fn dal_hand_recursion_and_reduction() {
        let dal = differentiable_average_lagging(10.0, &[2.0; 5]).unwrap();
        assert!((dal - 2.0).abs() < 1e-12);
        // Gaps of exactly 1/γ: the max never lifts a delay, so DAL is the
        // plain mean lag.
        let g = [4.0, 8.0, 12.0];
        let dal = differentiable_average_lagging(12.0, &g).unwrap();
        let gamma = 3.0 / 12.0;
        let mean_lag: f64 = g
            .iter()
            .enumerate()
            .map(|(j0, &v)| v - j0 as f64 / gamma)
            .sum::<f64>()
            / 3.0;
        assert!((dal - mean_lag).abs() < 1e-12);
    }

    #[test]
    fn dal_dominates_and_al_below_dal_on_random_traces() {
        use rand::Rng;
        let mut rng = crate::rng::component_rng(21, "metrics-rand", 0);
        for _ in 0..100 {
            let n = rng.gen_range(1..12);
            let src = rng.gen_range(5.0..50.0);
            let mut delays: Vec<f64> =
                (0..n).map(|_| rng.gen_range(0.0..src)).collect();
            delays.sort_by(f64::total_cmp);
            let al = average_lagging(src, &delays).unwrap();
            let dal = differentiable_average_lagging(src, &delays).unwrap();
            let gamma = n as f64 / src;
            let mean_lag: f64 = delays
                .iter()
                .enumerate()
                .map(|(j0, &g)| g - j0 as f64 / gamma)
                .sum::<f64>()
                / n as f64;
            assert!(dal >= mean_lag - 1e-12);
            assert!(al <= dal + 1e-12);
        }
    }

    #[test]
    fn report_skips_empty_hyps_in_latency_only() {
        let mk = |hyp: Vec<u32>, delays: Vec<f64>| TraceRecord {
            id: "u".into(),
            src_ms: 10.0,
            delays_ms: delays,
            hyp,
            ref_tokens: vec![1, 2],
            k: 1,
            m: 0,
            p: 1.0,
            mode: "baseline".into(),
            truncated: false,
        };
        let traces = vec![mk(vec![1, 2], vec![4.0, 10.0]), mk(vec![], vec![])];
        let r = report(&traces);
        assert_eq!(r.n_utterances, 2);
        assert_eq!(r.n_scored, 1);
        assert!(r.ap > 0.0 && r.ap <= 1.0);
        assert!(r.al_ms <= r.dal_ms);
        assert!(r.bleu < 100.0);
        let empty = report(&[]);
        assert!(empty.al_ms.is_nan() && empty.bleu == 0.0);
    }

    #[test]
    fn trace_jsonl_roundtrips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.jsonl");
        let traces = vec![TraceRecord {
            id: "test-00001".into(),
            src_ms: 0.1 + 0.2,
            delays_ms: vec![40.0, 80.0, 0.30000000000000004],
            hyp: vec![5, 6],
            ref_tokens: vec![5, 6, 7],
            k: 3,
            m: 20,
            p: 1.0,
            mode: "fai".into(),
            truncated: true,
        }];
        write_traces_jsonl(&path, &traces).unwrap();
        let back = read_traces_jsonl(&path).unwrap();
        assert_eq!(back, traces);
        assert_eq!(back[0].src_ms.to_bits(), traces[0].src_ms.to_bits());
        std::fs::write(&path, "{bad json}\n").unwrap();
        let err = read_traces_jsonl(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "got: {err}");
    }

    #[test]
    fn csv_layout_is_stable() {
        let r = MetricReport {
            bleu: 50.0,
            al_ms: 120.5,
            ap: 0.75,
            dal_ms: 130.25,
            n_utterances: 10,
            n_scored: 10,
        };
        let s = metrics_csv(&[(3, 20, 1.0, "fai".into(), r)]);
        let mut lines = s.lines();
        assert_eq!(lines.next().unwrap(), "k,m,p,mode,BLEU,AL,AP,DAL");
        assert_eq!(lines.next().unwrap(), "3,20,1,fai,50.000000,120.500000,0.750000,130.250000");
    }
}
