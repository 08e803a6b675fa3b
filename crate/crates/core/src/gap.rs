//! Representation-gap analysis: compare acoustic encodings of streaming
//! prefixes against the encoding of the full utterance, position by position.
//! All statistics reduce in utterance order, so runs are deterministic.

use crate::corpus::Utterance;
use crate::model::StModel;
use crate::params::ParamStore;
use crate::tensor::{cosine_val, Mat};
use crate::{Error, Result};

/// Token-length band mirroring the duration filter used for the reverse
/// position profile.
pub const PROFILE_LEN_MIN: usize = 8;
pub const PROFILE_LEN_MAX: usize = 60;

pub const DEFAULT_T_MAX: usize = 100;
pub const DEFAULT_N_GROUPS: usize = 5;

/// How prefixes are encoded during analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GapMode {
    /// Encode the bare prefix.
    Vanilla,
    /// Append m mask embeddings, keep rows per discard rate p.
    Fai { m: usize, p: f64 },
}

/// s_{t,t'} for one utterance: `s[t-1][t'-1]` is the cosine between the
/// prefix-of-t encoding and the full encoding at position t' (1-based).
#[derive(Debug, Clone)]
pub struct SimMatrix {
    pub t_len: usize,
    pub s: Vec<Vec<f64>>,
}

fn rows_prefix(m: &Mat, n: usize) -> Mat {
    assert!(n <= m.rows);
    Mat { rows: n, cols: m.cols, data: m.data[..n * m.cols].to_vec() }
}

fn full_tokens(model: &StModel, ps: &ParamStore, utt: &Utterance) -> Result<Mat> {
    model.speech_tokens(ps, &utt.frames_mat())
}

fn encode_prefix(model: &StModel, ps: &ParamStore, c_prefix: &Mat, mode: GapMode) -> Mat {
    match mode {
        GapMode::Vanilla => model.acoustic_plain(ps, c_prefix),
        GapMode::Fai { m, p } => model.acoustic_fai_plain(ps, c_prefix, m, p),
    }
}

/// Every prefix-vs-full similarity for one utterance.
pub fn sim_matrix(
    model: &StModel,
    ps: &ParamStore,
    utt: &Utterance,
    mode: GapMode,
) -> Result<SimMatrix> {
    let c = full_tokens(model, ps, utt)?;
    let a_full = model.acoustic_plain(ps, &c);
    let t_len = c.rows;
    let mut s = Vec::with_capacity(t_len);
    for t in 1..=t_len {
        let a_hat = encode_prefix(model, ps, &rows_prefix(&c, t), mode);
        let row: Vec<f64> =
            (0..t).map(|i| cosine_val(a_hat.row(i), a_full.row(i))).collect();
        s.push(row);
    }
    Ok(SimMatrix { t_len, s })
}

/// s_{t,t'}(x): encode the prefix of t speech tokens, compare position t'
/// against the full-utterance encoding. Positions are 1-based.
pub fn position_similarity(
    model: &StModel,
    ps: &ParamStore,
    utt: &Utterance,
    mode: GapMode,
    t: usize,
    t_prime: usize,
) -> Result<f64> {
    let c = full_tokens(model, ps, utt)?;
    if t_prime < 1 || t_prime > t || t > c.rows {
        return Err(Error::contract(format!(
            "position_similarity requires 1 <= t' <= t <= {}, got t={t}, t'={t_prime}",
            c.rows
        )));
    }
    let a_full = model.acoustic_plain(ps, &c);
    let a_hat = encode_prefix(model, ps, &rows_prefix(&c, t), mode);
    Ok(cosine_val(a_hat.row(t_prime - 1), a_full.row(t_prime - 1)))
}

/// Mean similarity at fixed distances from the end of the consumed prefix.
#[derive(Debug, Clone)]
pub struct SimilarityProfile {
    pub mode: String,
    /// Reverse offsets with at least one sample, ascending.
    pub taus: Vec<usize>,
    pub means: Vec<f64>,
    /// Utterances contributing to each offset.
    pub counts: Vec<usize>,
}

impl SimilarityProfile {
    pub fn mean_at(&self, tau: usize) -> Option<f64> {
        self.taus.iter().position(|&t| t == tau).map(|i| self.means[i])
    }
}

/// s̄_{-τ} for τ = 1..t_max: per utterance, average s_{t, t-τ+1} over
/// t = τ..|x|, then average those means over utterances with |x| ≥ τ.
/// Utterances outside the analysis length band are skipped entirely.
pub fn reverse_position_profile(
    model: &StModel,
    ps: &ParamStore,
    utts: &[Utterance],
    mode: GapMode,
    label: &str,
    t_max: usize,
) -> Result<SimilarityProfile> {
    let mut sums = vec![0.0f64; t_max];
    let mut counts = vec![0usize; t_max];
    for utt in utts {
        let sm = sim_matrix(model, ps, utt, mode)?;
        if sm.t_len < PROFILE_LEN_MIN || sm.t_len > PROFILE_LEN_MAX {
            continue;
        }
        for tau in 1..=t_max.min(sm.t_len) {
            let mut inner = 0.0;
            for t in tau..=sm.t_len {
                inner += sm.s[t - 1][t - tau];
            }
            sums[tau - 1] += inner / (sm.t_len - tau + 1) as f64;
            counts[tau - 1] += 1;
        }
    }
    let mut profile = SimilarityProfile {
        mode: label.to_string(),
        taus: Vec::new(),
        means: Vec::new(),
        counts: Vec::new(),
    };
    for tau in 1..=t_max {
        if counts[tau - 1] > 0 {
            profile.taus.push(tau);
            profile.means.push(sums[tau - 1] / counts[tau - 1] as f64);
            profile.counts.push(counts[tau - 1]);
        }
    }
    Ok(profile)
}

/// Per-encoding-step curves for the first, middle, and last three prefix
/// positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PerStepStats {
    pub steps: Vec<usize>,
    pub first3: Vec<(f64, usize)>,
    pub middle3: Vec<(f64, usize)>,
    pub last3: Vec<(f64, usize)>,
}

fn group_positions(t: usize, group: usize) -> Vec<usize> {
    let candidates: [i64; 3] = match group {
        0 => [1, 2, 3],
        1 => {
            let mid = ((1 + t) / 2) as i64;
            [mid - 1, mid, mid + 1]
        }
        _ => [t as i64 - 2, t as i64 - 1, t as i64],
    };
    candidates
        .into_iter()
        .filter(|&p| p >= 1 && p <= t as i64)
        .map(|p| p as usize)
        .collect()
}

/// s̄_{t,t'} pooled over utterances with |x| ≥ t and over the valid positions
/// of each group at step t.
pub fn per_step_stats(
    model: &StModel,
    ps: &ParamStore,
    utts: &[Utterance],
    mode: GapMode,
) -> Result<PerStepStats> {
    let mats: Vec<SimMatrix> = utts
        .iter()
        .map(|u| sim_matrix(model, ps, u, mode))
        .collect::<Result<_>>()?;
    let max_t = mats.iter().map(|m| m.t_len).max().unwrap_or(0);
    let mut out = PerStepStats {
        steps: Vec::new(),
        first3: Vec::new(),
        middle3: Vec::new(),
        last3: Vec::new(),
    };
    for t in 1..=max_t {
        let mut acc = [(0.0f64, 0usize); 3];
        for sm in &mats {
            if sm.t_len < t {
                continue;
            }
            for (g, slot) in acc.iter_mut().enumerate() {
                for tp in group_positions(t, g) {
                    slot.0 += sm.s[t - 1][tp - 1];
                    slot.1 += 1;
                }
            }
        }
        if acc[0].1 == 0 {
            continue;
        }
        out.steps.push(t);
        let norm = |(s, n): (f64, usize)| (s / n as f64, n);
        out.first3.push(norm(acc[0]));
        out.middle3.push(norm(acc[1]));
        out.last3.push(norm(acc[2]));
    }
    Ok(out)
}

/// Per-utterance degradation score s̄_{-1}(x) = (1/T) Σ_t cos(â_{t,t}, a_t).
pub fn per_utterance_s1(
    model: &StModel,
    ps: &ParamStore,
    utts: &[Utterance],
    mode: GapMode,
) -> Result<Vec<f64>> {
    utts.iter()
        .map(|u| {
            let sm = sim_matrix(model, ps, u, mode)?;
            let diag: f64 = (1..=sm.t_len).map(|t| sm.s[t - 1][t - 1]).sum();
            Ok(diag / sm.t_len as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationGroup {
    /// Indices into the analyzed utterance slice, worst group first.
    pub members: Vec<usize>,
    pub mean_score: f64,
}

/// Sort utterances by degradation score ascending (ties by id) and split
/// into n groups; sizes differ by at most the remainder, given to the last
/// (best) group.
pub fn degradation_groups(
    scores: &[f64],
    ids: &[String],
    n_groups: usize,
) -> Vec<DegradationGroup> {
    assert_eq!(scores.len(), ids.len());
    assert!(n_groups >= 1);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a].total_cmp(&scores[b]).then_with(|| ids[a].cmp(&ids[b]))
    });
    let n = order.len();
    let base = n / n_groups;
    let mut groups = Vec::with_capacity(n_groups);
    let mut start = 0usize;
    for g in 0..n_groups {
        let end = if g + 1 == n_groups { n } else { (start + base).min(n) };
        let members: Vec<usize> = order[start..end].to_vec();
        let mean_score = if members.is_empty() {
            f64::NAN
        } else {
            members.iter().map(|&i| scores[i]).sum::<f64>() / members.len() as f64
        };
        groups.push(DegradationGroup { members, mean_score });
        start = end;
    }
    groups
}

/// Mean similarity of mask-predicted future positions, by distance from the
/// end of the consumed prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetCurve {
    pub offsets: Vec<usize>,
    pub means: Vec<f64>,
    pub counts: Vec<usize>,
}

/// For every prefix t = 1..T-1, encode with m masks kept (p = 0) and compare
/// each mask-position output against the full encoding at the same absolute
/// position. Offsets without ground truth (t + o > T) are skipped.
pub fn predicted_context_similarity(
    model: &StModel,
    ps: &ParamStore,
    utts: &[Utterance],
    m: usize,
) -> Result<OffsetCurve> {
    assert!(m >= 1, "prediction analysis needs at least one mask");
    let mut sums = vec![0.0f64; m];
    let mut counts = vec![0usize; m];
    for utt in utts {
        let c = full_tokens(model, ps, utt)?;
        let a_full = model.acoustic_plain(ps, &c);
        let t_len = c.rows;
        for t in 1..t_len {
            let a_hat =
                model.acoustic_fai_plain(ps, &rows_prefix(&c, t), m, 0.0);
            debug_assert_eq!(a_hat.rows, t + m);
            for o in 1..=m {
                if t + o > t_len {
                    break;
                }
                sums[o - 1] += cosine_val(a_hat.row(t + o - 1), a_full.row(t + o - 1));
                counts[o - 1] += 1;
            }
        }
    }
    let mut curve = OffsetCurve { offsets: Vec::new(), means: Vec::new(), counts: Vec::new() };
    for o in 1..=m {
        if counts[o - 1] > 0 {
            curve.offsets.push(o);
            curve.means.push(sums[o - 1] / counts[o - 1] as f64);
            curve.counts.push(counts[o - 1]);
        }
    }
    Ok(curve)
}

/// Determinism-and-identity check: encoding the full utterance as a "prefix"
/// must reproduce the full encoding bit for bit, making every positional
/// similarity 1 up to the cosine's own rounding. Returns the largest
/// deviation from 1.
pub fn identity_anchor_max_dev(
    model: &StModel,
    ps: &ParamStore,
    utt: &Utterance,
) -> Result<f64> {
    let c = full_tokens(model, ps, utt)?;
    let a_full = model.acoustic_plain(ps, &c);
    let a_again = encode_prefix(model, ps, &rows_prefix(&c, c.rows), GapMode::Vanilla);
    if a_full.data.len() != a_again.data.len()
        || a_full
            .data
            .iter()
            .zip(&a_again.data)
            .any(|(x, y)| x.to_bits() != y.to_bits())
    {
        return Err(Error::contract(
            "full-prefix encoding is not bitwise reproducible",
        ));
    }
    let dev = (0..c.rows)
        .map(|i| (1.0 - cosine_val(a_again.row(i), a_full.row(i))).abs())
        .fold(0.0f64, f64::max);
    Ok(dev)
}

pub fn profile_csv(profiles: &[SimilarityProfile]) -> String {
    let mut s = String::from("tau,mode,mean,count\n");
    for p in profiles {
        for i in 0..p.taus.len() {
            s.push_str(&format!(
                "{},{},{:.6},{}\n",
                p.taus[i], p.mode, p.means[i], p.counts[i]
            ));
        }
    }
    s
}

pub fn per_step_csv(label: &str, stats: &PerStepStats) -> String {
    let mut s = String::from("t,mode,mean,count\n");
    for (i, &t) in stats.steps.iter().enumerate() {
        for (name, col) in [
            ("first3", &stats.first3),
            ("middle3", &stats.middle3),
            ("last3", &stats.last3),
        ] {
            let (mean, count) = col[i];
            s.push_str(&format!("{t},{label}/{name},{mean:.6},{count}\n"));
        }
    }
    s
}

pub fn offset_csv(label: &str, curve: &OffsetCurve) -> String {
    let mut s = String::from("offset,mode,mean,count\n");
    for i in 0..curve.offsets.len() {
        s.push_str(&format!(
            "{},{},{:.6},{}\n",
            curve.offsets[i], label, curve.means[i], curve.counts[i]
        ));
    }
    s
}
