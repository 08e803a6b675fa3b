//! Synthetic paired speech/translation corpus.
//!
//! Each source token id has a fixed Gaussian prototype vector; an utterance
//! emits a variable number of noisy copies of each token's prototype as its
//! "audio" frames. The target side applies a fixed bijective lexical map to
//! the source tokens and then a few random adjacent swaps, so translations
//! are mostly but not fully monotonic. The swap bookkeeping yields exact
//! word alignments, from which a per-utterance monotonicity score is
//! computed.

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ckpt::write_atomic;
use crate::error::{Error, Result};
use crate::rng::component_rng;
use crate::tensor::{normal, Mat};

/// Duration of one audio frame in milliseconds.
pub const FRAME_MS: f64 = 20.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Source tokens per utterance, inclusive range.
    pub len_range: (usize, usize),
    /// Frames emitted per source token, inclusive range.
    pub frames_per_token: (usize, usize),
    pub d_in: usize,
    pub noise_std: f64,
    /// Probability of swapping each eligible adjacent target pair
    /// (left-to-right, disjoint pairs).
    pub swap_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            src_vocab: 64,
            tgt_vocab: 64,
            len_range: (6, 16),
            frames_per_token: (8, 20),
            d_in: 16,
            noise_std: 0.8,
            swap_prob: 0.08,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub src_tokens: Vec<u32>,
    pub tgt_tokens: Vec<u32>,
    /// n_frames rows of d_in values.
    pub frames: Vec<Vec<f64>>,
    /// Half-open frame range per source token, partitioning 0..n_frames.
    pub frame_spans: Vec<(usize, usize)>,
    /// (src_index, tgt_index) pairs, 0-based; a bijection per utterance.
    pub alignment: Vec<(usize, usize)>,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn duration_ms(&self) -> f64 {
        self.frames.len() as f64 * FRAME_MS
    }

    pub fn frames_mat(&self) -> Mat {
        Mat::from_rows(&self.frames)
    }
}

/// Token prototype matrix (src_vocab x d_in); shared by every split of a seed.
pub fn prototypes(cfg: &SynthConfig, seed: u64) -> Mat {
    let mut rng = component_rng(seed, "prototypes", 0);
    Mat::randn(cfg.src_vocab, cfg.d_in, 1.0, &mut rng)
}

/// Fixed bijection source id -> target id.
pub fn lexical_map(cfg: &SynthConfig, seed: u64) -> Vec<u32> {
    assert_eq!(
        cfg.src_vocab, cfg.tgt_vocab,
        "bijective lexical map needs equal vocab sizes"
    );
    let mut rng = component_rng(seed, "lexmap", 0);
    let mut map: Vec<u32> = (0..cfg.tgt_vocab as u32).collect();
    // Fisher-Yates.
    for i in (1..map.len()).rev() {
        let j = rng.gen_range(0..=i);
        map.swap(i, j);
    }
    map
}

/// Generate `n` utterances for a split. Utterance `i` of a (cfg, seed, split)
/// triple is always the same, independent of `n`.
pub fn generate(cfg: &SynthConfig, seed: u64, split: &str, n: usize) -> Vec<Utterance> {
    assert!(cfg.len_range.0 >= 1 && cfg.len_range.0 <= cfg.len_range.1, "bad len_range");
    assert!(
        cfg.frames_per_token.0 >= 1 && cfg.frames_per_token.0 <= cfg.frames_per_token.1,
        "bad frames_per_token"
    );
    let protos = prototypes(cfg, seed);
    let map = lexical_map(cfg, seed);
    let tag = format!("utt-{split}");
    (0..n)
        .map(|idx| {
            let mut rng = component_rng(seed, &tag, idx as u64);
            let j = rng.gen_range(cfg.len_range.0..=cfg.len_range.1);
            let src: Vec<u32> = (0..j).map(|_| rng.gen_range(0..cfg.src_vocab as u32)).collect();

            let mut frames = Vec::new();
            let mut spans = Vec::with_capacity(j);
            for &tok in &src {
                let fpt = rng.gen_range(cfg.frames_per_token.0..=cfg.frames_per_token.1);
                let start = frames.len();
                for _ in 0..fpt {
                    let mut row = Vec::with_capacity(cfg.d_in);
                    for d in 0..cfg.d_in {
                        row.push(protos.at(tok as usize, d) + cfg.noise_std * normal(&mut rng));
                    }
                    frames.push(row);
                }
                spans.push((start, frames.len()));
            }

            let mut tgt: Vec<u32> = src.iter().map(|&z| map[z as usize]).collect();
            let mut align: Vec<(usize, usize)> = (0..j).map(|k| (k, k)).collect();
            let mut k = 0;
            while k + 1 < j {
                if rng.gen::<f64>() < cfg.swap_prob {
                    tgt.swap(k, k + 1);
                    align[k].1 = k + 1;
                    align[k + 1].1 = k;
                    k += 2;
                } else {
                    k += 1;
                }
            }

            Utterance {
                id: format!("{split}-{idx:05}"),
                src_tokens: src,
                tgt_tokens: tgt,
                frames,
                frame_spans: spans,
                alignment: align,
            }
        })
        .collect()
}

/// Average leftward displacement of aligned target words:
/// mean over pairs of max(0, src_idx - tgt_idx). Zero iff the alignment is
/// monotone non-reordering; invariant to 0- vs 1-based indexing.
pub fn monotonic_level(alignment: &[(usize, usize)]) -> f64 {
    if alignment.is_empty() {
        return 0.0;
    }
    let s: usize = alignment
        .iter()
        .map(|&(i, j)| i.saturating_sub(j))
        .sum();
    s as f64 / alignment.len() as f64
}

/// Validate the per-utterance invariants the rest of the pipeline assumes.
pub fn validate(u: &Utterance) -> Result<()> {
    let j = u.src_tokens.len();
    if j == 0 {
        return Err(Error::data(format!("{}: empty source", u.id)));
    }
    if u.tgt_tokens.len() != j || u.frame_spans.len() != j || u.alignment.len() != j {
        return Err(Error::data(format!("{}: per-token arrays disagree on length", u.id)));
    }
    let mut cur = 0;
    for (k, &(s, e)) in u.frame_spans.iter().enumerate() {
        if s != cur || e <= s {
            return Err(Error::data(format!("{}: span {k} does not partition frames", u.id)));
        }
        cur = e;
    }
    if cur != u.frames.len() {
        return Err(Error::data(format!("{}: spans cover {cur} of {} frames", u.id, u.frames.len())));
    }
    let d = u.frames.first().map(|f| f.len()).unwrap_or(0);
    if u.frames.iter().any(|f| f.len() != d) {
        return Err(Error::data(format!("{}: ragged frame rows", u.id)));
    }
    let srcs: BTreeSet<usize> = u.alignment.iter().map(|&(i, _)| i).collect();
    let tgts: BTreeSet<usize> = u.alignment.iter().map(|&(_, t)| t).collect();
    if srcs.len() != j || tgts.len() != j || *srcs.iter().next_back().unwrap() != j - 1
        || *tgts.iter().next_back().unwrap() != j - 1
    {
        return Err(Error::data(format!("{}: alignment is not a bijection on 0..{j}", u.id)));
    }
    Ok(())
}

/// Indices grouped by ascending monotonic level into `k` near-equal groups
/// (sizes floor(n/k), remainder going to the last group). Ties break by id,
/// so grouping is deterministic.
pub fn split_by_monotonicity(utts: &[Utterance], k: usize) -> Vec<Vec<usize>> {
    assert!(k >= 1);
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.sort_by(|&a, &b| {
        let ma = monotonic_level(&utts[a].alignment);
        let mb = monotonic_level(&utts[b].alignment);
        ma.partial_cmp(&mb)
            .expect("finite monotonic levels")
            .then_with(|| utts[a].id.cmp(&utts[b].id))
    });
    let base = utts.len() / k;
    let mut groups = Vec::with_capacity(k);
    let mut pos = 0;
    for g in 0..k {
        let take = if g + 1 == k { utts.len() - pos } else { base };
        groups.push(order[pos..pos + take].to_vec());
        pos += take;
    }
    groups
}

pub fn write_jsonl(path: &Path, utts: &[Utterance]) -> Result<()> {
    let mut buf = Vec::new();
    for u in utts {
        serde_json::to_writer(&mut buf, u)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Utterance>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(f);
    let mut out = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let u: Utterance = serde_json::from_str(&line).map_err(|e| {
            Error::data(format!("{} line {}: {e}", path.display(), ln + 1))
        })?;
        validate(&u)?;
        out.push(u);
    }
    Ok(out)
}
