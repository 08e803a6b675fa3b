//! End-to-end speech translation model: acoustic encoder, integrate-and-fire
//! detector, semantic encoder, and tag-conditioned autoregressive decoder,
//! plus the offline training schedule (masked pretraining, multitask stage 1,
//! integrate-and-fire stage 2) and greedy decoding.
//!
//! One decoder serves both tasks: the BOS position carries a task tag
//! (transcription or translation), and training targets end with EOS. The
//! reported translation loss `st_loss` scores exactly the caller's target
//! positions; training passes targets with EOS appended.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::cif::CifHead;
use crate::ckpt;
use crate::config::{ModelConfig, TrainConfig};
use crate::corpus::Utterance;
use crate::encoder::{sample_mask_spans, AcousticEncoder};
use crate::nn::{positions, sinusoid_table, DecoderLayer, EncoderLayer, LayerNorm, Linear};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Graph, ParamId, ParamStore};
use crate::rng::component_rng;
use crate::tensor::{cif_forward_plain, CifMode, Mat, Tid};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct StModel {
    pub cfg: ModelConfig,
    pub acoustic: AcousticEncoder,
    pub cif: CifHead,
    sem_layers: Vec<EncoderLayer>,
    sem_ln: LayerNorm,
    dec_embed: ParamId,
    dec_layers: Vec<DecoderLayer>,
    dec_ln: LayerNorm,
    dec_out: Linear,
    pos: Mat,
}

impl StModel {
    /// Register all parameters in a fixed order. Two stores built with the
    /// same config share ParamIds, which the distillation trainer relies on.
    pub fn new(cfg: &ModelConfig, ps: &mut ParamStore, seed: u64) -> Self {
        cfg.validate().expect("invalid model config");
        let mut rng = component_rng(seed, "model-init", 0);
        let acoustic = AcousticEncoder::new(cfg, ps, &mut rng);
        let cif = CifHead::new(cfg, ps, &mut rng);
        let sem_layers = (0..cfg.semantic_layers)
            .map(|i| {
                EncoderLayer::new(ps, &format!("semantic.layer{i}"), cfg.d_model, cfg.n_heads, cfg.d_ff, &mut rng)
            })
            .collect();
        let sem_ln = LayerNorm::new(ps, "semantic.ln_out", cfg.d_model);
        let dec_embed = ps.register(
            "decoder.embed",
            Mat::randn(cfg.decoder_vocab(), cfg.d_model, 0.1, &mut rng),
        );
        let dec_layers = (0..cfg.decoder_layers)
            .map(|i| {
                DecoderLayer::new(ps, &format!("decoder.layer{i}"), cfg.d_model, cfg.n_heads, cfg.d_ff, &mut rng)
            })
            .collect();
        let dec_ln = LayerNorm::new(ps, "decoder.ln_out", cfg.d_model);
        let dec_out = Linear::new(ps, "decoder.out", cfg.d_model, cfg.decoder_vocab(), &mut rng);
        StModel {
            cfg: cfg.clone(),
            acoustic,
            cif,
            sem_layers,
            sem_ln,
            dec_embed,
            dec_layers,
            dec_ln,
            dec_out,
            pos: sinusoid_table(cfg.max_positions, cfg.d_model),
        }
    }

    pub fn eos(&self) -> u32 {
        self.cfg.eos() as u32
    }

    /// Semantic encoding of unit states (or raw representations in stage 1).
    pub fn sem_encode(&self, g: &mut Graph, ps: &ParamStore, h: Tid) -> Tid {
        let n = g.tape.shape(h).0;
        let pos = positions(g, &self.pos, 0, n);
        let mut x = g.tape.add(h, pos);
        for layer in &self.sem_layers {
            x = layer.forward(g, ps, x, None);
        }
        self.sem_ln.forward(g, ps, x)
    }

    /// Decoder logits for teacher-forcing inputs (tag then shifted targets)
    /// cross-attending over `memory`.
    pub fn decode_logits(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        memory: Tid,
        input_ids: &[usize],
    ) -> Tid {
        assert!(!input_ids.is_empty());
        let embed = g.p(ps, self.dec_embed);
        let x = g.tape.gather_rows(embed, input_ids);
        let pos = positions(g, &self.pos, 0, input_ids.len());
        let mut x = g.tape.add(x, pos);
        let causal = g.tape.causal_mask(input_ids.len());
        for layer in &self.dec_layers {
            x = layer.forward(g, ps, x, memory, causal);
        }
        let x = self.dec_ln.forward(g, ps, x);
        self.dec_out.forward(g, ps, x)
    }

    /// Sequence negative log-likelihood −Σ_j log p(y_j | y_<j, memory) under
    /// the given task tag, over exactly the caller's target positions.
    pub fn st_loss(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        memory: Tid,
        tag: usize,
        targets: &[usize],
        smoothing: f64,
    ) -> Result<Tid> {
        if targets.is_empty() {
            return Err(Error::contract("st_loss needs a nonempty target sequence"));
        }
        let mut input = Vec::with_capacity(targets.len());
        input.push(tag);
        input.extend_from_slice(&targets[..targets.len() - 1]);
        let logits = self.decode_logits(g, ps, memory, &input);
        Ok(g.tape.cross_entropy_sum(logits, targets, smoothing))
    }

    fn ids_with_eos(&self, tokens: &[u32]) -> Vec<usize> {
        let mut v: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        v.push(self.cfg.eos());
        v
    }

    /// Stage-1 multitask loss on one utterance: translation + transcription
    /// over the unshrunk acoustic representations.
    pub fn stage1_loss(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        c: &Mat,
        utt: &Utterance,
        smoothing: f64,
    ) -> Result<Tid> {
        let ci = g.constant(c.clone());
        let a = self.acoustic.encode(g, ps, ci);
        let mem = self.sem_encode(g, ps, a);
        let st = self.st_loss(g, ps, mem, self.cfg.tag_st(), &self.ids_with_eos(&utt.tgt_tokens), smoothing)?;
        let asr = self.st_loss(g, ps, mem, self.cfg.tag_asr(), &self.ids_with_eos(&utt.src_tokens), smoothing)?;
        Ok(g.tape.add(st, asr))
    }

    /// Stage-2 objective on one utterance: translation loss over the
    /// teacher-force-scaled unit states plus λ times the unit-count loss.
    /// Returns the total node and the two component values.
    pub fn offline_objective(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        c: &Mat,
        utt: &Utterance,
        lambda: f64,
        smoothing: f64,
    ) -> Result<(Tid, f64, f64)> {
        let j_src = utt.src_tokens.len();
        if j_src == 0 {
            return Err(Error::contract("offline objective needs source tokens"));
        }
        let ci = g.constant(c.clone());
        let a = self.acoustic.encode(g, ps, ci);
        let alpha = self.cif.alphas(g, ps, a);
        let (h, _aux) = self.cif.integrate_scaled(g, alpha, a, j_src)?;
        let mem = self.sem_encode(g, ps, h);
        let st = self.st_loss(g, ps, mem, self.cfg.tag_st(), &self.ids_with_eos(&utt.tgt_tokens), smoothing)?;
        let len = self.cif.length_loss(g, alpha, j_src);
        let st_v = g.tape.data(st).data[0];
        let len_v = g.tape.data(len).data[0];
        let weighted = g.tape.scale(len, lambda);
        Ok((g.tape.add(st, weighted), st_v, len_v))
    }

    // ---- plain (off-tape) forward passes for inference and analysis ----

    pub fn speech_tokens(&self, ps: &ParamStore, frames: &Mat) -> Result<Mat> {
        self.acoustic.conv_subsample(ps, frames)
    }

    pub fn acoustic_plain(&self, ps: &ParamStore, c: &Mat) -> Mat {
        let mut g = Graph::eval(ps);
        let ci = g.constant(c.clone());
        let a = self.acoustic.encode(&mut g, ps, ci);
        g.tape.data(a).clone()
    }

    pub fn acoustic_fai_plain(&self, ps: &ParamStore, c_prefix: &Mat, m: usize, p: f64) -> Mat {
        let mut g = Graph::eval(ps);
        let (a, _) = self.acoustic.encode_fai(&mut g, ps, c_prefix, m, p);
        g.tape.data(a).clone()
    }

    pub fn semantic_plain(&self, ps: &ParamStore, h: &Mat) -> Mat {
        if h.rows == 0 {
            return Mat::zeros(0, h.cols);
        }
        let mut g = Graph::eval(ps);
        let hi = g.constant(h.clone());
        let mem = self.sem_encode(&mut g, ps, hi);
        g.tape.data(mem).clone()
    }

    /// Next greedy token given already-emitted targets. Argmax over tokens
    /// and EOS (task tags excluded); ties resolve to the lowest id.
    pub fn greedy_next(&self, ps: &ParamStore, memory: &Mat, emitted: &[u32]) -> u32 {
        assert!(memory.rows > 0, "greedy_next needs a nonempty memory");
        let mut g = Graph::eval(ps);
        let mem = g.constant(memory.clone());
        let mut input: Vec<usize> = Vec::with_capacity(emitted.len() + 1);
        input.push(self.cfg.tag_st());
        input.extend(emitted.iter().map(|&t| t as usize));
        let logits = self.decode_logits(&mut g, ps, mem, &input);
        let logits = g.tape.data(logits);
        let row = logits.row(logits.rows - 1);
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &v) in row.iter().enumerate().take(self.cfg.eos() + 1) {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        best as u32
    }

    /// Argmax decoding until EOS or `max_len` tokens. Empty memory decodes
    /// to the empty sequence.
    pub fn greedy_decode(&self, ps: &ParamStore, memory: &Mat, max_len: usize) -> Vec<u32> {
        let mut out = Vec::new();
        if memory.rows == 0 {
            return out;
        }
        while out.len() < max_len {
            let t = self.greedy_next(ps, memory, &out);
            if t == self.eos() {
                break;
            }
            out.push(t);
        }
        out
    }

    /// Full offline inference: conv, bidirectional encode, integrate-and-fire
    /// with tail handling, semantic encode, greedy decode (cap 2·J′+5).
    pub fn decode_offline(&self, ps: &ParamStore, utt: &Utterance) -> Result<Vec<u32>> {
        let c = self.speech_tokens(ps, &utt.frames_mat())?;
        let a = self.acoustic_plain(ps, &c);
        let alphas = self.cif.alphas_plain(ps, &a);
        let (h, _aux) = cif_forward_plain(
            &alphas,
            &a,
            self.cif.beta,
            CifMode::Offline { tail_threshold: self.cif.tail_threshold },
        );
        let mem = self.semantic_plain(ps, &h);
        Ok(self.greedy_decode(ps, &mem, 2 * h.rows + 5))
    }

    /// Checkpoint tensor list: parameters plus `meta.cfg.*`.
    pub fn export_tensors(&self, ps: &ParamStore) -> Vec<(String, Mat)> {
        let mut out = ps.tensors();
        out.extend(self.cfg.to_meta());
        out
    }

    /// Rebuild a model and its parameters from checkpoint tensors.
    pub fn from_tensors(tensors: &[(String, Mat)]) -> Result<(StModel, ParamStore)> {
        let map: BTreeMap<String, Mat> =
            tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let cfg = ModelConfig::from_meta(&map)?;
        let mut ps = ParamStore::new();
        let model = StModel::new(&cfg, &mut ps, 0);
        let params: BTreeMap<String, Mat> = map
            .into_iter()
            .filter(|(k, _)| !k.starts_with("meta.") && !k.starts_with("opt."))
            .collect();
        ps.load_tensors(&params)?;
        Ok((model, ps))
    }

    pub fn load_checkpoint(path: &Path) -> Result<(StModel, ParamStore)> {
        let tensors = ckpt::load(path)?;
        StModel::from_tensors(&tensors)
    }
}

// ---- offline training ----

/// One training-log line; unused fields stay absent in the JSONL.
#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_st: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_len: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_w2v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_cif: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_st: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_total: Option<f64>,
    /// Teacher-side future windows clamped at T in this step's batch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clamped: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Pretrain,
    Stage1,
    Stage2,
}

impl Phase {
    fn index(self) -> usize {
        match self {
            Phase::Pretrain => 0,
            Phase::Stage1 => 1,
            Phase::Stage2 => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
        }
    }
}

pub struct TrainSummary {
    /// Per-token dev translation loss measured after stage 1 and stage 2.
    pub dev_st_after_stage1: f64,
    pub dev_st_after_stage2: f64,
    /// Averaged teacher tensors (parameters + meta), ready to save.
    pub averaged: Vec<(String, Mat)>,
    pub stage2_ckpts: Vec<PathBuf>,
}

/// Mean per-token dev translation loss (unsmoothed), with CIF shrinking when
/// `use_cif` (the stage-appropriate forward).
pub fn dev_st_loss(
    model: &StModel,
    ps: &ParamStore,
    dev: &[Utterance],
    cs: &[Mat],
    use_cif: bool,
) -> Result<f64> {
    assert!(!dev.is_empty());
    let mut total = 0.0;
    for (utt, c) in dev.iter().zip(cs) {
        let mut g = Graph::eval(ps);
        let ci = g.constant(c.clone());
        let a = model.acoustic.encode(&mut g, ps, ci);
        let mem = if use_cif {
            let alpha = model.cif.alphas(&mut g, ps, a);
            let (h, _) = model.cif.integrate_scaled(&mut g, alpha, a, utt.src_tokens.len())?;
            model.sem_encode(&mut g, ps, h)
        } else {
            model.sem_encode(&mut g, ps, a)
        };
        let targets = model.ids_with_eos(&utt.tgt_tokens);
        let n = targets.len() as f64;
        let l = model.st_loss(&mut g, ps, mem, model.cfg.tag_st(), &targets, 0.0)?;
        total += g.tape.data(l).data[0] / n;
    }
    Ok(total / dev.len() as f64)
}

fn save_progress_ckpt(
    path: &Path,
    model: &StModel,
    ps: &ParamStore,
    adam: &Adam,
    phase: Phase,
    epochs_done: usize,
    dev_total: Option<f64>,
) -> Result<()> {
    let mut tensors = model.export_tensors(ps);
    tensors.extend(adam.state_tensors(ps));
    tensors.push(("meta.progress.phase".into(), Mat::scalar(phase.index() as f64)));
    tensors.push(("meta.progress.epochs_done".into(), Mat::scalar(epochs_done as f64)));
    if let Some(d) = dev_total {
        tensors.push(("meta.dev_total".into(), Mat::scalar(d)));
    }
    ckpt::save(path, &tensors)
}

fn run_epoch(
    model: &StModel,
    ps: &mut ParamStore,
    adam: &mut Adam,
    train: &[Utterance],
    cs: &[Mat],
    tcfg: &TrainConfig,
    phase: Phase,
    seed: u64,
    epoch: usize,
    log: &mut dyn FnMut(&TrainLogRow),
) -> Result<()> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng =
        component_rng(seed, &format!("shuffle-{}", phase.name()), epoch as u64);
    order.shuffle(&mut shuffle_rng);

    for batch in order.chunks(tcfg.batch_size) {
        let mut sum = 0.0;
        let mut sum_st = 0.0;
        let mut sum_len = 0.0;
        let mut counted = 0usize;
        for &idx in batch {
            let utt = &train[idx];
            let c = &cs[idx];
            let mut g = Graph::train(ps);
            let loss = match phase {
                Phase::Pretrain => {
                    let mut mask_rng = component_rng(
                        seed,
                        "pretrain-mask",
                        ((epoch as u64) << 32) | idx as u64,
                    );
                    let mask =
                        sample_mask_spans(c.rows, tcfg.mask_coverage, tcfg.mask_span, &mut mask_rng);
                    match model.acoustic.masked_loss(&mut g, ps, c, &mask) {
                        Some(l) => l,
                        None => continue,
                    }
                }
                Phase::Stage1 => model.stage1_loss(&mut g, ps, c, utt, tcfg.label_smoothing)?,
                Phase::Stage2 => {
                    let (l, st_v, len_v) =
                        model.offline_objective(&mut g, ps, c, utt, tcfg.lambda_cif, tcfg.label_smoothing)?;
                    sum_st += st_v;
                    sum_len += len_v;
                    l
                }
            };
            let v = g.backward_into(loss, ps);
            sum += v;
            counted += 1;
        }
        if counted == 0 {
            continue;
        }
        let mean = sum / counted as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged {
                step: adam.step_count() + 1,
                msg: format!("non-finite {} loss {mean}", phase.name()),
            });
        }
        ps.scale_grads(1.0 / counted as f64);
        ps.clip_grads(tcfg.clip_norm);
        adam.step(ps);
        log(&TrainLogRow {
            step: adam.step_count(),
            stage: phase.name().to_string(),
            epoch,
            loss: mean,
            loss_st: (phase == Phase::Stage2).then_some(sum_st / counted as f64),
            loss_len: (phase == Phase::Stage2).then_some(sum_len / counted as f64),
            loss_w2v: None,
            loss_cif: None,
            dev_st: None,
            dev_total: None,
            clamped: None,
        });
    }
    Ok(())
}

/// Run the full offline schedule and return the checkpoint-averaged teacher.
///
/// Per-epoch checkpoints land in `ckpt_dir` (`last.fastckpt` every epoch for
/// resume; `stage2-epoch-N.fastckpt` during stage 2 for averaging). `resume`
/// restarts from a `last.fastckpt`, skipping completed epochs; shuffle and
/// mask streams key on (seed, phase, epoch), so a resumed run replays the
/// remaining schedule bit-exactly.
pub fn train_offline(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    train: &[Utterance],
    dev: &[Utterance],
    seed: u64,
    ckpt_dir: &Path,
    resume: Option<&Path>,
    log: &mut dyn FnMut(&TrainLogRow),
) -> Result<(StModel, ParamStore, TrainSummary)> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::data("offline training needs nonempty train and dev sets"));
    }
    std::fs::create_dir_all(ckpt_dir)?;
    let mut ps = ParamStore::new();
    let model = StModel::new(cfg, &mut ps, seed);
    let mut adam = Adam::new(
        AdamConfig { lr: tcfg.lr, warmup_steps: tcfg.warmup_steps, ..AdamConfig::default() },
        ps.len(),
    );
    let mut done = [0usize; 3];
    if let Some(path) = resume {
        let tensors = ckpt::load(path)?;
        let map: BTreeMap<String, Mat> =
            tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let loaded_cfg = ModelConfig::from_meta(&map)?;
        if loaded_cfg != *cfg {
            return Err(Error::data("resume checkpoint was trained with a different model config"));
        }
        let params: BTreeMap<String, Mat> = map
            .iter()
            .filter(|(k, _)| !k.starts_with("meta.") && !k.starts_with("opt."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ps.load_tensors(&params)?;
        adam.load_state(&ps, &tensors);
        let phase = map
            .get("meta.progress.phase")
            .ok_or_else(|| Error::data("resume checkpoint lacks progress metadata"))?
            .data[0] as usize;
        let epochs = map
            .get("meta.progress.epochs_done")
            .ok_or_else(|| Error::data("resume checkpoint lacks progress metadata"))?
            .data[0] as usize;
        for (i, slot) in done.iter_mut().enumerate() {
            *slot = match i.cmp(&phase) {
                std::cmp::Ordering::Less => usize::MAX, // completed phases
                std::cmp::Ordering::Equal => epochs,
                std::cmp::Ordering::Greater => 0,
            };
        }
    }

    let cs_train: Vec<Mat> = train
        .iter()
        .map(|u| model.speech_tokens(&ps, &u.frames_mat()))
        .collect::<Result<_>>()?;
    let cs_dev: Vec<Mat> = dev
        .iter()
        .map(|u| model.speech_tokens(&ps, &u.frames_mat()))
        .collect::<Result<_>>()?;

    let schedule = [
        (Phase::Pretrain, tcfg.pretrain_epochs),
        (Phase::Stage1, tcfg.stage1_epochs),
        (Phase::Stage2, tcfg.stage2_epochs),
    ];
    let mut dev_st_after_stage1 = f64::NAN;
    let mut stage2_ckpts: Vec<(f64, PathBuf)> = Vec::new();
    // Re-discover stage-2 epoch checkpoints from an interrupted run.
    if done[Phase::Stage2.index()] > 0 && done[Phase::Stage2.index()] != usize::MAX {
        for e in 0..done[Phase::Stage2.index()] {
            let p = ckpt_dir.join(format!("stage2-epoch-{e}.fastckpt"));
            if p.exists() {
                let map: BTreeMap<String, Mat> = ckpt::load(&p)?.into_iter().collect();
                let d = map
                    .get("meta.dev_total")
                    .map(|m| m.data[0])
                    .unwrap_or(f64::INFINITY);
                stage2_ckpts.push((d, p));
            }
        }
    }

    for (phase, epochs) in schedule {
        let already = done[phase.index()];
        for epoch in 0..epochs {
            if epoch < already {
                continue;
            }
            run_epoch(&model, &mut ps, &mut adam, train, &cs_train, tcfg, phase, seed, epoch, log)?;
            let mut dev_total = None;
            if phase == Phase::Stage2 {
                let dev_st = dev_st_loss(&model, &ps, dev, &cs_dev, true)?;
                dev_total = Some(dev_st);
                log(&TrainLogRow {
                    step: adam.step_count(),
                    stage: "dev".into(),
                    epoch,
                    loss: dev_st,
                    loss_st: None,
                    loss_len: None,
                    loss_w2v: None,
                    loss_cif: None,
                    dev_st: Some(dev_st),
                    dev_total: Some(dev_st),
                    clamped: None,
                });
                let path = ckpt_dir.join(format!("stage2-epoch-{epoch}.fastckpt"));
                save_progress_ckpt(&path, &model, &ps, &adam, phase, epoch + 1, dev_total)?;
                stage2_ckpts.push((dev_st, path));
            }
            save_progress_ckpt(
                &ckpt_dir.join("last.fastckpt"),
                &model,
                &ps,
                &adam,
                phase,
                epoch + 1,
                dev_total,
            )?;
        }
        if phase == Phase::Stage1 {
            dev_st_after_stage1 = dev_st_loss(&model, &ps, dev, &cs_dev, false)?;
        }
    }

    let dev_st_after_stage2 = dev_st_loss(&model, &ps, dev, &cs_dev, true)?;

    // Average the best-dev stage-2 checkpoints into the teacher.
    stage2_ckpts.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let chosen: Vec<PathBuf> = stage2_ckpts
        .iter()
        .take(tcfg.keep_best.max(1))
        .map(|(_, p)| p.clone())
        .collect();
    if chosen.is_empty() {
        return Err(Error::data("no stage-2 checkpoints to average"));
    }
    let averaged = ckpt::average(&chosen)?;
    let (avg_model, avg_ps) = StModel::from_tensors(&averaged)?;
    Ok((
        avg_model,
        avg_ps,
        TrainSummary {
            dev_st_after_stage1,
            dev_st_after_stage2,
            averaged,
            stage2_ckpts: chosen,
        },
    ))
}
