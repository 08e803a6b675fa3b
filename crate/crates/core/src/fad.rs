//! Future-aware distillation: the frozen offline teacher encodes prefixes
//! extended with real future speech tokens, the student encodes the same
//! prefixes extended with mask embeddings, and the student's acoustic encoder
//! and firing head are trained to match the teacher's representations and
//! firing weights over the shared prefix.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::FadConfig;
use crate::corpus::Utterance;
use crate::model::{StModel, TrainLogRow};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Graph, ParamStore};
use crate::rng::component_rng;
use crate::tensor::{Mat, Tid};
use crate::{Error, Result};

pub const KL_EPS: f64 = 1e-6;

/// Uniform cut point in {1, …, t_max}.
pub fn sample_cut(t_max: usize, rng: &mut ChaCha8Rng) -> usize {
    assert!(t_max >= 1, "sample_cut needs at least one position");
    rng.gen_range(1..=t_max)
}

/// Build both distillation losses for one utterance and cut on the student's
/// graph. The teacher runs off-tape (no gradients). Returns the two loss
/// nodes and whether the teacher's future window was clamped at T.
pub fn fad_losses(
    teacher: (&StModel, &ParamStore),
    student: (&StModel, &ParamStore),
    g: &mut Graph,
    c: &Mat,
    t: usize,
    m: usize,
) -> Result<(Tid, Tid, bool)> {
    let big_t = c.rows;
    if t == 0 || t > big_t {
        return Err(Error::contract(format!(
            "cut t = {t} outside [1, {big_t}]"
        )));
    }
    let (t_model, t_ps) = teacher;
    let (s_model, s_ps) = student;

    // Teacher: encode the prefix plus up to m rows of real future context.
    let clamped = t + m > big_t;
    let t_end = (t + m).min(big_t);
    let mut c_teacher = Mat::zeros(t_end, c.cols);
    for r in 0..t_end {
        c_teacher.row_mut(r).copy_from_slice(c.row(r));
    }
    let a_teacher_full = t_model.acoustic_plain(t_ps, &c_teacher);
    let mut a_teacher = Mat::zeros(t, c.cols);
    for r in 0..t {
        a_teacher.row_mut(r).copy_from_slice(a_teacher_full.row(r));
    }
    let alpha_teacher =
        Mat::from_vec(t, 1, t_model.cif.alphas_plain(t_ps, &a_teacher));

    // Student: same prefix plus m mask embeddings; keep the first t rows.
    let mut c_student = Mat::zeros(t, c.cols);
    for r in 0..t {
        c_student.row_mut(r).copy_from_slice(c.row(r));
    }
    let (a_student, kept) = s_model.acoustic.encode_fai(g, s_ps, &c_student, m, 1.0);
    debug_assert_eq!(kept, 0);
    let alpha_student = s_model.cif.alphas(g, s_ps, a_student);

    let a_t = g.constant(a_teacher);
    let cos = g.tape.cosine_rows(a_student, a_t);
    let mean_cos = g.tape.mean_all(cos);
    let neg = g.tape.scale(mean_cos, -1.0);
    let loss_w2v = g.tape.add_const(neg, 1.0);

    let alpha_t = g.constant(alpha_teacher);
    let loss_cif = g.tape.bernoulli_kl_sum(alpha_t, alpha_student, KL_EPS);

    Ok((loss_w2v, loss_cif, clamped))
}

/// Distill a student from the teacher. The student starts as a bit-exact
/// copy; only `acoustic.*` (minus the conv front end) and `cif.*` train.
/// Returns the student model and parameters.
pub fn train_fad(
    teacher: (&StModel, &ParamStore),
    corpus: &[Utterance],
    fcfg: &FadConfig,
    seed: u64,
    log: &mut dyn FnMut(&TrainLogRow),
) -> Result<(StModel, ParamStore)> {
    fcfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::data("distillation needs a nonempty corpus"));
    }
    let (t_model, t_ps) = teacher;
    let mut s_ps = ParamStore::new();
    let s_model = StModel::new(&t_model.cfg, &mut s_ps, seed);
    let tensors = t_ps.tensors().into_iter().collect();
    s_ps.load_tensors(&tensors)?;
    s_ps.set_trainable_prefix("semantic.", false);
    s_ps.set_trainable_prefix("decoder.", false);

    let mut adam = Adam::new(
        AdamConfig { lr: fcfg.lr, warmup_steps: fcfg.warmup_steps, ..AdamConfig::default() },
        s_ps.len(),
    );
    let cs: Vec<Mat> = corpus
        .iter()
        .map(|u| s_model.speech_tokens(&s_ps, &u.frames_mat()))
        .collect::<Result<_>>()?;

    for epoch in 0..fcfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut shuffle_rng = component_rng(seed, "shuffle-fad", epoch as u64);
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(fcfg.batch_size) {
            let mut sum_w2v = 0.0;
            let mut sum_cif = 0.0;
            let mut clamped_n = 0usize;
            for &idx in batch {
                let c = &cs[idx];
                let mut cut_rng = component_rng(
                    seed,
                    "fad-cut",
                    ((epoch as u64) << 32) | idx as u64,
                );
                let t = sample_cut(c.rows, &mut cut_rng);
                let mut g = Graph::train(&s_ps);
                let (w2v, cif, clamped) =
                    fad_losses((t_model, t_ps), (&s_model, &s_ps), &mut g, c, t, fcfg.m)?;
                sum_w2v += g.tape.data(w2v).data[0];
                sum_cif += g.tape.data(cif).data[0];
                clamped_n += clamped as usize;
                let total = g.tape.add(w2v, cif);
                g.backward_into(total, &mut s_ps);
                // Frozen stacks must never grow gradient buffers.
                debug_assert!(s_ps
                    .find("semantic.ln_out.g")
                    .map(|id| s_ps.grad(id).is_none())
                    .unwrap_or(true));
            }
            let n = batch.len() as f64;
            let mean = (sum_w2v + sum_cif) / n;
            if !mean.is_finite() {
                return Err(Error::Diverged {
                    step: adam.step_count() + 1,
                    msg: format!("non-finite distillation loss {mean}"),
                });
            }
            s_ps.scale_grads(1.0 / n);
            s_ps.clip_grads(fcfg.clip_norm);
            adam.step(&mut s_ps);
            log(&TrainLogRow {
                step: adam.step_count(),
                stage: "fad".into(),
                epoch,
                loss: mean,
                loss_st: None,
                loss_len: None,
                loss_w2v: Some(sum_w2v / n),
                loss_cif: Some(sum_cif / n),
                dev_st: None,
                dev_total: None,
                clamped: Some(clamped_n),
            });
        }
    }
    Ok((s_model, s_ps))
}

/// Mean w2v-style loss over deterministic held-out cuts, for measuring how
/// far a model's masked encodings sit from the teacher's future-aware ones.
pub fn mean_heldout_w2v(
    teacher: (&StModel, &ParamStore),
    student: (&StModel, &ParamStore),
    corpus: &[Utterance],
    m: usize,
    seed: u64,
) -> Result<f64> {
    assert!(!corpus.is_empty());
    let mut total = 0.0;
    for (idx, utt) in corpus.iter().enumerate() {
        let c = student.0.speech_tokens(student.1, &utt.frames_mat())?;
        let mut rng = component_rng(seed, "fad-heldout-cut", idx as u64);
        let t = sample_cut(c.rows, &mut rng);
        let mut g = Graph::eval(student.1);
        let (w2v, _, _) = fad_losses(teacher, student, &mut g, &c, t, m)?;
        total += g.tape.data(w2v).data[0];
    }
    Ok(total / corpus.len() as f64)
}
