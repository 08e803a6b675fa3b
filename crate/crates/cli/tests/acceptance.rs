//! Acceptance gate: twelve numbered checks covering the numeric core, CIF,
//! latency metrics, the representation-gap phenomenon and its mitigations,
//! streaming quality orderings, policy contracts, freezing, and determinism.
//!
//! Runs as a plain binary (no libtest harness) so each criterion prints one
//! PASS/FAIL line unconditionally. Exits nonzero if any criterion fails.
//!
//! Scale: 2000 train / 200 test utterances, model seeds {11, 12, 13};
//! medians over the three seeds where a criterion calls for them.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fast_core::config::{FadConfig, ModelConfig, TrainConfig};
use fast_core::corpus::{generate, monotonic_level, split_by_monotonicity, SynthConfig, Utterance};
use fast_core::fad::train_fad;
use fast_core::gap::{reverse_position_profile, GapMode, SimilarityProfile};
use fast_core::metrics::{average_lagging, average_proportion, corpus_bleu, differentiable_average_lagging, TraceRecord};
use fast_core::model::{train_offline, StModel};
use fast_core::params::{Graph, ParamStore};
use fast_core::rng::component_rng;
use fast_core::stream::{sweep, Action, Session, StreamPolicy, SweepRow};
use fast_core::tensor::{cif_weights, gradcheck, normal, test_mat, CifMode, Mat};

const CORPUS_SEED: u64 = 1234;
const MODEL_SEEDS: [u64; 3] = [11, 12, 13];
const CHUNK: usize = 2;
const M_DEFAULT: usize = 20;

struct Gate {
    failed: Vec<usize>,
}

impl Gate {
    fn check(&mut self, n: usize, pass: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {n:2}: {verdict} - {detail}");
        if !pass {
            self.failed.push(n);
        }
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    xs[xs.len() / 2]
}

fn main() {
    let t0 = Instant::now();
    let mut gate = Gate { failed: Vec::new() };

    criterion_1(&mut gate);
    criterion_2(&mut gate);
    criterion_3(&mut gate);

    let scfg = SynthConfig::default();
    let train: Vec<Utterance> = generate(&scfg, CORPUS_SEED, "train", 2000);
    let dev: Vec<Utterance> = generate(&scfg, CORPUS_SEED, "dev", 200);
    let test: Vec<Utterance> = generate(&scfg, CORPUS_SEED, "test", 200);

    let runs: Vec<SeedRun> = MODEL_SEEDS
        .iter()
        .map(|&seed| SeedRun::build(seed, &train, &dev, &test))
        .collect();

    criterion_4(&mut gate, &runs);
    criterion_5(&mut gate, &runs);
    criterion_6(&mut gate, &runs);
    criterion_7(&mut gate, &runs);
    criterion_8(&mut gate, &runs);
    criterion_9(&mut gate, &runs, &test);
    criterion_10(&mut gate, &runs, &test);
    criterion_11(&mut gate, &runs, &train);
    criterion_12(&mut gate);

    let mins = t0.elapsed().as_secs_f64() / 60.0;
    if gate.failed.is_empty() {
        println!("acceptance: all 12 criteria passed ({mins:.1} min)");
    } else {
        println!("acceptance: FAILED criteria {:?} ({mins:.1} min)", gate.failed);
        std::process::exit(1);
    }
}

// ── Per-seed artifacts ──────────────────────────────────────────────────────

struct SeedRun {
    seed: u64,
    teacher: StModel,
    tps: ParamStore,
    student: StModel,
    sps: ParamStore,
    /// (mode, m, k) -> sweep row. Baseline rows are stored under m = 0.
    rows: BTreeMap<(&'static str, usize, usize), SweepRow>,
    offline_bleu: f64,
    gap_vanilla: SimilarityProfile,
    gap_fai: SimilarityProfile,
    gap_fast: SimilarityProfile,
}

impl SeedRun {
    fn build(seed: u64, train: &[Utterance], dev: &[Utterance], test: &[Utterance]) -> Self {
        let mcfg = ModelConfig::default();
        let tcfg = TrainConfig::default();
        let fcfg = FadConfig::default();
        let dir = tempfile::tempdir().expect("tempdir");

        eprintln!("[seed {seed}] offline training...");
        let t = Instant::now();
        let mut sink = |_row: &fast_core::model::TrainLogRow| {};
        let (teacher, tps, _summary) =
            train_offline(&mcfg, &tcfg, train, dev, seed, dir.path(), None, &mut sink)
                .expect("offline training");
        eprintln!("[seed {seed}] offline done in {:.1}s", t.elapsed().as_secs_f64());

        let t = Instant::now();
        let (student, sps) =
            train_fad((&teacher, &tps), train, &fcfg, seed, &mut sink).expect("fad");
        eprintln!("[seed {seed}] fad done in {:.1}s", t.elapsed().as_secs_f64());

        let t = Instant::now();
        let mut rows = BTreeMap::new();
        let mut put = |tag: &'static str, m: usize, got: Vec<SweepRow>| {
            for row in got {
                rows.insert((tag, m, row.k), row);
            }
        };
        put(
            "baseline",
            0,
            sweep(&teacher, &tps, test, &[1, 3, 30], StreamPolicy::baseline(1, CHUNK), "baseline").unwrap(),
        );
        put(
            "fai",
            M_DEFAULT,
            sweep(&teacher, &tps, test, &[1, 3, 9, 30], StreamPolicy::fai(1, M_DEFAULT, 1.0, CHUNK), "fai")
                .unwrap(),
        );
        put(
            "fai",
            50,
            sweep(&teacher, &tps, test, &[9], StreamPolicy::fai(1, 50, 1.0, CHUNK), "fai").unwrap(),
        );
        put(
            "fast",
            M_DEFAULT,
            sweep(&student, &sps, test, &[1, 3, 30], StreamPolicy::fai(1, M_DEFAULT, 1.0, CHUNK), "fast")
                .unwrap(),
        );

        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        for utt in test {
            hyps.push(teacher.decode_offline(&tps, utt).expect("offline decode"));
            refs.push(utt.tgt_tokens.clone());
        }
        let offline_bleu = corpus_bleu(&hyps, &refs);
        eprintln!("[seed {seed}] sweeps done in {:.1}s", t.elapsed().as_secs_f64());

        let t = Instant::now();
        let gap_vanilla =
            reverse_position_profile(&teacher, &tps, test, GapMode::Vanilla, "vanilla", 100)
                .expect("gap vanilla");
        let fai_mode = GapMode::Fai { m: M_DEFAULT, p: 1.0 };
        let gap_fai = reverse_position_profile(&teacher, &tps, test, fai_mode, "fai", 100)
            .expect("gap fai");
        let gap_fast = reverse_position_profile(&student, &sps, test, fai_mode, "fast", 100)
            .expect("gap fast");
        eprintln!("[seed {seed}] gap profiles done in {:.1}s", t.elapsed().as_secs_f64());

        SeedRun { seed, teacher, tps, student, sps, rows, offline_bleu, gap_vanilla, gap_fai, gap_fast }
    }

    fn bleu(&self, mode: &'static str, m: usize, k: usize) -> f64 {
        self.rows
            .get(&(mode, m, k))
            .unwrap_or_else(|| panic!("missing sweep row {mode}/m{m}/k{k}"))
            .report
            .bleu
    }
}

// ── Criterion 1: finite-difference gradient checks ──────────────────────────

fn criterion_1(gate: &mut Gate) {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut worst: (f64, &'static str) = (0.0, "none");
    let mut ops = 0usize;

    let mut run = |name: &'static str, f: &dyn Fn(u64) -> f64| {
        ops += 1;
        for inst in 0..20u64 {
            let err = f(inst);
            if err > worst.0 {
                worst = (err, name);
            }
        }
    };

    let m = |r, c, i: u64, tag: &str| test_mat(r, c, 1000 + i, tag);
    // Positive-entry matrix bounded away from zero, for recip and the like.
    let pos = |r, c, i: u64, tag: &str| {
        let mut x = test_mat(r, c, 2000 + i, tag);
        for v in x.data.iter_mut() {
            *v = v.abs() + 0.5;
        }
        x
    };
    // Entries squashed into (0,1) for probability-space ops.
    let prob = |r, c, i: u64, tag: &str| {
        let mut x = test_mat(r, c, 3000 + i, tag);
        for v in x.data.iter_mut() {
            *v = 1.0 / (1.0 + (-*v).exp()).clamp(1.02, 50.0);
        }
        x
    };

    run("matmul", &|i| {
        gradcheck::check(&[m(3, 4, i, "mm.a"), m(4, 2, i, "mm.b")], H, |t, l| {
            let y = t.matmul(l[0], l[1]);
            t.mean_all(y)
        })
        .max_rel_err
    });
    run("transpose", &|i| {
        gradcheck::check(&[m(3, 4, i, "tr")], H, |t, l| {
            let y = t.transpose(l[0]);
            let y2 = t.square(y);
            t.mean_all(y2)
        })
        .max_rel_err
    });
    run("add", &|i| {
        gradcheck::check(&[m(3, 3, i, "add.a"), m(3, 3, i, "add.b")], H, |t, l| {
            let y = t.add(l[0], l[1]);
            let y2 = t.square(y);
            t.mean_all(y2)
        })
        .max_rel_err
    });
    run("sub", &|i| {
        gradcheck::check(&[m(3, 3, i, "sub.a"), m(3, 3, i, "sub.b")], H, |t, l| {
            let y = t.sub(l[0], l[1]);
            let y2 = t.square(y);
            t.mean_all(y2)
        })
        .max_rel_err
    });
    run("mul", &|i| {
        gradcheck::check(&[m(3, 3, i, "mul.a"), m(3, 3, i, "mul.b")], H, |t, l| {
            let y = t.mul(l[0], l[1]);
            t.mean_all(y)
        })
        .max_rel_err
    });
    run("square", &|i| {
        gradcheck::check(&[m(3, 3, i, "sq")], H, |t, l| {
            let y = t.square(l[0]);
            t.mean_all(y)
        })
        .max_rel_err
    });
    run("scale", &|i| {
        gradcheck::check(&[m(3, 3, i, "sc")], H, |t, l| {
            let y = t.scale(l[0], -1.75);
            let y2 = t.square(y);
            t.mean_all(y2)
        })
        .max_rel_err
    });
    run("add_const", &|i| {
        gradcheck::check(&[m(3, 3, i, "ac")], H, |t, l| {
            let y = t.add_const(l[0], 0.37);
            let y2 = t.square(y);
            t.mean_all(y2)
        })
        .max_rel_err
    });
    run("add_row", &|i| {
        gradcheck::check(&[m(4, 3, i, "ar.x"), m(1, 3, i, "ar.r")], H, |t, l| {
            let y = t.add_row(l[0], l[1]);
            let y2 = t.square(y);
            t.mean_all(y2)
        })
        .max_rel_err
    });
    run("scale_by_scalar", &|i| {
        gradcheck::check(&[m(3, 3, i, "ss.x"), m(1, 1, i, "ss.s")], H, |t, l| {
            let y = t.scale_by_scalar(l[0], l[1]);
            let y2 = t.square(y);
            t.mean_all(y2)
        })
        .max_rel_err
    });
    run("recip", &|i| {
        gradcheck::check(&[pos(3, 3, i, "rc")], H, |t, l| {
            let y = t.recip(l[0]);
            t.mean_all(y)
        })
        .max_rel_err
    });
    run("gelu", &|i| {
        gradcheck::check(&[m(3, 4, i, "ge")], H, |t, l| {
            let y = t.gelu(l[0]);
            t.mean_all(y)
        })
        .max_rel_err
    });
    run("sigmoid", &|i| {
        gradcheck::check(&[m(3, 4, i, "sg")], H, |t, l| {
            let y = t.sigmoid(l[0]);
            t.mean_all(y)
        })
        .max_rel_err
    });
    run("softmax_rows", &|i| {
        gradcheck::check(&[m(3, 5, i, "sm")], H, |t, l| {
            let y = t.softmax_rows(l[0]);
            let y2 = t.square(y);
            t.mean_all(y2)
        })
        .max_rel_err
    });
    run("layer_norm", &|i| {
        gradcheck::check(&[m(3, 6, i, "ln.x"), m(1, 6, i, "ln.g"), m(1, 6, i, "ln.b")], H, |t, l| {
            let y = t.layer_norm(l[0], l[1], l[2], 1e-5);
            let y2 = t.square(y);
            t.mean_all(y2)
        })
        .max_rel_err
    });
    run("sum_all", &|i| {
        gradcheck::check(&[m(3, 3, i, "sa")], H, |t, l| t.sum_all(l[0])).max_rel_err
    });
    run("mean_all", &|i| {
        gradcheck::check(&[m(3, 3, i, "ma")], H, |t, l| t.mean_all(l[0])).max_rel_err
    });
    run("slice_rows", &|i| {
        gradcheck::check(&[m(5, 3, i, "sr")], H, |t, l| {
            let y = t.slice_rows(l[0], 1, 4);
            let y2 = t.square(y);
            t.mean_all(y2)
        })
        .max_rel_err
    });
    run("slice_cols", &|i| {
        gradcheck::check(&[m(3, 5, i, "sc2")], H, |t, l| {
            let y = t.slice_cols(l[0], 1, 4);
            let y2 = t.square(y);
            t.mean_all(y2)
        })
        .max_rel_err
    });
    run("concat_rows", &|i| {
        gradcheck::check(&[m(2, 3, i, "cr.a"), m(3, 3, i, "cr.b")], H, |t, l| {
            let y = t.concat_rows(&[l[0], l[1]]);
            let y2 = t.square(y);
            t.mean_all(y2)
        })
        .max_rel_err
    });
    run("concat_cols", &|i| {
        gradcheck::check(&[m(3, 2, i, "cc.a"), m(3, 3, i, "cc.b")], H, |t, l| {
            let y = t.concat_cols(&[l[0], l[1]]);
            let y2 = t.square(y);
            t.mean_all(y2)
        })
        .max_rel_err
    });
    run("repeat_row", &|i| {
        gradcheck::check(&[m(1, 4, i, "rr")], H, |t, l| {
            let y = t.repeat_row(l[0], 5);
            let y2 = t.square(y);
            t.mean_all(y2)
        })
        .max_rel_err
    });
    run("gather_rows", &|i| {
        gradcheck::check(&[m(5, 3, i, "gr")], H, |t, l| {
            let y = t.gather_rows(l[0], &[0, 2, 2, 4]);
            let y2 = t.square(y);
            t.mean_all(y2)
        })
        .max_rel_err
    });
    run("cross_entropy_sum", &|i| {
        gradcheck::check(&[m(4, 6, i, "ce")], H, |t, l| {
            t.cross_entropy_sum(l[0], &[1, 0, 5, 2], 0.1)
        })
        .max_rel_err
    });
    run("cosine_rows", &|i| {
        gradcheck::check(&[m(3, 5, i, "co.a"), m(3, 5, i, "co.b")], H, |t, l| {
            let y = t.cosine_rows(l[0], l[1]);
            t.mean_all(y)
        })
        .max_rel_err
    });
    run("bernoulli_kl_sum", &|i| {
        gradcheck::check(&[prob(1, 6, i, "kl.p"), prob(1, 6, i, "kl.q")], H, |t, l| {
            t.bernoulli_kl_sum(l[0], l[1], 1e-6)
        })
        .max_rel_err
    });
    run("cif_offline", &|i| {
        gradcheck::check(&[m(1, 7, i, "cifo.w"), m(7, 3, i, "cifo.a")], H, |t, l| {
            let alpha = t.sigmoid(l[0]);
            let (h, _aux) =
                t.cif_integrate(alpha, l[1], 1.0, CifMode::Offline { tail_threshold: 0.5 });
            let y2 = t.square(h);
            t.mean_all(y2)
        })
        .max_rel_err
    });
    run("cif_forced", &|i| {
        gradcheck::check(&[m(1, 7, i, "ciff.w"), m(7, 3, i, "ciff.a")], H, |t, l| {
            let raw = t.sigmoid(l[0]);
            let sum = t.sum_all(raw);
            let inv = t.recip(sum);
            let scaled0 = t.scale_by_scalar(raw, inv);
            let scaled = t.scale(scaled0, 2.0);
            let (h, _aux) = t.cif_integrate(scaled, l[1], 1.0, CifMode::ForceUnits(2));
            let y2 = t.square(h);
            t.mean_all(y2)
        })
        .max_rel_err
    });

    gate.check(
        1,
        worst.0 < TOL,
        format!("{ops} ops x 20 instances; worst rel err {:.2e} ({})", worst.0, worst.1),
    );
}

// ── Criterion 2: CIF conservation, forced firing count, Eq. 3 loss ─────────

fn criterion_2(gate: &mut Gate) {
    let mut rng = component_rng(77, "acceptance-cif", 0);
    let mut worst_cons = 0.0f64;
    let mut exact_j = true;
    let mut worst_len = 0.0f64;

    for inst in 0..200 {
        let n = 5 + (inst % 36);
        let alpha: Vec<f64> =
            (0..n).map(|_| 1.0 / (1.0 + (-normal(&mut rng)).exp())).collect();
        let sum: f64 = alpha.iter().sum();
        let j = 1 + (inst % 7).min(n - 1);

        // Forced mode: pre-scale so total mass is exactly J * beta.
        let scaled: Vec<f64> = alpha.iter().map(|a| a * j as f64 / sum).collect();
        let (weights, aux) = cif_weights(&scaled, 1.0, CifMode::ForceUnits(j));
        if aux.units != j || weights.len() != j {
            exact_j = false;
        }
        let emitted: f64 = weights.iter().flatten().map(|(_, w)| w).sum();
        let total: f64 = scaled.iter().sum();
        worst_cons = worst_cons.max((emitted - total).abs());

        // Eq. 3 length loss against the direct formula.
        let ps = ParamStore::new();
        let mut g = Graph::eval(&ps);
        let alpha_id = g.tape.leaf(Mat::from_vec(1, n, alpha.clone()), false);
        let head = dummy_cif_head();
        let loss = head.length_loss(&mut g, alpha_id, j);
        let direct = (j as f64 - sum).abs();
        worst_len = worst_len.max((g.tape.data(loss).data[0] - direct).abs());
    }

    let pass = worst_cons <= 1e-12 && exact_j && worst_len <= 1e-12;
    gate.check(
        2,
        pass,
        format!(
            "200 instances; conservation dev {worst_cons:.2e}, forced J exact: {exact_j}, len-loss dev {worst_len:.2e}"
        ),
    );
}

fn dummy_cif_head() -> fast_core::cif::CifHead {
    let cfg = ModelConfig::default();
    let mut ps = ParamStore::new();
    let mut rng = component_rng(1, "acceptance-cif-head", 0);
    fast_core::cif::CifHead::new(&cfg, &mut ps, &mut rng)
}

// ── Criterion 3: latency metrics vs a brute-force oracle ───────────────────

fn al_oracle(src: f64, g: &[f64]) -> f64 {
    let n = g.len() as f64;
    let gamma = n / src;
    let mut tau = g.len();
    for (j, &d) in g.iter().enumerate() {
        if d >= src {
            tau = j + 1;
            break;
        }
    }
    let mut s = 0.0;
    for j in 1..=tau {
        s += g[j - 1] - (j as f64 - 1.0) / gamma;
    }
    s / tau as f64
}

fn ap_oracle(src: f64, g: &[f64]) -> f64 {
    g.iter().sum::<f64>() / (src * g.len() as f64)
}

fn dal_oracle(src: f64, g: &[f64]) -> f64 {
    let n = g.len() as f64;
    let inv_gamma = src / n;
    let mut dprev = 0.0f64;
    let mut s = 0.0;
    for (j, &d) in g.iter().enumerate() {
        let dj = if j == 0 { d } else { d.max(dprev + inv_gamma) };
        s += dj - (j as f64) * inv_gamma;
        dprev = dj;
    }
    s / n
}

fn criterion_3(gate: &mut Gate) {
    let mut rng = component_rng(99, "acceptance-latency", 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = 1 + (normal(&mut rng).abs() * 6.0) as usize;
        let src = 4.0 + normal(&mut rng).abs() * 30.0;
        let mut g: Vec<f64> = Vec::with_capacity(n);
        let mut cur = 0.0;
        for _ in 0..n {
            cur += normal(&mut rng).abs() * src / n as f64;
            g.push(cur.min(src * 1.5));
        }
        let al = average_lagging(src, &g).expect("nonempty");
        let ap = average_proportion(src, &g).expect("nonempty");
        let dal = differentiable_average_lagging(src, &g).expect("nonempty");
        worst = worst
            .max((al - al_oracle(src, &g)).abs())
            .max((ap - ap_oracle(src, &g)).abs())
            .max((dal - dal_oracle(src, &g)).abs());
    }

    let hand = vec![2.0, 4.0, 6.0, 8.0, 10.0];
    let al = average_lagging(10.0, &hand).unwrap();
    let ap = average_proportion(10.0, &hand).unwrap();
    let hand_ok = (al - 2.0).abs() < 1e-12 && (ap - 0.6).abs() < 1e-12;

    gate.check(
        3,
        worst <= 1e-9 && hand_ok,
        format!("100 random traces, max |impl - oracle| {worst:.2e}; hand trace AL={al}, AP={ap}"),
    );
}

// ── Criteria 4-6: representation gap and its mitigation ─────────────────────

fn criterion_4(gate: &mut Gate, runs: &[SeedRun]) {
    let mut margins: Vec<f64> = Vec::new();
    let mut tails_ok = 0usize;
    let mut detail = String::new();
    for run in runs {
        let s1 = run.gap_vanilla.mean_at(1).expect("s1");
        let s20 = run.gap_vanilla.mean_at(20).expect("s20");
        margins.push(s20 - s1);
        let tail = (11..=20).all(|tau| run.gap_vanilla.mean_at(tau).is_some_and(|v| v > s1));
        tails_ok += tail as usize;
        detail.push_str(&format!("[seed {} s1={s1:.3} s20={s20:.3}] ", run.seed));
    }
    let med = median(&mut margins);
    gate.check(
        4,
        med >= 0.15 && tails_ok >= 2,
        format!("median(s20-s1)={med:.4} (need >= 0.15), tail-dominance on {tails_ok}/3 seeds; {detail}"),
    );
}

fn criterion_5(gate: &mut Gate, runs: &[SeedRun]) {
    let mut gains: Vec<f64> = runs
        .iter()
        .map(|r| r.gap_fai.mean_at(1).unwrap() - r.gap_vanilla.mean_at(1).unwrap())
        .collect();
    let med = median(&mut gains);
    gate.check(5, med >= 0.10, format!("median FAI s1 gain {med:+.4} (need >= +0.10)"));
}

fn criterion_6(gate: &mut Gate, runs: &[SeedRun]) {
    let mut gains: Vec<f64> = runs
        .iter()
        .map(|r| r.gap_fast.mean_at(1).unwrap() - r.gap_fai.mean_at(1).unwrap())
        .collect();
    let med = median(&mut gains);
    gate.check(6, med >= 0.0, format!("median FAST-over-FAI s1 gain {med:+.4} (need >= 0)"));
}

// ── Criteria 7-8: streaming quality orderings ───────────────────────────────

fn criterion_7(gate: &mut Gate, runs: &[SeedRun]) {
    let diff = |f: &dyn Fn(&SeedRun) -> f64| {
        let mut xs: Vec<f64> = runs.iter().map(f).collect();
        median(&mut xs)
    };
    let fai_gain_k1 = diff(&|r| r.bleu("fai", M_DEFAULT, 1) - r.bleu("baseline", 0, 1));
    let fai_gain_k3 = diff(&|r| r.bleu("fai", M_DEFAULT, 3) - r.bleu("baseline", 0, 3));
    let fast_gain_k1 = diff(&|r| r.bleu("fast", M_DEFAULT, 1) - r.bleu("fai", M_DEFAULT, 1));
    let fast_gain_k3 = diff(&|r| r.bleu("fast", M_DEFAULT, 3) - r.bleu("fai", M_DEFAULT, 3));
    let k30_dev = diff(&|r| {
        [r.bleu("baseline", 0, 30), r.bleu("fai", M_DEFAULT, 30), r.bleu("fast", M_DEFAULT, 30)]
            .iter()
            .map(|b| (b - r.offline_bleu).abs())
            .fold(0.0, f64::max)
    });
    let pass = fai_gain_k1 >= 1.0
        && fai_gain_k3 >= 1.0
        && fast_gain_k1 >= 0.0
        && fast_gain_k3 >= 0.0
        && k30_dev <= 2.0;
    gate.check(
        7,
        pass,
        format!(
            "median FAI-B: k1 {fai_gain_k1:+.2}, k3 {fai_gain_k3:+.2} (need >= +1.0); \
             FAST-FAI: k1 {fast_gain_k1:+.2}, k3 {fast_gain_k3:+.2} (need >= 0); \
             k30 max |mode-offline| {k30_dev:.2} (need <= 2)"
        ),
    );
}

fn criterion_8(gate: &mut Gate, runs: &[SeedRun]) {
    let diff = |f: &dyn Fn(&SeedRun) -> f64| {
        let mut xs: Vec<f64> = runs.iter().map(f).collect();
        median(&mut xs)
    };
    let sat = diff(&|r| (r.bleu("fai", M_DEFAULT, 9) - r.bleu("fai", 50, 9)).abs());
    let m0_k1 = diff(&|r| r.bleu("fai", M_DEFAULT, 1) - r.bleu("baseline", 0, 1));
    let m0_k3 = diff(&|r| r.bleu("fai", M_DEFAULT, 3) - r.bleu("baseline", 0, 3));
    let pass = sat < 1.5 && m0_k1 >= 1.0 && m0_k3 >= 1.0;
    gate.check(
        8,
        pass,
        format!(
            "median |m20-m50| at k9 = {sat:.2} (need < 1.5); m20-over-m0: k1 {m0_k1:+.2}, k3 {m0_k3:+.2} (need >= +1.0)"
        ),
    );
}

// ── Criterion 9: policy contracts ───────────────────────────────────────────

fn criterion_9(gate: &mut Gate, runs: &[SeedRun], test: &[Utterance]) {
    // Trace-level checks across every sweep row of every seed.
    let mut traces = 0usize;
    let mut monotone_ok = true;
    for run in runs {
        for row in run.rows.values() {
            for tr in &row.traces {
                traces += 1;
                monotone_ok &= tr.delays_ms.windows(2).all(|w| w[1] >= w[0]);
                monotone_ok &= tr.delays_ms.len() == tr.hyp.len();
            }
        }
    }

    // Stepwise audit with the instrumented session: wait-k arithmetic before
    // exhaustion, no retraction, and p = 1.0 never exposing mask rows.
    let run0 = &runs[0];
    let stride = run0.teacher.acoustic.stride;
    let mut waitk_ok = true;
    let mut mask_ok = true;
    let mut retract_ok = true;
    let mut audited = 0usize;
    for utt in test.iter().take(60) {
        for policy in [
            StreamPolicy::baseline(1, CHUNK),
            StreamPolicy::baseline(3, CHUNK),
            StreamPolicy::fai(1, M_DEFAULT, 1.0, CHUNK),
            StreamPolicy::fai(3, M_DEFAULT, 1.0, CHUNK),
        ] {
            audited += 1;
            let k = policy.k;
            let mut sess = Session::new(&run0.teacher, &run0.tps, utt, policy).expect("session");
            let mut prev_hyp: Vec<u32> = Vec::new();
            loop {
                let before = sess.emitted().len();
                let exhausted_before = sess.source_exhausted();
                let act = sess.step().expect("step");
                match act {
                    Action::Write(_) => {
                        if !exhausted_before && sess.detected_units() < before + k {
                            waitk_ok = false;
                        }
                        let hyp = sess.emitted();
                        if hyp.len() != before + 1 || !hyp.starts_with(&prev_hyp) {
                            retract_ok = false;
                        }
                        prev_hyp = hyp.to_vec();
                    }
                    Action::Read => {
                        let real_rows = if sess.source_exhausted() {
                            sess.consumed_frames().div_ceil(stride)
                        } else {
                            sess.consumed_frames() / stride
                        };
                        if let Some(rows) = sess.encoded_rows() {
                            if rows != real_rows {
                                mask_ok = false;
                            }
                        }
                    }
                    Action::Done => break,
                }
            }
        }
    }

    let pass = monotone_ok && waitk_ok && mask_ok && retract_ok;
    gate.check(
        9,
        pass,
        format!(
            "{traces} traces monotone: {monotone_ok}; {audited} audited sessions: wait-k {waitk_ok}, no-retraction {retract_ok}, mask rows hidden {mask_ok}"
        ),
    );
}

// ── Criterion 10: FAI gain by monotonicity group ────────────────────────────

fn criterion_10(gate: &mut Gate, runs: &[SeedRun], test: &[Utterance]) {
    let groups = split_by_monotonicity(test, 3);
    let group_bleu = |row: &SweepRow, members: &[usize]| {
        let by_id: BTreeMap<&str, &TraceRecord> =
            row.traces.iter().map(|t| (t.id.as_str(), t)).collect();
        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        for &i in members {
            let tr = by_id.get(test[i].id.as_str()).expect("trace per utterance");
            hyps.push(tr.hyp.clone());
            refs.push(tr.ref_tokens.clone());
        }
        corpus_bleu(&hyps, &refs)
    };

    let mut deltas: Vec<f64> = Vec::new();
    let mut detail = String::new();
    for run in runs {
        let b = &run.rows[&("baseline", 0, 1)];
        let f = &run.rows[&("fai", M_DEFAULT, 1)];
        let gain_easy = group_bleu(f, &groups[0]) - group_bleu(b, &groups[0]);
        let gain_hard = group_bleu(f, &groups[2]) - group_bleu(b, &groups[2]);
        deltas.push(gain_hard - gain_easy);
        detail.push_str(&format!("[seed {} easy {gain_easy:+.2} hard {gain_hard:+.2}] ", run.seed));
    }
    let med = median(&mut deltas);
    let mean_m: f64 =
        test.iter().map(|u| monotonic_level(&u.alignment)).sum::<f64>() / test.len() as f64;
    gate.check(
        10,
        med >= 0.0,
        format!("median(hard-easy FAI gain at k=1) {med:+.2} (need >= 0); corpus mean M {mean_m:.2}; {detail}"),
    );
}

// ── Criterion 11: freezing contracts ────────────────────────────────────────

fn criterion_11(gate: &mut Gate, runs: &[SeedRun], train: &[Utterance]) {
    let run0 = &runs[0];
    let t_tensors: BTreeMap<String, Mat> =
        run0.teacher.export_tensors(&run0.tps).into_iter().collect();
    let s_tensors: BTreeMap<String, Mat> =
        run0.student.export_tensors(&run0.sps).into_iter().collect();

    let bits = |m: &Mat| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut frozen_ok = true;
    let mut frozen_n = 0usize;
    for (name, t) in &t_tensors {
        if name.starts_with("semantic.") || name.starts_with("decoder.") {
            frozen_n += 1;
            match s_tensors.get(name) {
                Some(s) if bits(s) == bits(t) => {}
                _ => frozen_ok = false,
            }
        }
    }
    let acoustic_moved = t_tensors.iter().any(|(name, t)| {
        name.starts_with("acoustic.")
            && s_tensors.get(name).map(|s| bits(s) != bits(t)).unwrap_or(false)
    });

    let fcfg = FadConfig { epochs: 0, ..FadConfig::default() };
    let mut sink = |_row: &fast_core::model::TrainLogRow| {};
    let (zt, zps) = train_fad((&run0.teacher, &run0.tps), train, &fcfg, run0.seed, &mut sink)
        .expect("0-epoch fad");
    let z_tensors: BTreeMap<String, Mat> = zt.export_tensors(&zps).into_iter().collect();
    let zero_ok = z_tensors.len() == t_tensors.len()
        && z_tensors.iter().all(|(n, m)| t_tensors.get(n).map(|t| bits(t) == bits(m)) == Some(true));

    gate.check(
        11,
        frozen_ok && zero_ok && acoustic_moved,
        format!(
            "{frozen_n} semantic/decoder tensors bit-frozen: {frozen_ok}; acoustic updated: {acoustic_moved}; 0-step student identical: {zero_ok}"
        ),
    );
}

// ── Criterion 12: end-to-end determinism through the CLI ───────────────────

fn criterion_12(gate: &mut Gate) {
    let tmp = tempfile::tempdir().expect("tempdir");
    let run_pipeline = |dir: &Path| {
        let d = dir.to_str().unwrap();
        let steps: Vec<Vec<&str>> = vec![
            vec!["gen-data", "--out-dir", d, "--seed", "21", "--n-train", "60", "--n-dev", "12", "--n-test", "12", "--quiet"],
            vec!["train-offline", "--out-dir", d, "--seed", "21", "--pretrain-epochs", "1", "--stage1-epochs", "1", "--stage2-epochs", "2", "--quiet"],
            vec!["train-fad", "--out-dir", d, "--seed", "21", "-m", "12", "--epochs", "1", "--quiet"],
            vec![
                "eval-streaming", "--out-dir", d, "--seed", "21", "--k-list", "1,3", "-m", "12",
                "--modes", "baseline,fai,fast", "--student", "STUDENT", "--quiet",
            ],
            vec!["analyze-gap", "--out-dir", d, "--seed", "21", "--mode", "baseline", "--quiet"],
        ];
        let student = dir.join("student.fastckpt");
        for step in steps {
            let args: Vec<&str> = step
                .iter()
                .map(|a| if *a == "STUDENT" { student.to_str().unwrap() } else { *a })
                .collect();
            let out = Command::new(env!("CARGO_BIN_EXE_fast"))
                .args(&args)
                .output()
                .expect("spawn");
            assert!(
                out.status.success(),
                "pipeline step {:?} failed: {}",
                args[0],
                String::from_utf8_lossy(&out.stderr)
            );
        }
    };

    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_pipeline(&a);
    run_pipeline(&b);

    let mut identical = true;
    let mut compared = 0usize;
    for f in ["metrics.csv", "gap-profile.csv"] {
        let ba = std::fs::read(a.join(f)).expect(f);
        let bb = std::fs::read(b.join(f)).expect(f);
        compared += 1;
        identical &= ba == bb;
    }
    gate.check(
        12,
        identical,
        format!("two fixed-seed CLI pipelines, {compared} metric CSVs byte-compared: identical = {identical}"),
    );
}
