//! Command-line driver: synthetic data generation, offline training,
//! future-aware distillation, streaming evaluation sweeps, representation-gap
//! analysis, and metric computation from trace files.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use fast_core::ckpt::write_atomic;
use fast_core::config::{EvalConfig, FadConfig, Profile, TrainConfig};
use fast_core::corpus::{self, SynthConfig, Utterance};
use fast_core::gap::{self, GapMode};
use fast_core::metrics::{self, TraceRecord};
use fast_core::model::{StModel, TrainLogRow};
use fast_core::params::ParamStore;
use fast_core::stream::{self, StreamPolicy};
use fast_core::{fad, Error};

#[derive(Parser)]
#[command(
    name = "fast",
    version,
    about = "Streaming speech translation testbed: training, inference, analysis"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct Common {
    /// Base seed for every stochastic component.
    #[arg(long, global = true, default_value_t = 17)]
    seed: u64,
    /// Directory all artifacts are read from / written to by default.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    /// Hyperparameter profile: desk-scale defaults or the paper's values.
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Toy)]
    profile: ProfileArg,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProfileArg {
    Toy,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Profile {
        match p {
            ProfileArg::Toy => Profile::Toy,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic train/dev/test corpora as JSONL files.
    GenData(GenArgs),
    /// Run masked pretraining and the two offline finetuning stages.
    TrainOffline(TrainArgs),
    /// Distill a streaming-robust student from an offline teacher.
    TrainFad(FadArgs),
    /// Run wait-k sweeps and write delay traces plus a metrics CSV.
    EvalStreaming(EvalArgs),
    /// Compare prefix encodings against full-utterance encodings.
    AnalyzeGap(GapArgs),
    /// Aggregate existing trace files into a metrics CSV.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_dev: usize,
    #[arg(long, default_value_t = 200)]
    n_test: usize,
    /// Overwrite existing corpus files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus (default: <out-dir>/train.jsonl).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Dev corpus for model selection (default: <out-dir>/dev.jsonl).
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Continue from a progress checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
}

#[derive(Args)]
struct FadArgs {
    /// Teacher checkpoint (default: <out-dir>/teacher.fastckpt).
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Training corpus (default: <out-dir>/train.jsonl).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Number of mask embeddings appended per prefix.
    #[arg(short, long)]
    m: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Permit m <= 10 despite the starved future context.
    #[arg(long)]
    allow_small_m: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Teacher checkpoint (default: <out-dir>/teacher.fastckpt).
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Student checkpoint; required for the fast mode.
    #[arg(long)]
    student: Option<PathBuf>,
    /// Evaluation corpus (default: <out-dir>/test.jsonl).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated wait-k values.
    #[arg(long, value_delimiter = ',')]
    k_list: Option<Vec<usize>>,
    #[arg(short, long)]
    m: Option<usize>,
    /// Mask-row discard rate.
    #[arg(short, long)]
    p: Option<f64>,
    #[arg(long)]
    chunk_frames: Option<usize>,
    /// Comma-separated subset of baseline,fai,fast.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
}

#[derive(Args)]
struct GapArgs {
    /// Teacher checkpoint (default: <out-dir>/teacher.fastckpt).
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Student checkpoint; required for the fast mode.
    #[arg(long)]
    student: Option<PathBuf>,
    /// Analysis corpus (default: <out-dir>/test.jsonl).
    #[arg(long)]
    data: Option<PathBuf>,
    /// baseline | fai | fast | all.
    #[arg(long, default_value = "all")]
    mode: String,
    #[arg(short, long)]
    m: Option<usize>,
    #[arg(long, default_value_t = gap::DEFAULT_T_MAX)]
    t_max: usize,
    #[arg(long, default_value_t = gap::DEFAULT_N_GROUPS)]
    n_groups: usize,
}

#[derive(Args)]
struct MetricsArgs {
    /// Trace JSONL files to aggregate.
    #[arg(long, required = true, num_args = 1..)]
    traces: Vec<PathBuf>,
    /// Output CSV (default: <out-dir>/metrics.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(Error::Diverged { .. }) => 3,
            Failure::Core(_) => 2,
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                std::process::exit(0);
            }
            let _ = e.print();
            std::process::exit(1);
        }
    };
    if let Err(f) = run(cli) {
        match &f {
            Failure::Usage(msg) => eprintln!("usage error: {msg}"),
            Failure::Core(e) => eprintln!("error: {e}"),
        }
        std::process::exit(f.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    std::fs::create_dir_all(&cli.common.out_dir).map_err(Error::from)?;
    match cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(&cli.common, &args),
        Cmd::TrainOffline(args) => cmd_train_offline(&cli.common, &args),
        Cmd::TrainFad(args) => cmd_train_fad(&cli.common, &args),
        Cmd::EvalStreaming(args) => cmd_eval_streaming(&cli.common, &args),
        Cmd::AnalyzeGap(args) => cmd_analyze_gap(&cli.common, &args),
        Cmd::Metrics(args) => cmd_metrics(&cli.common, &args),
    }
}

fn say(common: &Common, msg: std::fmt::Arguments) {
    if !common.quiet {
        eprintln!("{msg}");
    }
}

fn default_path(common: &Common, name: &str) -> PathBuf {
    common.out_dir.join(name)
}

fn load_model(path: &Path) -> Result<(StModel, ParamStore), Failure> {
    StModel::load_checkpoint(path).map_err(Failure::from)
}

fn read_corpus(path: &Path) -> Result<Vec<Utterance>, Failure> {
    Ok(corpus::read_jsonl(path)?)
}

fn cmd_gen_data(common: &Common, args: &GenArgs) -> Result<(), Failure> {
    let splits =
        [("train", args.n_train), ("dev", args.n_dev), ("test", args.n_test)];
    let paths: Vec<PathBuf> =
        splits.iter().map(|(s, _)| default_path(common, &format!("{s}.jsonl"))).collect();
    if !args.force {
        for p in &paths {
            if p.exists() {
                return Err(Failure::usage(format!(
                    "{} already exists; pass --force to overwrite",
                    p.display()
                )));
            }
        }
    }
    let cfg = SynthConfig::default();
    for ((split, n), path) in splits.iter().zip(&paths) {
        let utts = corpus::generate(&cfg, common.seed, split, *n);
        corpus::write_jsonl(path, &utts)?;
        say(common, format_args!("wrote {} utterances to {}", utts.len(), path.display()));
    }
    Ok(())
}

/// Appends each training log row as a JSON line and mirrors epoch-level rows
/// to stderr.
struct TrainLogger {
    file: std::io::BufWriter<std::fs::File>,
    quiet: bool,
}

impl TrainLogger {
    fn create(path: &Path, quiet: bool) -> Result<Self, Failure> {
        let file = std::fs::File::create(path).map_err(Error::from)?;
        Ok(TrainLogger { file: std::io::BufWriter::new(file), quiet })
    }

    fn log(&mut self, row: &TrainLogRow) {
        if let Ok(line) = serde_json::to_string(row) {
            let _ = writeln!(self.file, "{line}");
        }
        if !self.quiet {
            if let Some(dev) = row.dev_total.or(row.dev_st) {
                eprintln!(
                    "stage={} epoch={} step={} loss={:.4} dev={:.4}",
                    row.stage, row.epoch, row.step, row.loss, dev
                );
            }
        }
    }

    fn finish(mut self) -> Result<(), Failure> {
        self.file.flush().map_err(Error::from)?;
        Ok(())
    }
}

fn cmd_train_offline(common: &Common, args: &TrainArgs) -> Result<(), Failure> {
    let profile: Profile = common.profile.into();
    let train_path = args.train.clone().unwrap_or_else(|| default_path(common, "train.jsonl"));
    let dev_path = args.dev.clone().unwrap_or_else(|| default_path(common, "dev.jsonl"));
    let train = read_corpus(&train_path)?;
    let dev = read_corpus(&dev_path)?;
    let cfg = profile.model();
    let mut tcfg: TrainConfig = profile.train();
    if let Some(v) = args.pretrain_epochs {
        tcfg.pretrain_epochs = v;
    }
    if let Some(v) = args.stage1_epochs {
        tcfg.stage1_epochs = v;
    }
    if let Some(v) = args.stage2_epochs {
        tcfg.stage2_epochs = v;
    }
    if let Some(v) = args.batch_size {
        tcfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        tcfg.lr = v;
    }
    if let Some(v) = args.warmup_steps {
        tcfg.warmup_steps = v;
    }
    let ckpt_dir = default_path(common, "ckpt-offline");
    let mut logger =
        TrainLogger::create(&default_path(common, "train-offline-log.jsonl"), common.quiet)?;
    let (model, ps, summary) = fast_core::model::train_offline(
        &cfg,
        &tcfg,
        &train,
        &dev,
        common.seed,
        &ckpt_dir,
        args.resume.as_deref(),
        &mut |row| logger.log(row),
    )?;
    logger.finish()?;
    let out = default_path(common, "teacher.fastckpt");
    fast_core::ckpt::save(&out, &model.export_tensors(&ps))?;
    say(
        common,
        format_args!(
            "teacher saved to {} (dev ST {:.4} after stage 1, {:.4} after stage 2, averaged {} checkpoints)",
            out.display(),
            summary.dev_st_after_stage1,
            summary.dev_st_after_stage2,
            summary.stage2_ckpts.len().min(tcfg.keep_best)
        ),
    );
    Ok(())
}

fn cmd_train_fad(common: &Common, args: &FadArgs) -> Result<(), Failure> {
    let profile: Profile = common.profile.into();
    let teacher_path =
        args.teacher.clone().unwrap_or_else(|| default_path(common, "teacher.fastckpt"));
    let train_path = args.train.clone().unwrap_or_else(|| default_path(common, "train.jsonl"));
    let mut fcfg: FadConfig = profile.fad();
    if let Some(v) = args.m {
        fcfg.m = v;
    }
    if let Some(v) = args.epochs {
        fcfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        fcfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        fcfg.lr = v;
    }
    fcfg.allow_small_m = args.allow_small_m;
    if let Err(e) = fcfg.validate() {
        return Err(Failure::usage(e.to_string()));
    }
    let (t_model, t_ps) = load_model(&teacher_path)?;
    let train = read_corpus(&train_path)?;
    let mut logger =
        TrainLogger::create(&default_path(common, "train-fad-log.jsonl"), common.quiet)?;
    let (s_model, s_ps) =
        fad::train_fad((&t_model, &t_ps), &train, &fcfg, common.seed, &mut |row| {
            logger.log(row)
        })?;
    logger.finish()?;
    let out = default_path(common, "student.fastckpt");
    fast_core::ckpt::save(&out, &s_model.export_tensors(&s_ps))?;
    say(common, format_args!("student saved to {}", out.display()));
    Ok(())
}

fn parse_modes(
    requested: Option<&[String]>,
    student_given: bool,
) -> Result<Vec<String>, Failure> {
    let modes: Vec<String> = match requested {
        Some(list) => list.to_vec(),
        None => {
            let mut m = vec!["baseline".to_string(), "fai".to_string()];
            if student_given {
                m.push("fast".to_string());
            }
            m
        }
    };
    for mode in &modes {
        match mode.as_str() {
            "baseline" | "fai" => {}
            "fast" => {
                if !student_given {
                    return Err(Failure::usage("mode 'fast' requires --student"));
                }
            }
            other => {
                return Err(Failure::usage(format!(
                    "unknown mode '{other}' (expected baseline, fai, fast)"
                )))
            }
        }
    }
    Ok(modes)
}

fn cmd_eval_streaming(common: &Common, args: &EvalArgs) -> Result<(), Failure> {
    let profile: Profile = common.profile.into();
    let mut ecfg: EvalConfig = profile.eval();
    if let Some(list) = &args.k_list {
        ecfg.k_list = list.clone();
    }
    if let Some(v) = args.m {
        ecfg.m = v;
    }
    if let Some(v) = args.p {
        ecfg.p = v;
    }
    if let Some(v) = args.chunk_frames {
        ecfg.chunk_frames = v;
    }
    if ecfg.k_list.is_empty() {
        return Err(Failure::usage("--k-list must name at least one k"));
    }
    let teacher_path =
        args.teacher.clone().unwrap_or_else(|| default_path(common, "teacher.fastckpt"));
    let data_path = args.data.clone().unwrap_or_else(|| default_path(common, "test.jsonl"));
    let modes = parse_modes(args.modes.as_deref(), args.student.is_some())?;
    let (t_model, t_ps) = load_model(&teacher_path)?;
    let student = match &args.student {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    let utts = read_corpus(&data_path)?;
    let mut csv_rows: Vec<(usize, usize, f64, String, metrics::MetricReport)> = Vec::new();
    for mode in &modes {
        let (model, ps, base) = match mode.as_str() {
            "baseline" => (&t_model, &t_ps, StreamPolicy::baseline(1, ecfg.chunk_frames)),
            "fai" => (&t_model, &t_ps, StreamPolicy::fai(1, ecfg.m, ecfg.p, ecfg.chunk_frames)),
            _ => {
                let (m, p) = student.as_ref().expect("checked by parse_modes");
                (m, p, StreamPolicy::fai(1, ecfg.m, ecfg.p, ecfg.chunk_frames))
            }
        };
        let rows = stream::sweep(model, ps, &utts, &ecfg.k_list, base, mode)?;
        for row in rows {
            let path = default_path(common, &format!("traces-{mode}-k{}.jsonl", row.k));
            metrics::write_traces_jsonl(&path, &row.traces)?;
            say(
                common,
                format_args!(
                    "{mode} k={}: BLEU {:.2} AL {:.1} AP {:.3} DAL {:.1} ({})",
                    row.k,
                    row.report.bleu,
                    row.report.al_ms,
                    row.report.ap,
                    row.report.dal_ms,
                    path.display()
                ),
            );
            csv_rows.push((row.k, base.m, base.p, mode.clone(), row.report));
        }
    }
    let csv_path = default_path(common, "metrics.csv");
    write_atomic(&csv_path, metrics::metrics_csv(&csv_rows).as_bytes())?;
    say(common, format_args!("metrics written to {}", csv_path.display()));
    Ok(())
}

fn cmd_analyze_gap(common: &Common, args: &GapArgs) -> Result<(), Failure> {
    let profile: Profile = common.profile.into();
    let m = args.m.unwrap_or_else(|| profile.eval().m);
    let mode_names: Vec<&str> = match args.mode.as_str() {
        "all" => vec!["baseline", "fai", "fast"],
        "baseline" => vec!["baseline"],
        "fai" => vec!["fai"],
        "fast" => vec!["fast"],
        other => {
            return Err(Failure::usage(format!(
                "unknown mode '{other}' (expected baseline, fai, fast, all)"
            )))
        }
    };
    let needs_student = mode_names.contains(&"fast");
    if needs_student && args.student.is_none() {
        return Err(Failure::usage(format!(
            "mode '{}' requires --student",
            args.mode
        )));
    }
    let teacher_path =
        args.teacher.clone().unwrap_or_else(|| default_path(common, "teacher.fastckpt"));
    let data_path = args.data.clone().unwrap_or_else(|| default_path(common, "test.jsonl"));
    let (t_model, t_ps) = load_model(&teacher_path)?;
    let student = match &args.student {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    let utts = read_corpus(&data_path)?;

    let resolve = |name: &str| -> (&StModel, &ParamStore, GapMode) {
        match name {
            "baseline" => (&t_model, &t_ps, GapMode::Vanilla),
            "fai" => (&t_model, &t_ps, GapMode::Fai { m, p: 1.0 }),
            _ => {
                let (sm, sp) = student.as_ref().expect("student checked above");
                (sm, sp, GapMode::Fai { m, p: 1.0 })
            }
        }
    };

    let mut profiles = Vec::new();
    let mut per_step_csv = String::new();
    for name in &mode_names {
        let (model, ps, mode) = resolve(name);
        profiles.push(gap::reverse_position_profile(model, ps, &utts, mode, name, args.t_max)?);
        let stats = gap::per_step_stats(model, ps, &utts, mode)?;
        let block = gap::per_step_csv(name, &stats);
        if per_step_csv.is_empty() {
            per_step_csv.push_str(&block);
        } else {
            let body = block.splitn(2, '\n').nth(1).unwrap_or("");
            per_step_csv.push_str(body);
        }
        if let Some(p) = profiles.last() {
            if let Some(s1) = p.mean_at(1) {
                say(common, format_args!("{name}: s̄_-1 = {s1:.4}"));
            }
        }
    }
    let profile_path = default_path(common, "gap-profile.csv");
    write_atomic(&profile_path, gap::profile_csv(&profiles).as_bytes())?;
    let per_step_path = default_path(common, "gap-per-step.csv");
    write_atomic(&per_step_path, per_step_csv.as_bytes())?;

    // Degradation grouping always uses the teacher's vanilla prefix encoding.
    let scores = gap::per_utterance_s1(&t_model, &t_ps, &utts, GapMode::Vanilla)?;
    let ids: Vec<String> = utts.iter().map(|u| u.id.clone()).collect();
    let groups = gap::degradation_groups(&scores, &ids, args.n_groups);
    let mut groups_csv = String::from("group,id,score\n");
    for (gi, group) in groups.iter().enumerate() {
        for &i in &group.members {
            groups_csv.push_str(&format!("{gi},{},{:.6}\n", ids[i], scores[i]));
        }
    }
    let groups_path = default_path(common, "gap-groups.csv");
    write_atomic(&groups_path, groups_csv.as_bytes())?;

    let mut offset_csv = gap::offset_csv("fai", &gap::predicted_context_similarity(
        &t_model, &t_ps, &utts, m,
    )?);
    if let Some((sm, sp)) = &student {
        let block =
            gap::offset_csv("fast", &gap::predicted_context_similarity(sm, sp, &utts, m)?);
        offset_csv.push_str(block.splitn(2, '\n').nth(1).unwrap_or(""));
    }
    let offsets_path = default_path(common, "gap-offsets.csv");
    write_atomic(&offsets_path, offset_csv.as_bytes())?;

    say(
        common,
        format_args!(
            "wrote {}, {}, {}, {}",
            profile_path.display(),
            per_step_path.display(),
            groups_path.display(),
            offsets_path.display()
        ),
    );
    Ok(())
}

fn cmd_metrics(common: &Common, args: &MetricsArgs) -> Result<(), Failure> {
    let mut all: Vec<TraceRecord> = Vec::new();
    for path in &args.traces {
        all.extend(metrics::read_traces_jsonl(path)?);
    }
    if all.is_empty() {
        return Err(Failure::Core(Error::data("no data: trace files contain no records")));
    }
    let mut grouped: BTreeMap<(String, usize, usize, u64), Vec<TraceRecord>> = BTreeMap::new();
    for t in all {
        grouped
            .entry((t.mode.clone(), t.k, t.m, t.p.to_bits()))
            .or_default()
            .push(t);
    }
    let rows: Vec<(usize, usize, f64, String, metrics::MetricReport)> = grouped
        .into_iter()
        .map(|((mode, k, m, p_bits), traces)| {
            (k, m, f64::from_bits(p_bits), mode, metrics::report(&traces))
        })
        .collect();
    let csv = metrics::metrics_csv(&rows);
    let out = args.out.clone().unwrap_or_else(|| default_path(common, "metrics.csv"));
    write_atomic(&out, csv.as_bytes())?;
    say(common, format_args!("metrics written to {}", out.display()));
    if !common.quiet {
        eprint!("{csv}");
    }
    Ok(())
}
