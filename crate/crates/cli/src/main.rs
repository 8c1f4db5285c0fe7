use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gpso::env::{Problem, ProblemRecord, VocabSpec};
use gpso::harness::{
    config_digest, eval_rows_csv, eval_settings, evaluate, held_out_problems, load_checkpoint,
    read_jsonl, run_ablation_matrix, run_checks_with, save_checkpoint, train, warm_start, CheckOptions,
    EvalReport, RunConfig,
};
use gpso::pattern::{Pattern, PatternId};
use gpso::policy::Precision;
use gpso::rollout::{rollout_batch, TrajectoryRecord};

#[derive(Parser)]
#[command(name = "gpso", version, about = "Group pattern selection optimization on synthetic verifiable tasks")]
struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Warm start, train and evaluate.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out or supplied problems.
    Eval(EvalArgs),
    /// Run the ablation matrix.
    Ablate(AblateArgs),
    /// Gradient, masking and reduction diagnostics.
    Check(CheckArgs),
    /// Sample trajectories under each pattern and write them as JSON lines.
    RolloutDump(DumpArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration (defaults apply to omitted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated pattern list.
    #[arg(long, value_delimiter = ',')]
    patterns: Option<Vec<String>>,
    #[arg(long)]
    temperature: Option<f64>,
    /// 32-bit forward and backward passes.
    #[arg(long)]
    fp32: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    /// Samples per held-out problem.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Problems as JSON lines (default: held-out set of the config).
    #[arg(long)]
    problems: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Directory for eval.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct CheckArgs {
    /// Check around this model instead of fresh random ones.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    fp32: bool,
    #[arg(long, hide = true)]
    sabotage: bool,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    problems: Option<PathBuf>,
    /// Trajectories per pattern.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Output JSON lines file.
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<gpso::Error> for Failure {
    fn from(e: gpso::Error) -> Self {
        match e {
            gpso::Error::Config(_) | gpso::Error::Input(_) => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(format!("io error: {e}"))
    }
}

type Outcome<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let res = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Check(a) => cmd_check(a),
        Cmd::RolloutDump(a) => cmd_dump(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>) -> Outcome<RunConfig> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn parse_patterns(names: &[String]) -> Outcome<Vec<PatternId>> {
    Ok(names.iter().map(|n| PatternId::parse(n.trim())).collect::<gpso::Result<Vec<_>>>()?)
}

/// Config with the shared overrides applied; `train` selects whether
/// patterns and temperature go to training or evaluation.
fn resolve(c: &Common, train: bool) -> Outcome<RunConfig> {
    let mut cfg = load_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(names) = &c.patterns {
        let ps = parse_patterns(names)?;
        if train {
            cfg.train.patterns = ps;
        } else {
            cfg.eval.patterns = ps;
        }
    }
    if let Some(t) = c.temperature {
        if train {
            cfg.train.temperature = t;
        } else {
            cfg.eval.temperature = t;
        }
    }
    if c.fp32 {
        cfg.arch.precision = Precision::F32;
    }
    Ok(cfg)
}

fn canonical_toml(cfg: &RunConfig, digest: &str) -> Outcome<String> {
    let body = toml::to_string(cfg).map_err(|e| Failure::Runtime(format!("cannot serialize config: {e}")))?;
    Ok(format!("# config_digest = \"{digest}\"\n{body}"))
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    config_digest: &'a str,
    #[serde(flatten)]
    record: &'a T,
}

fn write_tagged<T: Serialize>(path: &Path, digest: &str, items: &[T]) -> Outcome<()> {
    let mut s = String::new();
    for it in items {
        let line = serde_json::to_string(&Tagged { config_digest: digest, record: it })
            .map_err(|e| Failure::Runtime(e.to_string()))?;
        s.push_str(&line);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[derive(Serialize)]
struct EvalFile<'a> {
    config_digest: &'a str,
    checkpoint_digest: &'a str,
    #[serde(flatten)]
    report: &'a EvalReport,
}

fn write_eval(dir: &Path, digest: &str, ckpt_digest: &str, report: &EvalReport) -> Outcome<()> {
    let body = EvalFile { config_digest: digest, checkpoint_digest: ckpt_digest, report };
    let json = serde_json::to_string_pretty(&body).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(dir.join("eval.json"), json + "\n")?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Outcome<()> {
    let vocab = VocabSpec::default();
    let mut cfg = resolve(&a.common, true)?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(k) = a.k {
        cfg.eval.k = k;
    }
    cfg.validate(&vocab)?;
    let digest = config_digest(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.toml"), canonical_toml(&cfg, &digest)?)?;

    let (warm, _) = warm_start(&cfg, &vocab)?;
    save_checkpoint(&a.out.join("warmstart.ckpt"), &warm, &Default::default(), &digest)?;
    let held_out = held_out_problems(&cfg.eval.families, cfg.eval.problems_per_family, cfg.seed, &vocab)?;
    let s = eval_settings(&cfg);
    let out = train(&cfg.train, &warm, None, cfg.seed, &vocab, Some((&held_out, &s)))?;
    for d in &out.diagnostics {
        eprintln!("warning: {d}");
    }
    write_tagged(&a.out.join("metrics.jsonl"), &digest, &out.metrics)?;
    write_tagged(&a.out.join("selections.jsonl"), &digest, &out.selections)?;
    write_tagged(&a.out.join("evals.jsonl"), &digest, &out.evals)?;
    save_checkpoint(&a.out.join("final.ckpt"), &out.snapshot, &out.opt_state, &digest)?;

    let report = evaluate(&out.snapshot, &held_out, &cfg.eval.patterns, &s, &vocab)?;
    write_eval(&a.out, &digest, &digest, &report)?;
    let csv = eval_rows_csv(&report);
    std::fs::write(a.out.join("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn load_problems(path: Option<&Path>, cfg: &RunConfig, vocab: &VocabSpec) -> Outcome<Vec<Problem>> {
    match path {
        Some(p) => {
            let recs: Vec<ProblemRecord> = read_jsonl(p).map_err(|e| match e {
                gpso::Error::Json(j) => Failure::Validation(format!("{}: {j}", p.display())),
                other => other.into(),
            })?;
            if recs.is_empty() {
                return Err(Failure::Validation(format!("{} holds no problems", p.display())));
            }
            Ok(recs.into_iter().map(Problem::from_record).collect::<gpso::Result<Vec<_>>>()?)
        }
        None => Ok(held_out_problems(&cfg.eval.families, cfg.eval.problems_per_family, cfg.seed, vocab)?),
    }
}

fn cmd_eval(a: EvalArgs) -> Outcome<()> {
    let vocab = VocabSpec::default();
    let mut cfg = resolve(&a.common, false)?;
    cfg.eval.k = a.k;
    let ckpt = load_checkpoint(&a.checkpoint, None)?;
    cfg.arch = ckpt.snapshot.arch.clone();
    if a.common.fp32 {
        cfg.arch.precision = Precision::F32;
    }
    cfg.validate(&vocab)?;
    let mut snap = ckpt.snapshot;
    snap.arch.precision = cfg.arch.precision;
    let problems = load_problems(a.problems.as_deref(), &cfg, &vocab)?;
    let report = evaluate(&snap, &problems, &cfg.eval.patterns, &eval_settings(&cfg), &vocab)?;
    print!("{}", eval_rows_csv(&report));
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        write_eval(dir, &config_digest(&cfg)?, &ckpt.config_digest, &report)?;
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Outcome<()> {
    let vocab = VocabSpec::default();
    let mut cfg = resolve(&a.common, true)?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    cfg.validate(&vocab)?;
    let digest = config_digest(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.toml"), canonical_toml(&cfg, &digest)?)?;
    let table = run_ablation_matrix(&cfg, &vocab)?;
    let csv = table.to_csv();
    std::fs::write(a.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_check(a: CheckArgs) -> Outcome<()> {
    let precision = if a.fp32 { Precision::F32 } else { Precision::F64 };
    let opts = CheckOptions { precision, seed: a.seed, sabotage: a.sabotage, ..CheckOptions::default() };
    let base = match &a.checkpoint {
        Some(p) => Some(load_checkpoint(p, None)?.snapshot),
        None => None,
    };
    let r = run_checks_with(&opts, base.as_ref())?;
    println!("max_rel_error {:e} (tolerance {:e}, {} params)", r.max_rel_error, r.tolerance, r.max_params);
    println!("masking_invariant {}", r.masking_invariant);
    println!("suffix_gradient_zero {}", r.suffix_gradient_zero);
    println!("reduction_exact {} ({} batches)", r.reduction_exact, r.reduction_batches);
    if r.passed() {
        println!("ok");
        Ok(())
    } else {
        Err(Failure::Runtime("diagnostics failed".into()))
    }
}

fn cmd_dump(a: DumpArgs) -> Outcome<()> {
    let vocab = VocabSpec::default();
    let mut cfg = resolve(&a.common, false)?;
    let ckpt = load_checkpoint(&a.checkpoint, None)?;
    cfg.arch = ckpt.snapshot.arch.clone();
    if a.common.fp32 {
        cfg.arch.precision = Precision::F32;
    }
    cfg.validate(&vocab)?;
    if a.k == 0 {
        return Err(Failure::Validation("--k must be at least 1".into()));
    }
    let mut snap = ckpt.snapshot;
    snap.arch.precision = cfg.arch.precision;
    let problems = load_problems(a.problems.as_deref(), &cfg, &vocab)?;
    let mut ids = cfg.eval.patterns.clone();
    if !ids.contains(&PatternId::Adaptive) {
        ids.push(PatternId::Adaptive);
    }
    let patterns: Vec<Pattern> = ids.iter().map(|&p| Pattern::standard(p, &vocab)).collect();
    let sets = rollout_batch(&snap, &problems, &patterns, a.k, cfg.eval.temperature, cfg.eval.max_new, cfg.seed, &vocab)?;
    let records: Vec<TrajectoryRecord> = sets
        .iter()
        .flat_map(|s| s.groups.iter())
        .flat_map(|g| g.trajectories.iter().map(TrajectoryRecord::from))
        .collect();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    gpso::harness::write_jsonl(&a.out, &records)?;
    println!("{} trajectories", records.len());
    Ok(())
}
