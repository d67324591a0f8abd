//! `flowseq` command line: gen-data, train, eval, enumerate, compare.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{Method, RunConfig};
use crate::error::{ConfigError, Error, Result};
use crate::eval::{evaluate, EvalReport, EvalSummary};
use crate::experiment::{fresh_policy, train_method, Suite};
use crate::gflownet::{flow_consistent_policy, target_distribution};
use crate::policy::Policy;
use crate::problem::{read_problems, write_problems, Problem};

#[derive(Debug, Parser)]
#[command(name = "flowseq", version, about = "GFlowNet fine-tuning on verifiable derivation tasks")]
pub struct Cli {
    /// Run configuration (`key = value` file, or a saved run_meta.json).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sampling and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a problem set as JSON Lines.
    GenData,
    /// Train a policy with the configured method.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Exact terminal distribution of a policy against R/Z.
    Enumerate(EnumerateArgs),
    /// Tabulate two or more evaluation reports.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Policy to start from instead of a fresh one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Method label stored in the report (defaults to the configured method).
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EnumerateArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Policy to enumerate; defaults to the flow-consistent policy.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Number of problems to enumerate.
    #[arg(long, default_value_t = 3)]
    pub limit: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Evaluation report JSON files.
    #[arg(required = true, num_args = 2..)]
    pub reports: Vec<PathBuf>,
}

/// Parses arguments, runs the command and maps failures to exit codes:
/// 2 for configuration or usage errors, 1 for runtime errors.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidConfig(_) => 2,
                _ => 1,
            }
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("FLOWSEQ_LOG", "error");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.workers == 0 {
        return Err(ConfigError::Range { name: "workers".into(), message: "must be >= 1".into() }.into());
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = resolve_config(cli)?;
    // a pool that is already built (repeated in-process runs) is fine
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global();
    std::fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::GenData => gen_data(&mut cfg, &cli.out),
        Command::Train(a) => train(&mut cfg, a, &cli.out),
        Command::Eval(a) => eval(&mut cfg, a, &cli.out),
        Command::Enumerate(a) => enumerate(&mut cfg, a, &cli.out),
        Command::Compare(a) => compare(&a.reports, &cli.out),
    }
}

fn write_meta(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut f = std::fs::File::create(out.join("run_meta.json"))?;
    f.write_all(cfg.to_json()?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

fn load_suite(cfg: &mut RunConfig, dataset: &Option<PathBuf>) -> Result<Suite> {
    if dataset.is_some() {
        cfg.dataset = dataset.clone();
    }
    match &cfg.dataset {
        Some(path) => {
            let vocab = cfg.task.vocab();
            let f = std::io::BufReader::new(std::fs::File::open(path)?);
            let problems = read_problems(f, &vocab)?;
            Suite::from_problems(cfg, &problems)
        }
        None => Suite::generate(cfg),
    }
}

fn gen_data(cfg: &mut RunConfig, out: &Path) -> Result<()> {
    cfg.require_seed()?;
    let suite = Suite::generate(cfg)?;
    let path = out.join("problems.jsonl");
    let f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    write_problems(f, &suite.problems(), &suite.vocab)?;
    write_meta(cfg, out)?;
    println!("wrote {} problems to {}", suite.data.len(), path.display());
    Ok(())
}

fn train(cfg: &mut RunConfig, a: &TrainArgs, out: &Path) -> Result<()> {
    if let Some(m) = a.method {
        cfg.method = m;
    }
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint.clone();
    }
    let seed = cfg.require_seed()?;
    let suite = load_suite(cfg, &a.dataset)?;
    let mut policy = match &cfg.checkpoint {
        Some(p) => Policy::load(p, suite.vocab.clone())?,
        None => {
            let mut p = fresh_policy(cfg, &suite.vocab, seed);
            if cfg.sft_init && cfg.method != Method::Sft {
                let r = train_method(Method::Sft, &mut p, &suite, cfg, seed)?;
                r.save(&out.join("train_sft_init.csv"))?;
            }
            p
        }
    };
    let report = train_method(cfg.method, &mut policy, &suite, cfg, seed)?;
    let csv = out.join(format!("train_{}.csv", cfg.method.name().to_lowercase()));
    report.save(&csv)?;
    let ckpt = out.join("policy.ckpt");
    policy.save(&ckpt)?;
    write_meta(cfg, out)?;
    println!("trained {} for {} updates; checkpoint {}; report {}", cfg.method, report.rows.len(), ckpt.display(), csv.display());
    Ok(())
}

fn eval(cfg: &mut RunConfig, a: &EvalArgs, out: &Path) -> Result<()> {
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint.clone();
    }
    let seed = cfg.require_seed()?;
    let suite = load_suite(cfg, &a.dataset)?;
    let path = cfg.checkpoint.clone().ok_or_else(|| ConfigError::Missing("checkpoint".into()))?;
    let policy = Policy::load(&path, suite.vocab.clone())?;
    let name = a.name.clone().unwrap_or_else(|| cfg.method.name().to_string());
    let report = evaluate(&policy, &suite.problems(), &cfg.eval_cfg(seed), &name)?;
    report.save(out, "eval")?;
    write_meta(cfg, out)?;
    let s = &report.summary;
    println!(
        "{name}: greedy {:.4} pass@1 {:.4} pass@{} {:.4} distinct {:.4}",
        s.greedy_accuracy,
        report.pass_at(1).unwrap_or(0.0),
        s.k,
        report.pass_at(s.k).unwrap_or(0.0),
        s.mean_distinct_correct
    );
    Ok(())
}

fn enumerate(cfg: &mut RunConfig, a: &EnumerateArgs, out: &Path) -> Result<()> {
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint.clone();
    }
    let suite = load_suite(cfg, &a.dataset)?;
    let problems: Vec<Problem> = suite.problems().into_iter().take(a.limit.max(1)).collect();
    let policy = match &cfg.checkpoint {
        Some(p) => Policy::load(p, suite.vocab.clone())?,
        None => flow_consistent_policy(&problems, suite.vocab.clone(), &suite.reward)?,
    };
    let mut rows = csv::Writer::from_path(out.join("enumerate.csv"))?;
    rows.write_record(["problem_id", "solution", "policy_prob", "target_prob"])?;
    let mut summary = csv::Writer::from_path(out.join("enumerate_summary.csv"))?;
    summary.write_record(["problem_id", "terminals", "overflow", "l1"])?;
    for p in &problems {
        let target = target_distribution(p, &suite.vocab, &suite.reward)?;
        let dist = policy.terminal_distribution(p, p.max_solution_len)?;
        let mut l1 = dist.overflow;
        let mut seen = 0.0;
        for (g, prob) in &dist.terminals {
            let q = target.get(g).copied().unwrap_or(0.0);
            seen += q;
            l1 += (prob - q).abs();
            rows.write_record([p.id.to_string(), suite.vocab.decode(g)?, prob.to_string(), q.to_string()])?;
        }
        l1 += (1.0 - seen).max(0.0);
        summary.write_record([
            p.id.to_string(),
            dist.terminals.len().to_string(),
            dist.overflow.to_string(),
            l1.to_string(),
        ])?;
        println!("problem {}: {} terminals, L1 = {l1:.3e}", p.id, dist.terminals.len());
    }
    rows.flush()?;
    summary.flush()?;
    write_meta(cfg, out)?;
    Ok(())
}

/// Methods × {greedy, pass@4, pass@8, mean distinct correct}, sorted by
/// method name.
pub fn compare_table(summaries: &[EvalSummary]) -> Vec<[String; 5]> {
    let mut sorted: Vec<&EvalSummary> = summaries.iter().collect();
    sorted.sort_by(|a, b| a.method.cmp(&b.method));
    let cell = |s: &EvalSummary, k: usize| s.pass_at_k.get(&k).map(|v| format!("{v:.4}")).unwrap_or_default();
    sorted
        .into_iter()
        .map(|s| {
            [
                s.method.clone(),
                format!("{:.4}", s.greedy_accuracy),
                cell(s, 4),
                cell(s, 8),
                format!("{:.4}", s.mean_distinct_correct),
            ]
        })
        .collect()
}

fn compare(reports: &[PathBuf], out: &Path) -> Result<()> {
    let summaries = reports.iter().map(|p| EvalReport::load_summary(p)).collect::<Result<Vec<_>>>()?;
    let header = ["method", "greedy", "pass@4", "pass@8", "mean_distinct_correct"];
    let table = compare_table(&summaries);
    let mut w = csv::Writer::from_path(out.join("compare.csv"))?;
    w.write_record(header)?;
    for row in &table {
        w.write_record(row)?;
    }
    w.flush()?;
    println!("{:<12} {:>8} {:>8} {:>8} {:>10}", header[0], header[1], header[2], header[3], "distinct");
    for r in &table {
        println!("{:<12} {:>8} {:>8} {:>8} {:>10}", r[0], r[1], r[2], r[3], r[4]);
    }
    Ok(())
}
